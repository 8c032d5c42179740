import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from encore.metrics import dice, mean_dice
from encore.ndgrid import LabelMask, ShapeError


def mask(rows):
    return LabelMask.full(np.array(rows))


def naive_dice(pred, truth, num_classes):
    """Triple-loop reference: classes x rows x cols."""
    out = []
    for c in range(num_classes):
        inter = p_count = t_count = 0
        for i in range(pred.shape[0]):
            for j in range(pred.shape[1]):
                p = pred[i, j] == c
                t = truth[i, j] == c
                p_count += p
                t_count += t
                inter += p and t
        out.append(1.0 if p_count + t_count == 0 else 2.0 * inter / (p_count + t_count))
    return out


def test_identity_scores_one():
    m = mask([[0, 1], [2, 2]])
    r = dice(m, m, 3)
    assert r.dice == [1.0, 1.0, 1.0]
    assert r.mean_foreground == 1.0


def test_disjoint_scores_zero():
    r = dice(mask([[1, 1], [0, 0]]), mask([[0, 0], [1, 1]]), 2)
    assert r.dice[1] == 0.0
    assert r.mean_foreground == 0.0


def test_half_overlap():
    # |P| = 4, |T| = 4, overlap 2
    pred = mask([[1, 1, 1, 1], [0, 0, 0, 0]])
    truth = mask([[1, 1, 0, 0], [1, 1, 0, 0]])
    assert dice(pred, truth, 2).dice[1] == 0.5


def test_absent_class_flagged_and_excluded():
    r = dice(mask([[0, 1]]), mask([[0, 1]]), 3)
    assert r.absent == [False, False, True]
    assert r.dice[2] == 1.0
    assert r.mean_foreground == 1.0
    r = dice(mask([[0, 2]]), mask([[0, 1]]), 3)
    assert r.mean_foreground == 0.0


def test_background_only_scene():
    r = dice(mask([[0, 0]]), mask([[0, 0]]), 3)
    assert r.mean_foreground == 1.0


def test_shape_mismatch():
    with pytest.raises(ShapeError):
        dice(mask([[0, 1]]), mask([[0], [1]]), 2)


def test_csv_row():
    r = dice(mask([[0, 1]]), mask([[0, 1]]), 3)
    assert r.csv_header() == ["sample_id", "dice_0", "dice_1", "dice_2", "mean_foreground"]
    assert r.csv_row(7) == [7, "1.0", "1.0", "absent", "1.0"]


def test_oracle_equivalence_random_masks():
    rng = np.random.default_rng(0)
    for _ in range(100):
        c = int(rng.integers(2, 6))
        a = rng.integers(0, c, (16, 16))
        b = rng.integers(0, c, (16, 16))
        assert dice(LabelMask.full(a), LabelMask.full(b), c).dice == naive_dice(a, b, c)


masks = st.integers(2, 5).flatmap(
    lambda c: st.tuples(
        st.just(c),
        st.lists(st.integers(0, c - 1), min_size=12, max_size=12),
        st.lists(st.integers(0, c - 1), min_size=12, max_size=12),
    )
)


@settings(max_examples=300, deadline=None)
@given(masks)
def test_symmetric_and_bounded(case):
    c, a, b = case
    ma = LabelMask.full(np.array(a).reshape(3, 4))
    mb = LabelMask.full(np.array(b).reshape(3, 4))
    ab, ba = dice(ma, mb, c), dice(mb, ma, c)
    assert ab.dice == ba.dice
    assert all(0.0 <= d <= 1.0 for d in ab.dice)
    assert 0.0 <= ab.mean_foreground <= 1.0


def test_mean_dice_averages_images():
    good = mask([[0, 1]])
    bad = mask([[1, 0]])
    assert mean_dice([good, bad], [good, good], 2) == 0.5
