import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import ndimage

from encore.metrics import mean_dice
from encore.ndgrid import argmax_channel, softmax
from encore.segmodel import forward
from encore.synthdata import (
    GenerationError,
    Sample,
    SceneSpec,
    ShapeClass,
    SplitSpec,
    augment_strong,
    augment_weak,
    build_dataset,
    generate,
    load_dataset,
    save_dataset,
    split,
)
from encore.trainer import TrainConfig, run, warmup


class FixedRng:
    """Stands in for a Generator: fixed uniform draws, zero normal draws."""

    def __init__(self, u):
        self.u = u

    def random(self):
        return self.u

    def uniform(self, lo, hi):
        return 1.0 if lo <= 1.0 <= hi else lo

    def normal(self, loc=0.0, scale=1.0, size=None):
        return np.full(size, loc)


def test_generate_is_deterministic():
    a = generate(SceneSpec(seed=3), 4)
    b = generate(SceneSpec(seed=3), 4)
    for x, y in zip(a, b):
        assert x.image.tobytes() == y.image.tobytes()
        assert x.truth == y.truth
    c = generate(SceneSpec(seed=4), 1)
    assert c[0].image.tobytes() != a[0].image.tobytes()


def test_samples_are_valid():
    spec = SceneSpec()
    for s in generate(spec, 10):
        assert s.image.shape == (3, 64, 64)
        assert s.image.min() >= 0 and s.image.max() <= 1
        assert s.truth.labels.max() < spec.class_count
        assert s.truth.keep.all()


def test_one_disk_gives_one_region():
    spec = SceneSpec(shapes=(ShapeClass("disk", 0.8, 0.05),), channels=1, gain_sigma=0.0, cast_sigma=0.0)
    assert spec.class_count == 2
    for s in generate(spec, 20):
        _, n = ndimage.label(s.truth.labels == 1)
        assert n == 1


def test_shared_gain_keeps_hue_ratios():
    spec = SceneSpec(gain_sigma=0.8, cast_sigma=0.0, background_sigma=0.0,
                     shapes=(ShapeClass("disk", 0.5, 0.0, color=(0.4, 0.2, 0.1)),))
    for s in generate(spec, 5):
        disk = s.image[:, s.truth.labels == 1][:, 0]
        if disk.max() < 1.0:  # unclipped
            assert np.allclose(disk / disk[2], [4.0, 2.0, 1.0])


def test_class_prevalence():
    spec = SceneSpec()
    seen = np.zeros(spec.class_count)
    samples = generate(spec, 100)
    for s in samples:
        seen[np.unique(s.truth.labels)] += 1
    assert np.all(seen[1:] >= 90)


def test_shape_that_cannot_fit():
    spec = SceneSpec(height=8, width=8, shapes=(ShapeClass("disk", 0.5, 0.0, size=(0.6, 0.7)),))
    with pytest.raises(GenerationError) as exc:
        generate(spec, 1)
    assert exc.value.class_index == 1


@pytest.mark.parametrize(
    "kwargs",
    [
        {"shapes": (ShapeClass("disk", 0.5, -0.1),)},
        {"shapes": (ShapeClass("disk", 0.5, float("nan")),)},
        {"shapes": (ShapeClass("hexagon", 0.5, 0.1),)},
        {"channels": 2},
        {"cast_sigma": -0.1},
        {"gain_sigma": float("inf")},
    ],
)
def test_invalid_specs(kwargs):
    with pytest.raises(ValueError):
        SceneSpec(**kwargs)


def test_spec_roundtrip():
    spec = SceneSpec(seed=7)
    assert SceneSpec.from_dict(json.loads(json.dumps(spec.to_dict()))) == spec


@pytest.mark.parametrize("n, f, k", [(8, 1 / 2, 4), (9, 1 / 8, 1), (32, 1 / 32, 1), (240, 1 / 32, 7)])
def test_split_counts(n, f, k):
    samples = [Sample(np.zeros((1, 1, 1)), None, i) for i in range(n)]
    labeled, unlabeled = split(samples, SplitSpec(n, f, seed=1))
    assert len(labeled) == k and len(unlabeled) == n - k
    assert {s.id for s in labeled}.isdisjoint(s.id for s in unlabeled)
    assert {s.id for s in labeled} | {s.id for s in unlabeled} == set(range(n))


def test_split_errors():
    with pytest.raises(ValueError):
        split([], SplitSpec(3, 1 / 2))
    with pytest.raises(ValueError):
        SplitSpec(10, 1 / 3)


def test_weak_augmentation():
    s = generate(SceneSpec(), 1)[0]
    same = augment_weak(s, FixedRng(0.9))
    assert same.image.tobytes() == s.image.tobytes()
    flipped = augment_weak(s, FixedRng(0.1))
    assert np.array_equal(flipped.image, s.image[:, :, ::-1])
    assert flipped.truth == s.truth.flipped()
    back = augment_weak(flipped, FixedRng(0.1))
    assert np.array_equal(back.image, s.image) and back.truth == s.truth


def test_strong_identity_with_neutral_draws():
    s = generate(SceneSpec(), 1)[0]
    out = augment_strong(s, FixedRng(0.9))
    assert np.allclose(out.image, s.image, atol=1e-15)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_strong_augmentation_stays_in_range(seed):
    s = generate(SceneSpec(height=16, width=16, seed=seed % 1000), 1)[0]
    rng = np.random.default_rng(seed)
    out = augment_strong(s, rng)
    assert out.image.min() >= 0 and out.image.max() <= 1
    assert out.truth in (s.truth, s.truth.flipped())


def test_noiseless_scenes_are_linearly_separable():
    spec = SceneSpec(
        shapes=(ShapeClass("disk", 0.9, 0.0), ShapeClass("rectangle", 0.6, 0.0)),
        background_mean=0.2, background_sigma=0.0, channels=1, gain_sigma=0.0, cast_sigma=0.0,
        height=32, width=32,
    )
    ds = build_dataset(spec, 4, fraction=1 / 2)
    labeled, _ = ds.labeled_split()
    config = TrainConfig(mode="supervised", hidden=0, radius=1, lr_init=10.0, seed=0)
    model = warmup(config, labeled, iterations=600, total=600)
    preds = [argmax_channel(softmax(forward(model, s.image))) for s in ds.train]
    assert mean_dice(preds, [s.truth for s in ds.train], spec.class_count) == 1.0


def test_difficulty_follows_noise():
    spec = SceneSpec(
        shapes=(ShapeClass("disk", 0.8, 0.02), ShapeClass("rectangle", 0.55, 0.30)),
        background_mean=0.3, background_sigma=0.02, channels=1, gain_sigma=0.0, cast_sigma=0.0,
        height=32, width=32,
    )
    ds = build_dataset(spec, 16, fraction=1 / 2, test_count=16)
    result = run(TrainConfig(mode="supervised", iterations=300, lr_init=1.0, hidden=8), ds)
    easy, hard = result.per_class_dice[1], result.per_class_dice[2]
    assert easy > hard


def test_dataset_roundtrip(tmp_path):
    ds = build_dataset(SceneSpec(height=16, width=16), 6, fraction=1 / 2, test_count=2)
    save_dataset(ds, tmp_path)
    back = load_dataset(tmp_path)
    assert back.spec == ds.spec and back.labeled_ids == ds.labeled_ids
    assert [s.id for s in back.train] == [s.id for s in ds.train]
    assert [s.id for s in back.test] == [s.id for s in ds.test]
    for a, b in zip(back.train + back.test, ds.train + ds.test):
        assert a.truth == b.truth
        assert np.array_equal(a.image, np.rint(b.image * 255) / 255)


def test_save_is_byte_identical(tmp_path):
    ds = build_dataset(SceneSpec(height=16, width=16), 3)
    save_dataset(ds, tmp_path / "a")
    save_dataset(ds, tmp_path / "b")
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    assert len(files) == 3 * 3 + 3 + 1
    for f in files:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_load_missing_manifest(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_dataset(tmp_path)
