import csv
import json

import pytest

from encore import cli
from encore.cli import ExperimentMatrix, UsageError, check_sweep, main, summarize

SMALL_SPEC = json.dumps({"height": 24, "width": 24})
FAST = {"iterations": 6, "batch_labeled": 1, "batch_unlabeled": 2, "hidden": 3}


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    assert main(["generate", "--spec", SMALL_SPEC, "--count", "8", "--test-count", "2",
                 "--fraction", "0.25", "--out", str(out)]) == 0
    return out


def test_generate_writes_pairs_and_is_idempotent(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for out in (a, b):
        assert main(["generate", "--spec", SMALL_SPEC, "--count", "4", "--out", str(out)]) == 0
    manifest = json.loads((a / "manifest.json").read_text())
    assert len(manifest["samples"]) == 4
    assert len(list((a / "masks").glob("*.pgm"))) == 4
    for f in sorted(p for p in a.rglob("*") if p.is_file()):
        assert f.read_bytes() == (b / f.relative_to(a)).read_bytes()


def test_generate_count_zero_is_usage_error(tmp_path, capsys):
    assert main(["generate", "--count", "0", "--out", str(tmp_path)]) == 1
    assert "--count" in capsys.readouterr().err


def test_generate_rejects_bad_spec(tmp_path):
    assert main(["generate", "--spec", '{"channels": 2}', "--count", "2", "--out", str(tmp_path)]) == 1


def test_missing_argument_is_usage_error():
    with pytest.raises(SystemExit) as exc:
        main(["train", "--data", "x"])
    assert exc.value.code == 1


def test_train_prints_dice_and_writes_run(data_dir, tmp_path, capsys):
    cfg = json.dumps({**FAST, "mode": "encore"})
    assert main(["train", "--config", cfg, "--data", str(data_dir), "--out", str(tmp_path / "run")]) == 0
    line = capsys.readouterr().out.strip().splitlines()[-1]
    assert line.startswith("mean_dice ")
    assert 0.0 <= float(line.split()[1]) <= 1.0
    assert (tmp_path / "run" / "metrics.csv").is_file()
    assert main(["report", str(tmp_path / "run")]) == 0


def test_train_config_from_file(data_dir, tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({**FAST, "mode": "supervised"}))
    assert main(["train", "--config", str(path), "--data", str(data_dir), "--out", str(tmp_path / "r")]) == 0


def test_train_missing_data_dir(tmp_path, capsys):
    missing = tmp_path / "nowhere"
    assert main(["train", "--data", str(missing), "--out", str(tmp_path / "r")]) == 2
    assert str(missing) in capsys.readouterr().err


def test_train_validation_names_fields(data_dir, tmp_path, capsys):
    cfg = json.dumps({"alpha_low": 1.5, "batch_unlabeled": 0})
    assert main(["train", "--config", cfg, "--data", str(data_dir), "--out", str(tmp_path / "r")]) == 1
    err = capsys.readouterr().err
    assert "alpha_low" in err and "batch_unlabeled" in err


def test_train_noiseless_converges(tmp_path, capsys):
    spec = json.dumps({
        "height": 32, "width": 32, "channels": 1, "gain_sigma": 0.0, "cast_sigma": 0.0,
        "background_mean": 0.2, "background_sigma": 0.0,
        "shapes": [{"kind": "disk", "mean": 0.9, "sigma": 0.0}, {"kind": "rectangle", "mean": 0.6, "sigma": 0.0}],
    })
    assert main(["generate", "--spec", spec, "--count", "6", "--test-count", "4",
                 "--fraction", "0.5", "--out", str(tmp_path / "d")]) == 0
    cfg = json.dumps({"mode": "supervised", "iterations": 600, "hidden": 0, "radius": 1, "lr_init": 10.0})
    assert main(["train", "--config", cfg, "--data", str(tmp_path / "d"), "--out", str(tmp_path / "r")]) == 0
    assert float(capsys.readouterr().out.split()[-1]) > 0.95


def test_log_env_var(data_dir, tmp_path, monkeypatch):
    monkeypatch.setenv("ENCORE_LOG", "loud")
    assert main(["report", str(tmp_path)]) == 1


def test_matrix_validation():
    with pytest.raises(UsageError):
        ExperimentMatrix.from_dict({"fractions": [], "modes": ["fixed"], "thresholds": [0.9]})
    with pytest.raises(UsageError):
        ExperimentMatrix.from_dict({"fractions": [0.5], "modes": ["fixed"], "thresholds": [0.9], "seeds": [1, 1]})
    with pytest.raises(UsageError):
        ExperimentMatrix.from_dict({"fractions": [0.5], "modes": ["fixed"]})
    with pytest.raises(UsageError):
        ExperimentMatrix.from_dict({"fractions": [0.5], "modes": ["encore"], "config": {"mode": "fixed"}})


def test_matrix_cell_count():
    m = ExperimentMatrix.from_dict(
        {"fractions": [0.5, 0.25], "modes": ["fixed", "encore"], "thresholds": [0.6, 0.75, 0.9], "seeds": [0]}
    )
    modes = [c[1] for c in m.cells()]
    assert modes.count("fixed") == 6 and modes.count("encore") == 2


def test_summary_range_definition():
    rows = [
        {"fraction": 0.5, "mode": "fixed", "threshold": t, "seed": 0, "mean_dice": d}
        for t, d in [(0.6, 0.7), (0.9, 0.8), (0.95, 0.75)]
    ] + [{"fraction": 0.5, "mode": "encore", "threshold": None, "seed": 0, "mean_dice": 0.81}]
    s = summarize(rows)["0.5"]
    assert s["fixed_range"] == pytest.approx(0.1, abs=1e-12)
    assert s["encore_mean"] == 0.81


def test_sweep_end_to_end_with_resume(data_dir, tmp_path, monkeypatch, capsys):
    matrix = {
        "fractions": [0.5, 0.25], "modes": ["fixed", "encore"], "thresholds": [0.6, 0.75, 0.9],
        "seeds": [0], "config": FAST,
    }
    out = tmp_path / "sweep"
    args = ["sweep", "--matrix", json.dumps(matrix), "--data", str(data_dir), "--out", str(out)]
    assert main(args) == 0
    rows = check_sweep(out / "sweep.csv")
    assert [r["mode"] for r in rows].count("fixed") == 6
    assert [r["mode"] for r in rows].count("encore") == 2
    summary = json.loads((out / "summary.json").read_text())
    for frac, entry in summary["fractions"].items():
        fixed = [r["mean_dice"] for r in rows if r["mode"] == "fixed" and repr(r["fraction"]) == frac]
        assert entry["fixed_range"] == pytest.approx(max(fixed) - min(fixed), abs=1e-12)
    before = (out / "sweep.csv").read_bytes()

    def boom(*a, **k):
        raise AssertionError("completed cells must not rerun")

    monkeypatch.setattr(cli, "run", boom)
    assert main(args) == 0
    assert (out / "sweep.csv").read_bytes() == before
    assert main(["report", str(out)]) == 0
    assert "encore" in capsys.readouterr().out


def test_sweep_records_failed_cells(data_dir, tmp_path, monkeypatch):
    real = cli.run

    def flaky(config, *a, **k):
        if config.mode == "encore":
            raise RuntimeError("simulated crash")
        return real(config, *a, **k)

    monkeypatch.setattr(cli, "run", flaky)
    matrix = {"fractions": [0.5], "modes": ["fixed", "encore"], "thresholds": [0.9], "seeds": [0], "config": FAST}
    out = tmp_path / "sweep"
    assert main(["sweep", "--matrix", json.dumps(matrix), "--data", str(data_dir), "--out", str(out)]) == 2
    summary = json.loads((out / "summary.json").read_text())
    assert len(summary["failed"]) == 1 and "simulated crash" in summary["failed"][0]["error"]
    assert len(check_sweep(out / "sweep.csv")) == 1
    # a rerun retries only the failed cell
    monkeypatch.setattr(cli, "run", real)
    assert main(["sweep", "--matrix", json.dumps(matrix), "--data", str(data_dir), "--out", str(out)]) == 0
    assert len(check_sweep(out / "sweep.csv")) == 2


def test_report_rejects_schema_drift(tmp_path):
    path = tmp_path / "sweep.csv"
    with open(path, "w", newline="") as fh:
        csv.writer(fh).writerows([["fraction", "mode", "seed", "mean_dice"], ["0.5", "fixed", "0", "0.7"]])
    assert main(["report", str(path)]) == 2
    with open(path, "w", newline="") as fh:
        csv.writer(fh).writerows([cli.SWEEP_HEADER, ["0.5", "fixed", "", "0", "0.7"]])
    assert main(["report", str(path)]) == 2
