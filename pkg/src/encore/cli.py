"""Command-line entry point: generate | train | sweep | report.

Exit codes: 0 success, 1 usage or invalid input, 2 runtime failure.
Set ENCORE_LOG to error, info or debug to control log verbosity.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

from encore.synthdata import SceneSpec, build_dataset, load_dataset, save_dataset
from encore.trainer import MODES, ConfigError, TrainConfig, run

log = logging.getLogger("encore")

SWEEP_HEADER = ("fraction", "mode", "threshold", "seed", "mean_dice")
METRICS_HEADER = (
    "iteration", "phase", "lr", "unsup_weight", "loss_l", "loss_u", "kept_fraction",
    "dice_1", "dice_2", "dice_3", "selected", "adapted", "eval_dice",
)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _setup_logging():
    level = os.environ.get("ENCORE_LOG", "error").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    if level not in levels:
        raise UsageError(f"ENCORE_LOG must be one of {sorted(levels)}, got {level!r}")
    logging.basicConfig(level=levels[level], format="%(levelname)s %(name)s: %(message)s")


def _load_json(arg: str, what: str) -> dict:
    """Accept either a path to a JSON file or an inline JSON object."""
    text = arg
    if not arg.lstrip().startswith("{"):
        path = Path(arg)
        if not path.is_file():
            raise UsageError(f"{what} file not found: {path}")
        text = path.read_text()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise UsageError(f"{what} is not valid JSON: {exc}") from None
    if not isinstance(data, dict):
        raise UsageError(f"{what} must be a JSON object")
    return data


# ---------------------------------------------------------------------------
# generate

def cmd_generate(args) -> int:
    if args.count < 1:
        raise UsageError(f"--count must be >= 1, got {args.count}")
    try:
        spec = SceneSpec.from_dict(_load_json(args.spec, "spec")) if args.spec else SceneSpec()
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid spec: {exc}") from None
    ds = build_dataset(spec, args.count, args.fraction, args.test_count, args.split_seed)
    path = save_dataset(ds, args.out)
    print(f"wrote {len(ds.train) + len(ds.test)} samples to {path}")
    return 0


# ---------------------------------------------------------------------------
# train

def _config_from(arg) -> TrainConfig:
    raw = _load_json(arg, "config") if arg else {}
    try:
        return TrainConfig.from_dict(raw).validate()
    except TypeError as exc:
        raise UsageError(f"invalid config: {exc}") from None


def _require_data(path) -> Path:
    root = Path(path)
    if not (root / "manifest.json").is_file():
        raise FileNotFoundError(f"data directory {root} has no manifest.json")
    return root


def cmd_train(args) -> int:
    config = _config_from(args.config)
    dataset = load_dataset(_require_data(args.data))
    result = run(config, dataset, args.out)
    print(f"mean_dice {result.eval_dice!r}")
    return 0


# ---------------------------------------------------------------------------
# sweep

@dataclass
class ExperimentMatrix:
    """Cells are (fraction, mode, threshold, seed); threshold is set for fixed mode only.

    ``data`` optionally describes a generated benchmark
    ``{"spec": {...}, "count": N, "test_count": M}``; its scene seed follows the
    cell seed so that each seed sees a fresh draw of scenes.
    """

    fractions: list
    modes: list
    thresholds: list = field(default_factory=list)
    seeds: list = field(default_factory=lambda: [0])
    config: dict = field(default_factory=dict)
    data: dict | None = None

    def problems(self) -> list:
        out = []
        for name in ("fractions", "modes", "seeds"):
            if not getattr(self, name):
                out.append(f"{name}: must be a non-empty list")
        if len(set(self.seeds)) != len(self.seeds):
            out.append("seeds: must be distinct")
        for m in self.modes:
            if m not in MODES:
                out.append(f"modes: {m!r} not one of {MODES}")
        if "fixed" in self.modes and not self.thresholds:
            out.append("thresholds: fixed mode needs a non-empty threshold grid")
        for key in ("mode", "label_fraction", "fixed_threshold", "seed"):
            if key in self.config:
                out.append(f"config: {key} is set per cell and cannot be overridden")
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentMatrix":
        try:
            m = cls(**d)
        except TypeError as exc:
            raise UsageError(f"invalid matrix: {exc}") from None
        problems = m.problems()
        if problems:
            raise UsageError("invalid matrix: " + "; ".join(problems))
        return m

    def cells(self) -> list:
        out = []
        for fraction in self.fractions:
            for mode in self.modes:
                thresholds = self.thresholds if mode == "fixed" else [None]
                for threshold in thresholds:
                    for seed in self.seeds:
                        out.append((fraction, mode, threshold, seed))
        return out


def cell_name(cell) -> str:
    fraction, mode, threshold, seed = cell
    thr = "-" if threshold is None else repr(float(threshold))
    return f"f{float(fraction)!r}_{mode}_t{thr}_s{seed}"


_DATA_CACHE = {}


def _dataset_for(data, seed):
    if isinstance(data, (str, Path)):
        key = ("dir", str(data))
        if key not in _DATA_CACHE:
            _DATA_CACHE[key] = load_dataset(_require_data(data))
        return _DATA_CACHE[key]
    key = ("gen", json.dumps(data, sort_keys=True), seed)
    if key not in _DATA_CACHE:
        spec = SceneSpec.from_dict({**data.get("spec", {}), "seed": seed})
        _DATA_CACHE.clear()
        _DATA_CACHE[key] = build_dataset(spec, data.get("count", 240), test_count=data.get("test_count", 48))
    return _DATA_CACHE[key]


def run_cell(cell, data, base_config: dict, out_root) -> dict:
    """Run one sweep cell and persist its result file; errors are recorded, not raised."""
    fraction, mode, threshold, seed = cell
    cell_dir = Path(out_root) / "cells" / cell_name(cell)
    row = {"fraction": fraction, "mode": mode, "threshold": threshold, "seed": seed}
    try:
        cfg = dict(base_config, mode=mode, label_fraction=fraction, seed=seed)
        if threshold is not None:
            cfg["fixed_threshold"] = threshold
        config = TrainConfig.from_dict(cfg).validate()
        result = run(config, _dataset_for(data, seed), cell_dir)
        row["mean_dice"] = result.eval_dice
    except Exception as exc:  # partial-failure policy: record and continue
        log.error("cell %s failed: %s", cell_name(cell), exc)
        log.debug("%s", traceback.format_exc())
        row["error"] = f"{type(exc).__name__}: {exc}"
    cell_dir.mkdir(parents=True, exist_ok=True)
    (cell_dir / "result.json").write_text(json.dumps(row) + "\n")
    return row


def _completed(out_root, cell):
    path = Path(out_root) / "cells" / cell_name(cell) / "result.json"
    if not path.is_file():
        return None
    row = json.loads(path.read_text())
    return None if "error" in row else row


def summarize(rows: list) -> dict:
    """Per fraction: fixed-threshold Dice range (seed-averaged and per seed) and mode means."""
    summary = {}
    for fraction in sorted({r["fraction"] for r in rows}, reverse=True):
        mine = [r for r in rows if r["fraction"] == fraction and "mean_dice" in r]
        by_thr = {}
        by_seed = {}
        for r in mine:
            if r["mode"] == "fixed":
                by_thr.setdefault(r["threshold"], []).append(r["mean_dice"])
                by_seed.setdefault(r["seed"], []).append(r["mean_dice"])
        thr_means = {t: sum(v) / len(v) for t, v in by_thr.items()}
        modes = {}
        for r in mine:
            modes.setdefault(r["mode"], []).append(r["mean_dice"])
        entry = {
            "fixed_range": max(thr_means.values()) - min(thr_means.values()) if thr_means else None,
            "fixed_range_by_seed": {str(s): max(v) - min(v) for s, v in sorted(by_seed.items())},
            "fixed_mean_by_threshold": {repr(t): m for t, m in sorted(thr_means.items())},
            "mode_means": {m: sum(v) / len(v) for m, v in modes.items()},
            "encore_mean": (sum(modes["encore"]) / len(modes["encore"])) if "encore" in modes else None,
        }
        summary[repr(float(fraction))] = entry
    return summary


def write_sweep_csv(path, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(SWEEP_HEADER)
        for r in rows:
            if "mean_dice" not in r:
                continue
            thr = "" if r["threshold"] is None else repr(float(r["threshold"]))
            writer.writerow([repr(float(r["fraction"])), r["mode"], thr, r["seed"], repr(r["mean_dice"])])


def run_sweep(matrix: ExperimentMatrix, data, out_root, jobs: int = 1) -> tuple:
    """Run every cell not already completed under ``out_root``; returns (rows, summary)."""
    out = Path(out_root)
    out.mkdir(parents=True, exist_ok=True)
    cells = matrix.cells()
    done = {c: _completed(out, c) for c in cells}
    todo = [c for c in cells if done[c] is None]
    log.info("sweep: %d cells, %d already complete", len(cells), len(cells) - len(todo))
    if jobs > 1 and len(todo) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = {c: pool.submit(run_cell, c, data, matrix.config, out) for c in todo}
            for c, fut in futures.items():
                done[c] = fut.result()
    else:
        for c in todo:
            done[c] = run_cell(c, data, matrix.config, out)
    rows = [done[c] for c in cells]
    write_sweep_csv(out / "sweep.csv", rows)
    summary = summarize(rows)
    failed = [{"cell": cell_name(c), "error": done[c]["error"]} for c in cells if "error" in done[c]]
    (out / "summary.json").write_text(
        json.dumps({"fractions": summary, "failed": failed}, indent=2) + "\n"
    )
    return rows, summary


def cmd_sweep(args) -> int:
    matrix = ExperimentMatrix.from_dict(_load_json(args.matrix, "matrix"))
    if args.data:
        data = str(_require_data(args.data))
    elif matrix.data is not None:
        data = matrix.data
    else:
        raise UsageError("sweep needs --data or a 'data' entry in the matrix")
    if args.jobs < 1:
        raise UsageError(f"--jobs must be >= 1, got {args.jobs}")
    rows, summary = run_sweep(matrix, data, args.out, args.jobs)
    failed = sum("error" in r for r in rows)
    for frac, entry in summary.items():
        rng = entry["fixed_range"]
        enc = entry["encore_mean"]
        print(
            f"fraction {frac}: fixed range "
            f"{'n/a' if rng is None else f'{rng:.4f}'}, encore mean "
            f"{'n/a' if enc is None else f'{enc:.4f}'}"
        )
    print(f"{len(rows) - failed}/{len(rows)} cells succeeded; results in {Path(args.out) / 'sweep.csv'}")
    return 2 if failed else 0


# ---------------------------------------------------------------------------
# report

class ReportError(ValueError):
    pass


def check_csv(path, header) -> list:
    """Parse a CSV written by this package; raise ReportError on schema drift."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            got = tuple(next(reader))
        except StopIteration:
            raise ReportError(f"{path}: empty file") from None
        if got != tuple(header):
            raise ReportError(f"{path}: header {list(got)} != expected {list(header)}")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise ReportError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            rows.append(dict(zip(header, row)))
    return rows


def check_sweep(path) -> list:
    rows = check_csv(path, SWEEP_HEADER)
    for i, r in enumerate(rows, start=2):
        try:
            r["fraction"] = float(r["fraction"])
            r["threshold"] = float(r["threshold"]) if r["threshold"] else None
            r["seed"] = int(r["seed"])
            r["mean_dice"] = float(r["mean_dice"])
        except ValueError as exc:
            raise ReportError(f"{path}:{i}: {exc}") from None
        if r["mode"] not in MODES:
            raise ReportError(f"{path}:{i}: unknown mode {r['mode']!r}")
        if (r["mode"] == "fixed") != (r["threshold"] is not None):
            raise ReportError(f"{path}:{i}: threshold must be set exactly for fixed rows")
    return rows


def cmd_report(args) -> int:
    path = Path(args.path)
    if path.is_dir():
        if (path / "sweep.csv").is_file():
            path = path / "sweep.csv"
        elif (path / "metrics.csv").is_file():
            path = path / "metrics.csv"
        else:
            raise FileNotFoundError(f"{path} contains neither sweep.csv nor metrics.csv")
    if not path.is_file():
        raise FileNotFoundError(f"no such file: {path}")
    if path.name == "metrics.csv" or tuple(path.read_text().split("\n", 1)[0].split(",")) == METRICS_HEADER:
        rows = check_csv(path, METRICS_HEADER)
        phases = {}
        for r in rows:
            phases[r["phase"]] = phases.get(r["phase"], 0) + 1
        print(f"{path}: {len(rows)} iterations " + ", ".join(f"{k}={v}" for k, v in phases.items()))
        return 0
    rows = check_sweep(path)
    groups = {}
    for r in rows:
        key = (r["fraction"], r["mode"], r["threshold"])
        groups.setdefault(key, []).append(r["mean_dice"])
    print(f"{'fraction':>9} {'mode':>10} {'threshold':>9} {'seeds':>5} {'mean_dice':>9}")
    for (frac, mode, thr), vals in sorted(groups.items(), key=lambda kv: (-kv[0][0], kv[0][1], kv[0][2] or 0)):
        thr_s = "-" if thr is None else f"{thr:g}"
        print(f"{frac:>9.5g} {mode:>10} {thr_s:>9} {len(vals):>5} {sum(vals) / len(vals):>9.4f}")
    return 0


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="encore", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", help="write a synthetic dataset (PGM pairs + manifest)")
    g.add_argument("--spec", help="scene spec as a JSON file or inline object (default scene if omitted)")
    g.add_argument("--count", type=int, required=True, help="number of training scenes")
    g.add_argument("--test-count", type=int, default=0, help="held-out scenes appended after training")
    g.add_argument("--fraction", type=float, default=1 / 8, help="labeled fraction (1/2 .. 1/32)")
    g.add_argument("--split-seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="run one training job")
    t.add_argument("--config", help="training config as a JSON file or inline object")
    t.add_argument("--data", required=True, help="dataset directory containing manifest.json")
    t.add_argument("--out", required=True, help="run directory")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sweep", help="run an experiment matrix")
    s.add_argument("--matrix", required=True, help="matrix as a JSON file or inline object")
    s.add_argument("--data", help="dataset directory; overrides the matrix 'data' entry")
    s.add_argument("--out", required=True)
    s.add_argument("--jobs", type=int, default=1)
    s.set_defaults(func=cmd_sweep)

    r = sub.add_parser("report", help="check and summarize sweep.csv or metrics.csv")
    r.add_argument("path", help="CSV file or a sweep/run directory")
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        _setup_logging()
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"encore {args.command}: {exc}", file=sys.stderr)
        return 1
    except ReportError as exc:
        print(f"encore {args.command}: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:
        print(f"encore {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        log.debug("%s", traceback.format_exc())
        return 2


if __name__ == "__main__":
    sys.exit(main())
