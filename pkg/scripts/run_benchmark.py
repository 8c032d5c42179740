"""Run the threshold-sensitivity sweep and the 1/32 ablation from benchmark.json.

    python scripts/run_benchmark.py --out runs/benchmark [--jobs 2] [--only sensitivity|ablation]

Cells already finished under --out are reused, so an interrupted run resumes.
Prints the per-fraction threshold ranges and the ablation means.
"""

import argparse
import json
import logging
from pathlib import Path

import numpy as np

from encore.cli import ExperimentMatrix, run_sweep

HERE = Path(__file__).resolve().parent


def matrices(bench: dict) -> dict:
    common = {"seeds": bench["seeds"], "config": bench["config"], "data": bench["data"]}
    return {
        "sensitivity": ExperimentMatrix.from_dict(
            {**common, "fractions": bench["fractions"], "modes": ["fixed"], "thresholds": bench["thresholds"]}
        ),
        "ablation": ExperimentMatrix.from_dict(
            {**common, "fractions": [bench["ablation_fraction"]], "modes": bench["ablation_modes"]}
        ),
    }


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--bench", default=str(HERE / "benchmark.json"))
    p.add_argument("--out", default="runs/benchmark")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--only", choices=["sensitivity", "ablation"])
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    bench = json.loads(Path(args.bench).read_text())
    rows = []
    for name, matrix in matrices(bench).items():
        if args.only and name != args.only:
            continue
        got, summary = run_sweep(matrix, bench["data"], Path(args.out) / name, args.jobs)
        rows += got
        if name == "sensitivity":
            print("threshold sensitivity (Dice range across fixed thresholds, per seed):")
            for frac, entry in summary.items():
                per_seed = " ".join(f"{v:.4f}" for v in entry["fixed_range_by_seed"].values())
                print(f"  fraction {float(frac):<8g} {per_seed}")

    frac = bench["ablation_fraction"]
    ok = [r for r in rows if "mean_dice" in r and r["fraction"] == frac]
    if not ok:
        return
    print(f"mean Dice over seeds at fraction {frac:g}:")
    keys = sorted({(r["mode"], r["threshold"]) for r in ok}, key=lambda k: (k[0], k[1] or 0.0))
    for mode, thr in keys:
        vals = [r["mean_dice"] for r in ok if r["mode"] == mode and r["threshold"] == thr]
        label = mode if thr is None else f"{mode}-{thr}"
        print(f"  {label:<14} {np.mean(vals):.4f}  (n={len(vals)})")


if __name__ == "__main__":
    main()
