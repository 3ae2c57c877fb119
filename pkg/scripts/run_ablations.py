#!/usr/bin/env python3
"""Ablation sweep on arm3-fast: the full model against no-pid / no-ccl /
no-tcl variants, median held-out metrics over seeds.

    python3 scripts/run_ablations.py --out runs/ablate [--iters 1200] [--seeds 3]
"""

import argparse
import csv
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

import numpy as np

from artinerf.cli import main as cli

REPO = Path(__file__).resolve().parents[1]
VARIANTS = ["full", "no-pid", "no-ccl", "no-tcl"]


def run(argv):
    print("+ artinerf " + " ".join(argv), flush=True)
    rc = cli(argv)
    if rc != 0:
        sys.exit(rc)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="runs/ablate")
    ap.add_argument("--iters", type=int, default=1200)
    ap.add_argument("--seeds", type=int, default=3)
    args = ap.parse_args()
    out = Path(args.out)
    data = out / "data"
    cfg = str(REPO / "configs" / "arm3-desk.cfg")
    if not (data / "manifest.json").exists():
        run(["synth", "--spec", "arm3-fast", "--out", str(data), "--force"])
    table = {}
    for variant in VARIANTS:
        psnrs = []
        for seed in range(args.seeds):
            tag = f"{variant}-s{seed}"
            run_dir = out / tag
            extra = [] if variant == "full" else \
                ["--set", f"train.ablate={variant}"]
            run(["train", "--config", cfg, "--data", str(data),
                 "--out", str(run_dir), "--iters", str(args.iters),
                 "--seed", str(seed), "--quiet"] + extra)
            mcsv = out / f"{tag}.csv"
            run(["eval", "--config", cfg, "--checkpoint",
                 str(run_dir / "final.ckpt"), "--data", str(data),
                 "--holdout", "3,9,15", "--out", str(mcsv)] + extra
                + ([] if variant == "full" else ["--ablate", variant]))
            with open(mcsv) as f:
                mean_row = list(csv.reader(f))[-1]
            psnrs.append(float(mean_row[1]))
        table[variant] = float(np.median(psnrs))
    print("\nmedian held-out PSNR per variant:")
    for variant, v in table.items():
        print(f"  {variant:8s} {v:6.2f}")


if __name__ == "__main__":
    main()
