#!/usr/bin/env python3
"""End-to-end desk experiment on the bundled arm3 scene: synthesize the
dataset, train, evaluate held-out frames, and render an orbit around the
canonical pose.

    python3 scripts/run_arm3.py --out runs/arm3 [--iters 3000] [--seed 0]
"""

import argparse
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from artinerf.cli import main as cli

REPO = Path(__file__).resolve().parents[1]


def run(argv):
    print("+ artinerf " + " ".join(argv), flush=True)
    rc = cli(argv)
    if rc != 0:
        sys.exit(rc)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="runs/arm3")
    ap.add_argument("--iters", type=int, default=3000)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--scene", default="arm3")
    ap.add_argument("--sparse", type=float, default=1.0)
    args = ap.parse_args()
    out = Path(args.out)
    data = out / "data"
    cfg = str(REPO / "configs" / "arm3-desk.cfg")
    if not (data / "manifest.json").exists():
        run(["synth", "--spec", args.scene, "--out", str(data), "--force"])
    run(["train", "--config", cfg, "--data", str(data),
         "--out", str(out / "run"), "--iters", str(args.iters),
         "--seed", str(args.seed), "--sparse", str(args.sparse)])
    run(["eval", "--config", cfg, "--checkpoint", str(out / "run" / "final.ckpt"),
         "--data", str(data), "--holdout", "3,9,15",
         "--out", str(out / "metrics.csv")])
    run(["render", "--config", cfg, "--checkpoint",
         str(out / "run" / "final.ckpt"), "--data", str(data),
         "--out", str(out / "orbit"), "--time", "10",
         "--orbit", "2.8,12,8", "--force"])
    print(f"done; metrics in {out / 'metrics.csv'}, orbit renders in "
          f"{out / 'orbit'}")


if __name__ == "__main__":
    main()
