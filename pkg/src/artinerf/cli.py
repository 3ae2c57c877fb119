"""Command-line entry point: dataset synthesis, training, free-viewpoint
rendering, evaluation, and gradient verification.

Exit codes: 0 success, 1 usage error, 2 runtime/numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from .config import RunConfig
from .data import MetricsRow, load_dataset, save_dataset, sparsify
from .diffcore.tensor import ContractError, NumericError
from .model import build_model_for_dataset
from .pipeline import FrameInputs, RenderOptions, render_image
from .render import look_at_camera
from .skeleton import Pose
from .synthetic import generate_synthetic_sequence, resolve_scene_spec
from .trainer import evaluate, load_checkpoint, train


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _add_config_args(p: _Parser):
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a single config key (repeatable)")


def _load_config(args) -> RunConfig:
    cfg = RunConfig()
    if getattr(args, "config", None):
        cfg.load_file(args.config)
    for item in getattr(args, "set", []):
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        cfg.set_key(k.strip(), v.strip())
    return cfg


def _out_dir(path, force: bool) -> Path:
    out = Path(path)
    if out.exists() and any(out.iterdir()) and not force:
        raise UsageError(f"output directory {out} is not empty (use --force)")
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    spec = resolve_scene_spec(args.spec)
    out = _out_dir(args.out, args.force)
    ds = generate_synthetic_sequence(spec, oracle_samples=args.oracle_samples)
    save_dataset(ds, out)
    print(f"wrote {ds.frame_count} frames to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args)
    if args.iters is not None:
        cfg.train.iters = args.iters
    if args.seed is not None:
        cfg.train.seed = args.seed
    if args.sparse is not None:
        cfg.train.sparse = args.sparse
    data_dir = args.data or cfg.data_path
    if not data_dir:
        raise UsageError("no dataset: pass --data or set data.path")
    ds = load_dataset(data_dir)
    if cfg.train.sparse < 1.0:
        ds = sparsify(ds, cfg.train.sparse)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    state = train(ds, cfg, out, resume=args.resume, quiet=args.quiet)
    print(f"finished at iteration {state.iteration}; checkpoints in {out}")
    return 0


def _orbit_cameras(ds, radius, elevation_deg, count):
    center = (ds.bbox_min + ds.bbox_max) / 2.0
    diag = float(np.linalg.norm(ds.bbox_max - ds.bbox_min))
    ref = ds.cameras[0]
    phi = np.deg2rad(elevation_deg)
    cams = []
    for i in range(count):
        theta = 2.0 * np.pi * i / count
        eye = center + radius * np.array([np.cos(theta) * np.cos(phi),
                                          np.sin(theta) * np.cos(phi),
                                          np.sin(phi)])
        near = max(0.05, radius - diag)
        cams.append(look_at_camera(eye, center, (0, 0, 1), ref.fx, ref.width,
                                   ref.height, near, radius + diag))
    return cams


def _interpolated_pose(ds, tf: float) -> Pose:
    lo = int(np.floor(tf))
    hi = min(lo + 1, ds.frame_count - 1)
    frac = tf - lo
    a, b = ds.poses[lo], ds.poses[hi]
    return Pose(a.joints * (1 - frac) + b.joints * frac,
                a.omega * (1 - frac) + b.omega * frac,
                a.global_rotation, a.global_translation)


def cmd_render(args) -> int:
    cfg = _load_config(args)
    ds = load_dataset(args.data)
    if not 0 <= args.time <= ds.frame_count - 1:
        raise UsageError(f"time {args.time} outside the observed range "
                         f"[0, {ds.frame_count - 1}]; poses beyond the captured "
                         f"motion are unsupported")
    model = build_model_for_dataset(ds, cfg.model, seed=cfg.train.seed)
    load_checkpoint(model, cfg.train, args.checkpoint)
    out = _out_dir(args.out, args.force)
    if args.cameras:
        with open(args.cameras) as f:
            from .render import Camera
            cams = [Camera.from_dict(d) for d in json.load(f)]
    else:
        radius, elev, count = (float(x) for x in args.orbit.split(","))
        cams = _orbit_cameras(ds, radius, elev, int(count))
    pose = _interpolated_pose(ds, args.time)
    opts = RenderOptions(samples=cfg.render.samples)
    for i, cam in enumerate(cams):
        fi = FrameInputs(t=args.time, pose=pose, camera=cam)
        rgb, cov, mask = render_image(model, None, fi, cfg.render.patch, opts)
        Image.fromarray((np.clip(rgb, 0, 1) * 255).round().astype(np.uint8)) \
            .save(out / f"view_{i:03d}.png")
        Image.fromarray((np.clip(mask, 0, 1) * 255).round().astype(np.uint8)) \
            .save(out / f"mask_{i:03d}.png")
        with open(out / f"view_{i:03d}.json", "w") as f:
            json.dump({"camera": cam.to_dict(), "time": args.time,
                       "seed": cfg.train.seed, "checkpoint": str(args.checkpoint)},
                      f, indent=1)
    print(f"rendered {len(cams)} views to {out}")
    return 0


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    if args.ablate:
        cfg.train.ablate = args.ablate
    ds = load_dataset(args.data)
    holdout = [int(x) for x in args.holdout.split(",") if x.strip() != ""]
    if not holdout:
        raise UsageError("empty holdout list")
    for f in holdout:
        if not 0 <= f < ds.frame_count:
            raise UsageError(f"holdout frame {f} outside the dataset")
    model = build_model_for_dataset(ds, cfg.model, seed=cfg.train.seed)
    load_checkpoint(model, cfg.train, args.checkpoint)
    ablate = cfg.train.ablations()
    opts = RenderOptions(
        samples=cfg.render.samples,
        nonrigid_scale=1.0 if cfg.train.enable_nonrigid else 0.0,
        temporal_scale=0.0 if ("no-pid" in ablate or not cfg.train.enable_temporal)
        else 1.0,
        refine_scale=0.0 if ("no-refine" in ablate or not cfg.train.enable_refine)
        else 1.0)
    rows, mean = evaluate(model, ds, holdout, cfg.render.patch,
                          cfg.render.samples, opts=opts)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["view", "psnr", "ssim"])
        for r in rows + [mean]:
            w.writerow([r.view_id, f"{r.psnr:.4f}", f"{r.ssim:.6f}"])
    print(f"mean psnr {mean.psnr:.2f}  ssim {mean.ssim:.4f} -> {out}")
    return 0


def cmd_gradcheck(args) -> int:
    from .verification import run_all_gradchecks
    failures = []

    def progress(name, err):
        status = "ok" if err <= args.tol else "FAIL"
        print(f"  {name:24s} max rel err {err:.3e}  {status}", flush=True)

    ok, results = run_all_gradchecks(seeds=range(args.seeds), tol=args.tol,
                                     progress=progress)
    if not ok:
        failures = [n for n, e in results.items() if e > args.tol]
        print(f"gradient check FAILED for: {', '.join(failures)}")
        return 2
    print(f"gradient check passed: {len(results)} ops, "
          f"worst rel err {max(results.values()):.3e}")
    return 0


def main(argv=None) -> int:
    cfg_help = RunConfig().describe()
    parser = _Parser(prog="artinerf",
                     description="Articulated-subject radiance fields from "
                                 "monocular sequences")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset",
                       epilog=cfg_help,
                       formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--spec", required=True,
                   help="scene spec JSON path or bundled name (arm3, arm3-fast)")
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true",
                   help="write into a non-empty directory")
    p.add_argument("--oracle-samples", type=int, default=512)
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("train", help="train a model on a dataset",
                       epilog=cfg_help,
                       formatter_class=argparse.RawDescriptionHelpFormatter)
    _add_config_args(p)
    p.add_argument("--data", help="dataset directory")
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--iters", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--sparse", type=float,
                   help="resample the dataset to this fraction before training")
    p.add_argument("--resume", action="store_true")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("render", help="free-viewpoint rendering from a checkpoint",
                       epilog=cfg_help,
                       formatter_class=argparse.RawDescriptionHelpFormatter)
    _add_config_args(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--time", type=float, default=0.0,
                   help="frame position; fractional values interpolate")
    p.add_argument("--orbit", default="2.8,12,8",
                   help="radius,elevation_deg,views")
    p.add_argument("--cameras", help="JSON list of explicit cameras")
    p.add_argument("--force", action="store_true")
    p.set_defaults(fn=cmd_render)

    p = sub.add_parser("eval", help="held-out metrics for a checkpoint",
                       epilog=cfg_help,
                       formatter_class=argparse.RawDescriptionHelpFormatter)
    _add_config_args(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--holdout", required=True, help="comma-separated frames")
    p.add_argument("--out", required=True, help="metrics CSV path")
    p.add_argument("--ablate", help="no-pid,no-ccl,no-tcl,no-refine,no-seg")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference verification of "
                                         "every registered op")
    p.add_argument("--seeds", type=int, default=10)
    p.add_argument("--tol", type=float, default=1e-3)
    p.set_defaults(fn=cmd_gradcheck)

    try:
        args = parser.parse_args(argv)
        return args.fn(args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    except ContractError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    except (NumericError, ArithmeticError) as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # runtime failures map to exit code 2
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
