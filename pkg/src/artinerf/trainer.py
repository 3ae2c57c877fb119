"""Training loop: delayed modular optimization, per-step loss assembly,
checkpointing with exact resume, and evaluation."""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import RunConfig, TrainConfig
from .data import MetricsRow, SequenceDataset, psnr, ssim
from .deform import regularize_temporal_vectors
from .diffcore import tensor as T
from .diffcore.adam import AdamState, adam_update
from .diffcore.checkpoint import read_blocks, write_blocks
from .diffcore.params import forward_backward
from .diffcore.tensor import NumericError, const
from .losses import (LOG_COLUMNS, assemble_losses, bce_dice_loss, cyclic_loss,
                     make_perceptual, mse_loss, perceptual_loss, tcl)
from .model import (DELAYED_PREFIXES, MASK_PARAM, Model, build_model_for_dataset)
from .pipeline import (FixedUniform, FrameInputs, RenderOptions, render_image,
                       render_patches)
from .render import clamp_mask_threshold, sample_patches
from .skeleton import generate_weight_volume


# ---------------------------------------------------------------------------
# delayed modular optimization
# ---------------------------------------------------------------------------

def delayed_unfreeze(cfg: TrainConfig, iteration: int):
    """Parameter-name prefixes that stay frozen at this iteration."""
    t_nr, t_s, t_rf = cfg.resolve_unfreeze()
    frozen = set()
    if iteration < t_nr:
        frozen.add(DELAYED_PREFIXES["nonrigid"])
    if iteration < t_s:
        frozen.add(DELAYED_PREFIXES["segmentation"])
    if iteration < t_rf:
        frozen.add(DELAYED_PREFIXES["refinement"])
    return frozen


def _ramp(iteration: int, start: int, total: int) -> float:
    """0 before `start`, then a linear ramp over 10% of the remaining run."""
    if start <= 0:
        return 1.0
    if iteration < start:
        return 0.0
    span = max(1, round(0.1 * (total - start)))
    return float(min(1.0, (iteration - start + 1) / span))


def schedule_scales(cfg: TrainConfig, iteration: int) -> dict:
    t_nr, t_s, t_rf = cfg.resolve_unfreeze()
    return {"nonrigid": _ramp(iteration, t_nr, cfg.iters),
            "seg": _ramp(iteration, t_s, cfg.iters),
            "refine": _ramp(iteration, t_rf, cfg.iters)}


# ---------------------------------------------------------------------------
# training state
# ---------------------------------------------------------------------------

@dataclass
class TrainState:
    model: Model
    adam: AdamState
    rng: np.random.Generator
    iteration: int = 0
    best_psnr: float = -1.0
    best_iter: int = -1


def init_state(model: Model, cfg: TrainConfig) -> TrainState:
    return TrainState(model=model, adam=AdamState(lr=cfg.lr),
                      rng=np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x5EED])))


def _window_frames(t: int, half: int, total: int):
    """Consecutive frame window around t, shifted to stay inside the sequence."""
    size = min(2 * half + 1, total)
    start = min(max(t - half, 0), total - size)
    frames = list(range(start, start + size))
    return frames, frames.index(t) - (size - 1) // 2


def _effective_config(cfg: RunConfig):
    """Fold the ablation flags into branch switches and loss weights."""
    ablate = cfg.train.ablations()
    weights = cfg.loss.weights()
    temporal_on = cfg.train.enable_temporal and "no-pid" not in ablate
    nonrigid_on = cfg.train.enable_nonrigid
    refine_on = cfg.train.enable_refine and "no-refine" not in ablate
    if "no-ccl" in ablate:
        weights["ccl"] = 0.0
    if "no-tcl" in ablate:
        weights["tcl_rend"] = 0.0
        weights["tcl_deform"] = 0.0
    if "no-seg" in ablate:
        weights["seg"] = 0.0
    if not temporal_on:
        weights["tcl_deform"] = 0.0
        weights["vreg"] = 0.0
    return weights, nonrigid_on, temporal_on, refine_on


@dataclass
class StepDraws:
    """Random choices for one step, pre-drawn so the loss closure is pure."""
    frame: int
    origins: list
    u_win: np.ndarray
    u_main: np.ndarray | None
    ccl_seed: int


def draw_step(state: TrainState, ds: SequenceDataset, cfg: RunConfig) -> StepDraws:
    """Consume the state RNG in a fixed order: frame, patches, window jitter,
    main-batch jitter, cyclic-sample seed."""
    tc, rc = cfg.train, cfg.render
    holdout = set(tc.holdout_frames())
    train_frames = [i for i in range(ds.frame_count) if i not in holdout]
    w_img, h_img = ds.image_size
    t = train_frames[int(state.rng.integers(len(train_frames)))]
    origins = sample_patches(w_img, h_img, ds.masks[t], rc.patch,
                             rc.patches_per_step, state.rng)
    u_win = state.rng.uniform(size=(rc.patch * rc.patch, rc.samples))
    n_extra = (len(origins) - 1) * rc.patch * rc.patch
    u_main = state.rng.uniform(size=(n_extra, rc.samples)) if n_extra else None
    ccl_seed = int(state.rng.integers(2 ** 31))
    return StepDraws(t, origins, u_win, u_main, ccl_seed)


def build_step_loss(model: Model, ds: SequenceDataset, cfg: RunConfig,
                    perceptual, draws: StepDraws, iteration: int):
    """The full per-step loss as a pure closure over pre-drawn randomness.
    Returns (build_fn, breakdown holder dict)."""
    tc, rc, lc = cfg.train, cfg.render, cfg.loss
    store = model.store
    scales = schedule_scales(tc, iteration)
    weights, nonrigid_on, temporal_on, refine_on = _effective_config(cfg)
    weights = dict(weights)
    weights["seg"] = weights["seg"] * scales["seg"]
    opts = RenderOptions(
        samples=rc.samples,
        nonrigid_scale=scales["nonrigid"] if nonrigid_on else 0.0,
        temporal_scale=1.0 if temporal_on else 0.0,
        refine_scale=scales["refine"] if refine_on else 0.0)
    patch = rc.patch
    depth = rc.samples
    t = draws.frame
    origins = draws.origins
    u_win, u_main, ccl_seed = draws.u_win, draws.u_main, draws.ccl_seed
    half = lc.tcl_half_window if (weights["tcl_rend"] > 0 or weights["tcl_deform"] > 0) \
        else 0
    half = min(half, (ds.frame_count - 1) // 2)
    window, query_coord = _window_frames(t, half, ds.frame_count) if half > 0 \
        else ([t], 0)
    breakdown_holder = {}

    def build(params):
        volume = generate_weight_volume(store, model.volume_gen)
        win_res = {}
        for f in window:
            win_res[f] = render_patches(model, volume, FrameInputs.from_dataset(ds, f),
                                        [origins[0]], patch, opts,
                                        FixedUniform(u_win))
        frame_sets = [win_res[t]]
        if u_main is not None:
            frame_sets.append(render_patches(model, volume,
                                             FrameInputs.from_dataset(ds, t),
                                             origins[1:], patch, opts,
                                             FixedUniform(u_main)))
        terms = {}
        # reconstruction + segmentation over every patch of the current frame
        # (terms whose weight is zero this step are not built at all)
        mse_terms, perc_terms, seg_terms = [], [], []
        for res in frame_sets:
            for (u0, v0), refined, mask_p in zip(res.origins, res.refined_patches,
                                                 res.mask_patches):
                gt = const(ds.frames[t][v0:v0 + patch, u0:u0 + patch])
                if weights["mse"] > 0:
                    mse_terms.append(mse_loss(refined, gt))
                if weights["perceptual"] > 0:
                    perc_terms.append(perceptual_loss(refined, gt, perceptual))
                if weights["seg"] > 0:
                    gt_mask = const(ds.masks[t][v0:v0 + patch, u0:u0 + patch]
                                    .astype(np.float32))
                    seg_terms.append(bce_dice_loss(mask_p, gt_mask))
        terms["mse"] = _mean_terms(mse_terms)
        terms["perceptual"] = _mean_terms(perc_terms)
        terms["seg"] = _mean_terms(seg_terms)
        # cyclic consistency over the frame's active samples
        xo = np.concatenate([r.rays.x_obs_active for r in frame_sets], axis=0)
        xh = [r.rays.x_hat_obs_active for r in frame_sets
              if r.rays.x_hat_obs_active is not None]
        if len(xo) and xh:
            if weights["ccl"] > 0:
                xh_cat = T.concat(xh, axis=0)
                xo_sub = xo
                if len(xo) > lc.ccl_samples:
                    pick = np.sort(np.random.default_rng(ccl_seed)
                                   .choice(len(xo), size=lc.ccl_samples,
                                           replace=False))
                    xh_cat = T.take_rows(xh_cat, pick)
                    xo_sub = xo[pick]
                terms["ccl"] = cyclic_loss(xh_cat, const(xo_sub))
            # the canonical frame observes the canonical configuration directly
            if t == model.t_c and weights["can_mse"] > 0:
                xc = [r.rays.x_hat_can_active for r in frame_sets
                      if r.rays.x_hat_can_active is not None]
                terms["can_mse"] = mse_loss(T.concat(xc, axis=0), const(xo))
        if weights["tcl_rend"] > 0 and len(window) >= 2:
            items = [T.reshape(win_res[f].refined_patches[0], (-1,))
                     for f in window]
            terms["tcl_rend"] = tcl(items[window.index(t)], items, query_coord,
                                    lc.tcl_lambda, lc.tcl_eps_sigma).loss
        if weights["tcl_deform"] > 0 and len(window) >= 2:
            flats = []
            for f in window:
                d = win_res[f].rays.delta_t_flat
                flats.append(T.reshape(d, (-1,)) if d is not None else
                             const(np.zeros(patch * patch * depth * 3,
                                            dtype=np.float32)))
            terms["tcl_deform"] = tcl(flats[window.index(t)], flats, query_coord,
                                      lc.tcl_lambda, lc.tcl_eps_sigma).loss
        if temporal_on:
            terms["vreg"] = regularize_temporal_vectors(store, model.table,
                                                        lc.vreg_weight)
        total, breakdown = assemble_losses(terms, weights)
        breakdown_holder.update(breakdown)
        return total

    return build, breakdown_holder


def train_step(state: TrainState, ds: SequenceDataset, cfg: RunConfig,
               perceptual) -> dict:
    """One optimization step; reproducible bit for bit given the state RNG."""
    model, it = state.model, state.iteration
    store = model.store
    store.set_frozen(delayed_unfreeze(cfg.train, it))
    draws = draw_step(state, ds, cfg)
    build, breakdown_holder = build_step_loss(model, ds, cfg, perceptual, draws, it)
    loss_val, grads = forward_backward(build, store, check_finite=False)
    _check_terms(loss_val, breakdown_holder)
    adam_update(store, grads, state.adam)
    clamp_mask_threshold(store, MASK_PARAM)
    state.iteration += 1
    breakdown_holder["total"] = loss_val
    breakdown_holder["b_value"] = float(store[MASK_PARAM].value[0])
    return breakdown_holder


def _mean_terms(terms):
    if not terms:
        return None
    total = terms[0]
    for t in terms[1:]:
        total = T.add(total, t)
    return T.mul(total, const(np.float32(1.0 / len(terms))))


def _check_terms(total, breakdown):
    if np.isfinite(total) and all(np.isfinite(v) for v in breakdown.values()):
        return
    for name, v in breakdown.items():
        if not np.isfinite(v):
            raise NumericError(f"non-finite loss term '{name}'")
    raise NumericError("non-finite total loss")


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def evaluate(model: Model, ds: SequenceDataset, holdout, patch: int,
             samples: int, opts: RenderOptions | None = None):
    """Render held-out frames fully and score them against ground truth."""
    if opts is None:
        opts = RenderOptions(samples=samples)
    else:
        opts.samples = samples
    rows = []
    for f in holdout:
        rgb, _cov, _mask = render_image(model, None, FrameInputs.from_dataset(ds, f),
                                        patch, opts)
        rows.append(MetricsRow(view_id=f, psnr=psnr(rgb, ds.frames[f]),
                               ssim=ssim(rgb, ds.frames[f])))
    mean = MetricsRow(view_id="mean",
                      psnr=float(np.mean([r.psnr for r in rows])) if rows else 0.0,
                      ssim=float(np.mean([r.ssim for r in rows])) if rows else 0.0)
    return rows, mean


# ---------------------------------------------------------------------------
# checkpointing (bitwise-resumable)
# ---------------------------------------------------------------------------

def _encode_rng(rng: np.random.Generator) -> np.ndarray:
    st = rng.bit_generator.state
    raw = (int(st["state"]["state"]).to_bytes(16, "little")
           + int(st["state"]["inc"]).to_bytes(16, "little")
           + bytes([int(st["has_uint32"])])
           + int(st["uinteger"]).to_bytes(4, "little"))
    return np.frombuffer(raw, dtype=np.uint8).astype(np.float32)


def _decode_rng(arr: np.ndarray) -> np.random.Generator:
    raw = bytes(arr.astype(np.uint8).tolist())
    gen = np.random.default_rng(0)
    gen.bit_generator.state = {
        "bit_generator": "PCG64",
        "state": {"state": int.from_bytes(raw[0:16], "little"),
                  "inc": int.from_bytes(raw[16:32], "little")},
        "has_uint32": raw[32],
        "uinteger": int.from_bytes(raw[33:37], "little"),
    }
    return gen


def save_checkpoint(state: TrainState, path) -> None:
    blocks = {}
    for p in state.model.store:
        blocks[p.name] = p.value
    blocks["optim/step"] = np.array([state.adam.step], dtype=np.float32)
    for name, m in state.adam.m.items():
        blocks[f"optim/m/{name}"] = m
        blocks[f"optim/v/{name}"] = state.adam.v[name]
    blocks["trainer/iteration"] = np.array([state.iteration], dtype=np.float32)
    blocks["trainer/best"] = np.array([state.best_psnr, state.best_iter],
                                      dtype=np.float32)
    blocks["rng/pcg64"] = _encode_rng(state.rng)
    write_blocks(path, blocks)


def load_checkpoint(model: Model, cfg: TrainConfig, path) -> TrainState:
    blocks = read_blocks(path)
    state = init_state(model, cfg)
    for p in model.store:
        if p.name not in blocks:
            raise KeyError(f"checkpoint missing parameter block {p.name}")
        if blocks[p.name].shape != p.value.shape:
            raise ValueError(f"checkpoint block {p.name} has shape "
                             f"{blocks[p.name].shape}, model expects {p.value.shape}")
        p.value = blocks[p.name]
    state.adam.step = int(blocks["optim/step"][0])
    for name in model.store.names():
        if f"optim/m/{name}" in blocks:
            state.adam.m[name] = blocks[f"optim/m/{name}"].copy()
            state.adam.v[name] = blocks[f"optim/v/{name}"].copy()
    state.iteration = int(blocks["trainer/iteration"][0])
    state.best_psnr = float(blocks["trainer/best"][0])
    state.best_iter = int(blocks["trainer/best"][1])
    state.rng = _decode_rng(blocks["rng/pcg64"])
    return state


# ---------------------------------------------------------------------------
# full loop
# ---------------------------------------------------------------------------

def train(ds: SequenceDataset, cfg: RunConfig, out_dir, resume: bool = False,
          quiet: bool = False) -> TrainState:
    """Train a fresh (or resumed) model on the dataset; writes log.csv and
    periodic checkpoints under out_dir and returns the final state."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    model = build_model_for_dataset(ds, cfg.model, seed=cfg.train.seed)
    log_path = out_dir / "log.csv"
    last_ckpt = out_dir / "last.ckpt"
    if resume:
        if not last_ckpt.exists():
            raise FileNotFoundError(f"no checkpoint to resume from at {last_ckpt}")
        state = load_checkpoint(model, cfg.train, last_ckpt)
        log_f = open(log_path, "a", newline="")
        writer = csv.writer(log_f)
    else:
        state = init_state(model, cfg.train)
        log_f = open(log_path, "w", newline="")
        writer = csv.writer(log_f)
        writer.writerow(LOG_COLUMNS)
    perceptual = make_perceptual(cfg.loss.perceptual_plugin, seed=cfg.train.seed)
    holdout = cfg.train.holdout_frames()
    started = time.time()
    try:
        while state.iteration < cfg.train.iters:
            breakdown = train_step(state, ds, cfg, perceptual)
            writer.writerow([state.iteration - 1]
                            + [f"{breakdown.get(c, 0.0):.6g}"
                               for c in LOG_COLUMNS[1:]])
            it = state.iteration
            if cfg.train.checkpoint_interval and \
                    it % cfg.train.checkpoint_interval == 0:
                save_checkpoint(state, out_dir / f"ckpt_{it:06d}.ckpt")
                save_checkpoint(state, last_ckpt)
            if holdout and cfg.train.eval_interval and \
                    it % cfg.train.eval_interval == 0 and it < cfg.train.iters:
                _run_eval(state, ds, cfg, holdout, quiet, started)
    finally:
        log_f.close()
    save_checkpoint(state, last_ckpt)
    save_checkpoint(state, out_dir / "final.ckpt")
    if holdout:
        _run_eval(state, ds, cfg, holdout, quiet, started)
    return state


def _run_eval(state, ds, cfg, holdout, quiet, started):
    rows, mean = evaluate(state.model, ds, holdout, cfg.render.patch,
                          cfg.render.samples)
    if mean.psnr > state.best_psnr:
        state.best_psnr = mean.psnr
        state.best_iter = state.iteration
    if not quiet:
        print(f"iter {state.iteration:6d}  psnr {mean.psnr:6.2f}  "
              f"ssim {mean.ssim:.4f}  elapsed {time.time() - started:6.1f}s",
              flush=True)
    return rows, mean
