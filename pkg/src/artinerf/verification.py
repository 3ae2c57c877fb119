"""Composite gradient checks: module-level graphs and the end-to-end
micro-pipeline, layered on the per-primitive registry."""

from __future__ import annotations

import numpy as np

from .config import ModelConfig, RunConfig
from .deform import PositionalEncoder, positional_encode
from .diffcore import tensor as T
from .diffcore.gradcheck import (DEFAULT_EPS, DEFAULT_TOL, OP_CHECKS,
                                 gradient_check)
from .diffcore.mlp import MLPSpec, build_mlp_params, mlp_forward
from .diffcore.params import ParamStore
from .diffcore.tensor import const
from .losses import (RandomFeaturePerceptual, bce_dice_loss, cyclic_loss,
                     make_perceptual, mse_loss, tcl)
from .model import build_model_for_dataset
from .pipeline import FrameInputs, RenderOptions, render_rays
from .render import alpha_compose, build_refinement_net, refine_patch
from .skeleton import generate_weight_volume, part_transforms_graph, rigid_deform_graph
from .synthetic import (CapsuleSpec, JointMotion, SyntheticSceneSpec,
                        generate_synthetic_sequence)
from .trainer import StepDraws, build_step_loss


def micro_scene_spec(seed: int = 3) -> SyntheticSceneSpec:
    """Two-joint articulated micro scene on an 8x8 image, three frames."""
    return SyntheticSceneSpec(
        name="micro2", seed=seed, image_size=8, frame_count=3,
        parents=[-1, 0],
        rest_offsets=[[0.0, 0.0, -0.3], [0.0, 0.0, 0.55]],
        capsules=[CapsuleSpec(0, 0.24, (0.8, 0.3, 0.3), 30.0),
                  CapsuleSpec(1, 0.2, (0.3, 0.4, 0.8), 30.0,
                              pulse_amp=0.2, pulse_freq=1.0)],
        motions=[JointMotion(1, (1.0, 0.0, 0.0), 0.5, 1.0, 0.3)],
        camera_radius=2.4, canonical_frame=1)


def micro_model_config() -> ModelConfig:
    return ModelConfig(pos_freqs=2, time_freqs=2, deform_hidden=8,
                       scene_hidden=8, grid_res=8, latent_dim=4,
                       decoder_channels="4,4,4", refine_hidden=4)


_MICRO_CACHE = {}


def micro_dataset():
    if "ds" not in _MICRO_CACHE:
        _MICRO_CACHE["ds"] = generate_synthetic_sequence(micro_scene_spec(),
                                                         oracle_samples=64)
    return _MICRO_CACHE["ds"]


def _perturb(store: ParamStore, rng, scale=0.02):
    """Move every parameter off its initialization so zero-initialized layers
    carry real gradients during the check."""
    for p in store:
        p.value = p.value + rng.normal(0.0, scale, size=p.value.shape) \
            .astype(np.float32)


# ---------------------------------------------------------------------------
# composite cases (same builder signature as the primitive registry)
# ---------------------------------------------------------------------------

def _case_mlp_skip(rng):
    ps = ParamStore()
    spec = MLPSpec(widths=(5, 6, 6, 6, 6, 3), skip_layer=3, skip_width=5)
    build_mlp_params(ps, "net", spec, rng)
    x = const(rng.standard_normal((4, 5)).astype(np.float32))
    w = const(rng.standard_normal((4, 3)).astype(np.float32))

    def build(params):
        return T.tsum(T.mul(mlp_forward(params, "net", spec, x, skip=x), w))

    return build, ps


def _case_positional_mlp(rng):
    ps = ParamStore()
    enc = PositionalEncoder(3)
    spec = MLPSpec(widths=(enc.width(3), 8, 4))
    build_mlp_params(ps, "net", spec, rng)
    ps.add("pts", rng.uniform(-0.5, 0.5, size=(5, 3)).astype(np.float32))

    def build(params):
        e = positional_encode(params.graph_tensor("pts"), enc)
        return T.tsum(mlp_forward(params, "net", spec, e))

    return build, ps


def _case_alpha_compose(rng):
    ps = ParamStore()
    ps.add("raw", rng.uniform(-1.0, 1.0, size=(3, 6)).astype(np.float32))
    ps.add("col", rng.uniform(0.2, 0.8, size=(3, 6, 3)).astype(np.float32))
    w = const(rng.standard_normal((3, 3)).astype(np.float32))

    def build(params):
        alpha = T.sigmoid(params.graph_tensor("raw"))
        rgb, cov, _ = alpha_compose(alpha, params.graph_tensor("col"))
        return T.add(T.tsum(T.mul(rgb, w)), T.tsum(cov))

    return build, ps


def _case_losses(rng):
    ps = ParamStore()
    ps.add("pred", rng.uniform(0.1, 0.9, size=(5, 5)).astype(np.float32))
    ps.add("xhat", rng.standard_normal((6, 3)).astype(np.float32))
    target = const((rng.uniform(size=(5, 5)) > 0.5).astype(np.float32))
    xobs = const(rng.standard_normal((6, 3)).astype(np.float32))

    def build(params):
        seg = bce_dice_loss(params.graph_tensor("pred"), target)
        ccl = cyclic_loss(params.graph_tensor("xhat"), xobs)
        return T.add(seg, ccl)

    return build, ps


def _case_tcl(rng):
    ps = ParamStore()
    for i in range(5):
        ps.add(f"v{i}", rng.standard_normal(7).astype(np.float32) * 0.4)

    def build(params):
        items = [params.graph_tensor(f"v{i}") for i in range(5)]
        return tcl(items[2], items, 0, lam=0.5).loss

    return build, ps


def _case_perceptual(rng):
    ps = ParamStore()
    ps.add("img", rng.uniform(0.2, 0.8, size=(8, 8, 3)).astype(np.float32))
    ref = const(rng.uniform(0.2, 0.8, size=(8, 8, 3)).astype(np.float32))
    plugin = RandomFeaturePerceptual(seed=int(rng.integers(1000)))

    def build(params):
        return plugin.loss(params.graph_tensor("img"), ref)

    return build, ps


def _case_refine(rng):
    ps = ParamStore()
    net = build_refinement_net(ps, "refine", 4, rng)
    _perturb(ps, rng, 0.05)
    rgb = const(rng.uniform(0.2, 0.8, size=(6, 6, 3)).astype(np.float32))
    cov = const(rng.uniform(0.0, 1.0, size=(6, 6)).astype(np.float32))
    w = const(rng.standard_normal((6, 6, 3)).astype(np.float32))

    def build(params):
        return T.tsum(T.mul(refine_patch(params, net, rgb, cov), w))

    return build, ps


def _case_weight_volume(rng):
    """Decoder -> prior -> softmax -> trilinear sampling -> likelihood."""
    ds = micro_dataset()
    model = build_model_for_dataset(ds, micro_model_config(),
                                    seed=int(rng.integers(10000)))
    _perturb(model.store, rng)
    pts = const((ds.bbox_min + rng.uniform(0.2, 0.8, size=(12, 3))
                 * (ds.bbox_max - ds.bbox_min)).astype(np.float32))
    pose = ds.poses[0]
    w = const(rng.standard_normal(12).astype(np.float32))

    def build(params):
        vol = generate_weight_volume(params, model.volume_gen)
        R, t = part_transforms_graph(params, "skeleton.pose_corr", 0,
                                     model.canonical_pose, pose, model.topology)
        _x_r, like, _active = rigid_deform_graph(vol, R, t, pts)
        return T.tsum(T.mul(like, w))

    return build, ps_only(model.store, ("skeleton.",))


def _case_pipeline_rays(rng):
    """Two rays end to end: skinning, deformation, scene field, compositing,
    mask threshold."""
    ds = micro_dataset()
    model = build_model_for_dataset(ds, micro_model_config(),
                                    seed=int(rng.integers(10000)))
    _perturb(model.store, rng)
    fi = FrameInputs.from_dataset(ds, 0)
    px = np.array([[3.0, 4.0], [4.0, 3.0]])
    from .render import generate_rays
    origins, dirs = generate_rays(fi.camera, px)
    opts = RenderOptions(samples=8)

    class _U:
        def uniform(self, low=0.0, high=1.0, size=None):
            return np.full(size, 0.37)

    def build(params):
        vol = generate_weight_volume(params, model.volume_gen)
        res = render_rays(model, vol, fi, origins, dirs, opts, _U())
        return T.add(T.tsum(res.rgb), T.add(T.tsum(res.coverage),
                                            T.tsum(res.mask)))

    return build, model.store


def ps_only(store: ParamStore, prefixes):
    """Restrict gradient checking to a prefix subset by marking the rest
    untrainable (they stay part of the graph)."""
    for p in store:
        p.trainable = any(p.name.startswith(pre) for pre in prefixes)
        p.tensor.requires_grad = p.trainable
    return store


def _case_full_loss(rng):
    """The complete training objective on the micro scene: every loss term
    active, every module unfrozen."""
    ds = micro_dataset()
    cfg = RunConfig()
    cfg.model = micro_model_config()
    cfg.render.patch = 2
    cfg.render.samples = 8
    cfg.render.patches_per_step = 2
    cfg.loss.tcl_half_window = 1
    cfg.loss.ccl_samples = 32
    cfg.train.iters = 10
    cfg.train.unfreeze_nonrigid = 0
    cfg.train.unfreeze_seg = 0
    cfg.train.unfreeze_refine = 0
    cfg.train.seed = int(rng.integers(10000))
    model = build_model_for_dataset(ds, cfg.model, seed=cfg.train.seed)
    _perturb(model.store, rng)
    perceptual = make_perceptual("random-features", seed=1)
    draws = StepDraws(frame=1, origins=[(2, 2), (3, 1)],
                      u_win=rng.uniform(size=(4, 8)),
                      u_main=rng.uniform(size=(4, 8)),
                      ccl_seed=int(rng.integers(2 ** 31)))
    build, _holder = build_step_loss(model, ds, cfg, perceptual, draws,
                                     iteration=9)
    return build, model.store


COMPOSITE_CHECKS = {
    "mlp_skip": _case_mlp_skip,
    "positional_mlp": _case_positional_mlp,
    "alpha_compose": _case_alpha_compose,
    "seg_cyclic_losses": _case_losses,
    "tcl_loss": _case_tcl,
    "perceptual_loss": _case_perceptual,
    "refine_net": _case_refine,
    "weight_volume": _case_weight_volume,
    "pipeline_rays": _case_pipeline_rays,
    "pipeline_full_loss": _case_full_loss,
}

# Coordinate subsampling keeps the big composite graphs within the CPU
# budget; each seed probes a different coordinate subset, so ten seeds stack
# up to a few dozen probed coordinates per tensor.
_COORD_CAPS = {
    "weight_volume": 8,
    "pipeline_rays": 3,
    "pipeline_full_loss": 2,
}


def run_all_gradchecks(seeds=range(10), eps=DEFAULT_EPS, tol=DEFAULT_TOL,
                       progress=None):
    """Primitive registry plus composite/module checks plus the end-to-end
    micro-pipeline. Returns (all passed, {op: max rel err})."""
    results, ok = {}, True
    cases = dict(OP_CHECKS)
    cases.update(COMPOSITE_CHECKS)
    for name, case in cases.items():
        worst = 0.0
        cap = _COORD_CAPS.get(name)
        for seed in seeds:
            build, ps = case(np.random.default_rng(seed))
            rep = gradient_check(build, ps, eps=eps, tol=tol, max_coords=cap,
                                 rng=np.random.default_rng(seed + 171))
            worst = max(worst, rep.max_rel_err)
            ok = ok and rep.passed
        results[name] = worst
        if progress:
            progress(name, worst)
    return ok, results
