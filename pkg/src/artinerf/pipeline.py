"""End-to-end differentiable rendering: rays through stratified samples,
inverse skinning, learned deformations, the scene field, compositing, mask
thresholding, and patch refinement.

Points whose subject likelihood falls below the empty-space threshold are
pruned before the MLP stack and contribute zero compositing weight, which is
both the contract for empty space and the main source of CPU speed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .deform import (aggregate_canonical, canonical_to_observed,
                     nonrigid_offset, temporal_deform)
from .diffcore import tensor as T
from .diffcore.tensor import Tensor, const, no_grad
from .model import CORRECTION_PARAM, Model
from .render import (Camera, MidpointRng, alpha_compose, generate_rays,
                     patch_pixels, refine_patch, render_mask, scene_field,
                     stratified_sample)
from .skeleton import (MotionWeightVolume, generate_weight_volume,
                       part_transforms_graph, rigid_deform_graph)


@dataclass
class RenderOptions:
    samples: int = 64
    nonrigid_scale: float = 1.0    # 0 disables the branch entirely
    temporal_scale: float = 1.0
    refine_scale: float = 1.0
    bypass_deform: bool = False    # rigid skinning straight into the scene field
    scene_override: object = None  # callable pts -> (rgb, sigma), replaces the MLP


@dataclass
class FrameInputs:
    t: int
    pose: object
    camera: Camera

    @classmethod
    def from_dataset(cls, ds, t: int) -> "FrameInputs":
        return cls(t=t, pose=ds.poses[t], camera=ds.cameras[t])


class FixedUniform:
    """Stratified-sampling source with pre-drawn jitter (shared across the
    temporal window so neighbour renders are point-aligned)."""

    def __init__(self, u):
        self.u = u

    def uniform(self, low=0.0, high=1.0, size=None):
        assert self.u.shape == size, "jitter shape mismatch"
        return self.u


@dataclass
class RayRenderResult:
    rgb: Tensor              # [R, 3] composited color
    coverage: Tensor         # [R]
    mask: Tensor             # [R] thresholded coverage
    weights: Tensor          # [R, D]
    x_obs_active: np.ndarray       # [Na, 3] observed sample positions
    x_hat_can_active: Tensor | None  # predicted canonical points
    x_hat_obs_active: Tensor | None  # cyclic re-projection
    delta_t_flat: Tensor | None      # [R*D, 3] temporal offsets, zero when inactive
    active_count: int = 0
    sample_count: int = 0


def render_rays(model: Model, volume: MotionWeightVolume, fi: FrameInputs,
                origins, dirs, opts: RenderOptions, rng) -> RayRenderResult:
    """Render a batch of rays from one frame against the given weight volume."""
    store = model.store
    batch = stratified_sample(origins, dirs, fi.camera.near, fi.camera.far,
                              opts.samples, rng)
    n_rays, depth = batch.z.shape
    n = n_rays * depth
    pts = const(batch.points.reshape(n, 3))
    R, tvec = part_transforms_graph(store, CORRECTION_PARAM, fi.t,
                                    model.canonical_pose, fi.pose, model.topology)
    x_r, likelihood, active = rigid_deform_graph(volume, R, tvec, pts)
    act_idx = np.nonzero(active)[0]
    result = RayRenderResult(
        rgb=None, coverage=None, mask=None, weights=None,
        x_obs_active=batch.points.reshape(n, 3)[act_idx],
        x_hat_can_active=None, x_hat_obs_active=None, delta_t_flat=None,
        active_count=len(act_idx), sample_count=n)
    if len(act_idx) == 0:
        zero_a = const(np.zeros((n_rays, depth), dtype=np.float32))
        zero_c = const(np.zeros((n_rays, depth, 3), dtype=np.float32))
        rgb, coverage, weights = alpha_compose(zero_a, zero_c)
    else:
        x_r_a = T.take_rows(x_r, act_idx)
        x_o_a = const(result.x_obs_active)
        delta_nr = None
        if not opts.bypass_deform and opts.nonrigid_scale > 0.0:
            delta_nr = nonrigid_offset(store, "deform", model.deform, x_r_a,
                                       fi.pose.omega)
            if opts.nonrigid_scale != 1.0:
                delta_nr = T.mul(delta_nr, const(np.float32(opts.nonrigid_scale)))
        delta_t = None
        if not opts.bypass_deform and opts.temporal_scale > 0.0:
            x_c_est = aggregate_canonical(x_r_a, delta_nr, None)
            delta_t = temporal_deform(store, "deform", model.deform, model.table,
                                      x_o_a, x_c_est, fi.t)
            if opts.temporal_scale != 1.0:
                delta_t = T.mul(delta_t, const(np.float32(opts.temporal_scale)))
        x_hat_c = aggregate_canonical(x_r_a, delta_nr, delta_t)
        if opts.bypass_deform:
            x_hat_o = x_hat_c
        else:
            x_hat_o = canonical_to_observed(store, "deform", model.deform, x_hat_c)
        if opts.scene_override is not None:
            rgb_a, sig_a = opts.scene_override(x_hat_o.data)
            color_a = const(np.asarray(rgb_a, dtype=np.float32))
            sigma_a = const(np.asarray(sig_a, dtype=np.float32))
        else:
            color_a, sigma_a = scene_field(store, model.scene, x_hat_o)
        like_a = T.clip(T.take_rows(likelihood, act_idx), 0.0, 1.0)
        dz_a = const(batch.delta.reshape(n)[act_idx])
        alpha_a = T.mul(like_a, T.sub(const(np.float32(1.0)),
                                      T.exp(T.neg(T.mul(sigma_a, dz_a)))))
        alpha = T.reshape(T.scatter_rows(alpha_a, act_idx, n), (n_rays, depth))
        colors = T.reshape(T.scatter_rows(color_a, act_idx, n), (n_rays, depth, 3))
        rgb, coverage, weights = alpha_compose(alpha, colors)
        result.x_hat_can_active = x_hat_c
        result.x_hat_obs_active = x_hat_o
        if delta_t is not None:
            result.delta_t_flat = T.scatter_rows(delta_t, act_idx, n)
    result.rgb = rgb
    result.coverage = coverage
    result.weights = weights
    result.mask = render_mask(coverage, store, "render.mask.b")
    return result


@dataclass
class PatchRenderResult:
    origins: list
    patch: int
    rays: RayRenderResult
    raw_patches: list = field(default_factory=list)      # [P,P,3] composited
    refined_patches: list = field(default_factory=list)  # [P,P,3] final
    coverage_patches: list = field(default_factory=list)  # [P,P]
    mask_patches: list = field(default_factory=list)      # [P,P]


def render_patches(model: Model, volume: MotionWeightVolume, fi: FrameInputs,
                   origins, patch: int, opts: RenderOptions, rng
                   ) -> PatchRenderResult:
    """Render a set of PxP patches of one frame in a single ray batch, then
    refine each patch."""
    pixel_blocks = [patch_pixels(o, patch) for o in origins]
    pixels = np.concatenate(pixel_blocks, axis=0)
    ray_o, ray_d = generate_rays(fi.camera, pixels)
    rays = render_rays(model, volume, fi, ray_o, ray_d, opts, rng)
    out = PatchRenderResult(origins=list(origins), patch=patch, rays=rays)
    per = patch * patch
    for i in range(len(origins)):
        sl = slice(i * per, (i + 1) * per)
        rgb_p = T.reshape(rays.rgb[sl], (patch, patch, 3))
        cov_p = T.reshape(rays.coverage[sl], (patch, patch))
        mask_p = T.reshape(rays.mask[sl], (patch, patch))
        out.raw_patches.append(rgb_p)
        out.coverage_patches.append(cov_p)
        out.mask_patches.append(mask_p)
        if opts.refine_scale > 0.0:
            refined = refine_patch(model.store, model.refine, rgb_p, cov_p,
                                   residual_scale=opts.refine_scale)
        else:
            refined = T.clip(rgb_p, 0.0, 1.0)
        out.refined_patches.append(refined)
    return out


def render_image(model: Model, volume: MotionWeightVolume | None,
                 fi: FrameInputs, patch: int, opts: RenderOptions):
    """Full-frame render by tiling patches; deterministic midpoint sampling.
    Returns (rgb [H,W,3], coverage [H,W], mask [H,W]) numpy arrays."""
    cam = fi.camera
    if cam.width % patch or cam.height % patch:
        patch = _largest_tile(cam.width, cam.height, patch)
    with no_grad():
        if volume is None:
            volume = generate_weight_volume(model.store, model.volume_gen)
        rgb = np.zeros((cam.height, cam.width, 3), dtype=np.float32)
        cov = np.zeros((cam.height, cam.width), dtype=np.float32)
        msk = np.zeros((cam.height, cam.width), dtype=np.float32)
        for v0 in range(0, cam.height, patch):
            origins = [(u0, v0) for u0 in range(0, cam.width, patch)]
            res = render_patches(model, volume, fi, origins, patch, opts,
                                 MidpointRng())
            for (u0, _v0), ref, cv, mk in zip(origins, res.refined_patches,
                                              res.coverage_patches,
                                              res.mask_patches):
                rgb[v0:v0 + patch, u0:u0 + patch] = ref.data
                cov[v0:v0 + patch, u0:u0 + patch] = cv.data
                msk[v0:v0 + patch, u0:u0 + patch] = mk.data
    return rgb, cov, msk


def _largest_tile(w, h, patch):
    for p in range(min(patch, w, h), 0, -1):
        if w % p == 0 and h % p == 0:
            return p
    return 1
