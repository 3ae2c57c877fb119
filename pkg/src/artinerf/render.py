"""Cameras, ray generation, stratified/patch sampling, the scene field,
alpha compositing, learnable-threshold masks, and the refinement decoder."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diffcore import tensor as T
from .diffcore.mlp import MLPSpec, build_mlp_params, mlp_forward
from .diffcore.params import ParamStore
from .diffcore.tensor import ContractError, Tensor, const
from .deform import PositionalEncoder, positional_encode


# ---------------------------------------------------------------------------
# cameras and rays
# ---------------------------------------------------------------------------

@dataclass
class Camera:
    """Pinhole camera; rotation/translation are camera-to-world. Camera space
    has x to image right, y to image down, z along the optical axis."""
    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray
    translation: np.ndarray
    width: int
    height: int
    near: float
    far: float

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if self.fx <= 0 or self.fy <= 0:
            raise ContractError("focal lengths must be positive")
        if not self.near < self.far:
            raise ContractError("camera requires near < far")
        if np.abs(self.rotation @ self.rotation.T - np.eye(3)).max() > 1e-5:
            raise ContractError("camera rotation not orthonormal")

    def to_dict(self):
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "rotation": self.rotation.reshape(-1).tolist(),
                "translation": self.translation.tolist(),
                "width": self.width, "height": self.height,
                "near": self.near, "far": self.far}

    @classmethod
    def from_dict(cls, d):
        return cls(d["fx"], d["fy"], d["cx"], d["cy"],
                   np.asarray(d["rotation"]).reshape(3, 3),
                   np.asarray(d["translation"]), int(d["width"]), int(d["height"]),
                   d["near"], d["far"])


def look_at_camera(eye, center, up, focal: float, width: int, height: int,
                   near: float, far: float) -> Camera:
    eye = np.asarray(eye, dtype=np.float64)
    center = np.asarray(center, dtype=np.float64)
    f = center - eye
    f = f / np.linalg.norm(f)
    r = np.cross(f, np.asarray(up, dtype=np.float64))
    nr = np.linalg.norm(r)
    if nr < 1e-9:
        raise ContractError("camera forward parallel to up vector")
    r /= nr
    d = np.cross(f, r)
    rot = np.stack([r, d, f], axis=1)
    return Camera(focal, focal, (width - 1) / 2.0, (height - 1) / 2.0,
                  rot, eye, width, height, near, far)


def generate_rays(camera: Camera, pixels):
    """Rays through the given (u, v) pixel coordinates.

    Returns (origins [N,3], directions [N,3]) with unit directions; the
    origin is the camera center for every ray.
    """
    px = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    if (np.any(px[:, 0] < 0) or np.any(px[:, 0] > camera.width - 1)
            or np.any(px[:, 1] < 0) or np.any(px[:, 1] > camera.height - 1)):
        raise ContractError("pixel coordinates outside image bounds")
    cam_dirs = np.stack([(px[:, 0] - camera.cx) / camera.fx,
                         (px[:, 1] - camera.cy) / camera.fy,
                         np.ones(len(px))], axis=-1)
    world = cam_dirs @ camera.rotation.T
    world /= np.linalg.norm(world, axis=-1, keepdims=True)
    origins = np.broadcast_to(camera.translation, world.shape).copy()
    return origins.astype(np.float32), world.astype(np.float32)


def patch_pixels(origin, patch: int):
    """Row-major (u, v) integer pixel grid of a patch anchored at origin."""
    u0, v0 = origin
    vs, us = np.meshgrid(np.arange(v0, v0 + patch), np.arange(u0, u0 + patch),
                         indexing="ij")
    return np.stack([us.reshape(-1), vs.reshape(-1)], axis=-1)


# ---------------------------------------------------------------------------
# depth sampling
# ---------------------------------------------------------------------------

@dataclass
class SampleBatch:
    """Per-ray stratified depths, intervals, and world positions."""
    z: np.ndarray        # [R, D], sorted along D
    delta: np.ndarray    # [R, D], positive
    points: np.ndarray   # [R, D, 3]


class MidpointRng:
    """Stratified-sampling stub that always lands at bin midpoints."""

    def uniform(self, low=0.0, high=1.0, size=None):
        return np.full(size, 0.5 * (low + high), dtype=np.float64)


def stratified_sample(origins, dirs, near: float, far: float, count: int,
                      rng) -> SampleBatch:
    """One uniform depth sample per equal bin of [near, far].

    Interval convention: the first interval starts at `near` and the last is
    extended to `far`, so the intervals always cover the full segment and sum
    exactly to far - near.
    """
    if count < 1:
        raise ContractError("need at least one sample per ray")
    origins = np.asarray(origins, dtype=np.float32).reshape(-1, 3)
    dirs = np.asarray(dirs, dtype=np.float32).reshape(-1, 3)
    n_rays = origins.shape[0]
    width = (far - near) / count
    u = rng.uniform(size=(n_rays, count))
    z = (near + (np.arange(count) + u) * width).astype(np.float32)
    delta = np.empty_like(z)
    if count == 1:
        delta[:, 0] = far - near
    else:
        delta[:, 1:-1] = z[:, 2:] - z[:, 1:-1]
        delta[:, 0] = z[:, 1] - near
        delta[:, -1] = far - z[:, -1]
    points = origins[:, None, :] + z[..., None] * dirs[:, None, :]
    return SampleBatch(z, delta, points.astype(np.float32))


def sample_patches(width: int, height: int, mask, patch: int, count: int, rng):
    """Patch origins that each overlap the subject's mask bounding box.

    Rejection-samples uniform origins (at most 100 tries per patch) and falls
    back to clamping a uniform draw into the overlap range.
    """
    mask = np.asarray(mask)
    if patch > min(width, height):
        raise ContractError("patch larger than image")
    if count < 1:
        raise ContractError("need at least one patch")
    ys, xs = np.nonzero(mask)
    if len(xs) == 0:
        raise ContractError("empty subject mask")
    bx0, bx1 = int(xs.min()), int(xs.max())
    by0, by1 = int(ys.min()), int(ys.max())
    max_u, max_v = width - patch, height - patch
    origins = []
    for _ in range(count):
        chosen = None
        for _attempt in range(100):
            u0 = int(rng.uniform(0, max_u + 1)) if max_u > 0 else 0
            v0 = int(rng.uniform(0, max_v + 1)) if max_v > 0 else 0
            if u0 <= bx1 and u0 + patch - 1 >= bx0 and v0 <= by1 and v0 + patch - 1 >= by0:
                chosen = (u0, v0)
                break
        if chosen is None:
            u0 = int(np.clip(int(rng.uniform(0, max_u + 1)), max(0, bx0 - patch + 1),
                             min(max_u, bx1)))
            v0 = int(np.clip(int(rng.uniform(0, max_v + 1)), max(0, by0 - patch + 1),
                             min(max_v, by1)))
            chosen = (u0, v0)
        origins.append(chosen)
    return origins


# ---------------------------------------------------------------------------
# scene field
# ---------------------------------------------------------------------------

@dataclass
class SceneField:
    spec: MLPSpec
    encoder: PositionalEncoder
    prefix: str


def build_scene_field(store: ParamStore, prefix: str, hidden: int,
                      pos_freqs: int, rng: np.random.Generator) -> SceneField:
    enc = PositionalEncoder(pos_freqs)
    w = enc.width(3)
    spec = MLPSpec(widths=(w,) + (hidden,) * 7 + (4,), skip_layer=5, skip_width=w)
    build_mlp_params(store, prefix, spec, rng)
    return SceneField(spec, enc, prefix)


def scene_field(store: ParamStore, field: SceneField, x: Tensor):
    """(color, density) heads: logistic squash keeps c in [0,1]^3, softplus
    keeps sigma non-negative. No view-direction conditioning."""
    enc = positional_encode(x, field.encoder)
    out = mlp_forward(store, field.prefix, field.spec, enc, skip=enc)
    color = T.sigmoid(out[:, 0:3])
    sigma = T.softplus(T.reshape(out[:, 3:4], (-1,)))
    return color, sigma


# ---------------------------------------------------------------------------
# compositing, mask head, refinement
# ---------------------------------------------------------------------------

def alpha_compose(alpha: Tensor, colors: Tensor):
    """Front-to-back compositing of per-sample opacities.

    alpha: [R, D] in [0, 1]; colors: [R, D, 3].
    Returns (color [R, 3], coverage [R], weights [R, D]).
    """
    a = alpha.data
    if a.size and (a.min() < 0.0 or a.max() > 1.0):
        raise ContractError(f"alpha outside [0, 1]: range [{a.min()}, {a.max()}]")
    trans = T.exclusive_cumprod(T.sub(const(np.float32(1.0)), alpha))
    weights = T.mul(alpha, trans)
    coverage = T.tsum(weights, axis=1)
    w3 = T.reshape(weights, weights.data.shape + (1,))
    color = T.tsum(T.mul(w3, colors), axis=1)
    return color, coverage, weights


MASK_THRESHOLD_INIT = 0.1


def init_mask_head(store: ParamStore, name: str):
    store.add(name, np.array([MASK_THRESHOLD_INIT], dtype=np.float32))


def render_mask(coverage: Tensor, store: ParamStore, name: str) -> Tensor:
    """Thresholded coverage: (A + b) * step(A > b), clamped to [0, 1]."""
    return T.threshold_mask(coverage, store.graph_tensor(name))


def clamp_mask_threshold(store: ParamStore, name: str):
    """Applied after each optimizer step: b stays in [0, 1]."""
    store[name].value = np.clip(store[name].value, 0.0, 1.0)


@dataclass
class RefinementNet:
    prefix: str
    hidden: int


def build_refinement_net(store: ParamStore, prefix: str, hidden: int,
                         rng: np.random.Generator) -> RefinementNet:
    """Three stride-1 transposed-convolution layers, 4 -> hidden -> hidden -> 3,
    kernel 3; the last layer starts at zero so refinement begins as identity."""
    plan = [(4, hidden), (hidden, hidden), (hidden, 3)]
    for i, (ci, co) in enumerate(plan, start=1):
        if i == len(plan):
            w = np.zeros((co, ci, 3, 3), dtype=np.float32)
        else:
            bound = np.sqrt(6.0 / (ci * 9))
            w = rng.uniform(-bound, bound, size=(co, ci, 3, 3)).astype(np.float32)
        store.add(f"{prefix}.l{i}.weight", w)
        store.add(f"{prefix}.l{i}.bias", np.zeros(co, dtype=np.float32))
    return RefinementNet(prefix, hidden)


def refine_patch(store: ParamStore, net: RefinementNet, rgb: Tensor,
                 coverage: Tensor, residual_scale: float = 1.0) -> Tensor:
    """rgb: [P, P, 3]; coverage: [P, P]. Residual refinement clamped to [0,1]."""
    if rgb.data.shape[:2] != coverage.data.shape:
        raise ContractError("refinement: rgb/coverage patch shapes differ")
    p = rgb.data.shape[0]
    x = T.concat([T.transpose(rgb, (2, 0, 1)),
                  T.reshape(coverage, (1, p, p))], axis=0)
    h = x
    for i in (1, 2, 3):
        w = store.graph_tensor(f"{net.prefix}.l{i}.weight")
        b = store.graph_tensor(f"{net.prefix}.l{i}.bias")
        h = T.add(T.conv2d(h, w, pad=1), T.reshape(b, (-1, 1, 1)))
        if i < 3:
            h = T.relu(h)
    res = T.transpose(h, (1, 2, 0))
    if residual_scale != 1.0:
        res = T.mul(res, const(np.float32(residual_scale)))
    return T.clip(T.add(rgb, res), 0.0, 1.0)
