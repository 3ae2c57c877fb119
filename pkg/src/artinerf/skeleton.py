"""Pose representation, kinematic chains, motion weight volumes, and the
inverse blend-skinned rigid deformation that maps observed points into the
canonical frame.

Conventions: a pose stores per-joint offsets (position of each joint in its
parent's frame; the root offset is a world position) plus local axis-angle
rotations. A part k is the rigid frame of joint k; its bone segment runs from
the joint's parent to the joint (the root gets a degenerate point segment).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .diffcore import tensor as T
from .diffcore.params import ParamStore
from .diffcore.tensor import ContractError, Tensor, const, no_grad

BACKGROUND_FLOOR = 1e-3      # weight-volume prior floor for the background channel
EMPTY_LIKELIHOOD = 1e-6      # below this, a point is treated as empty space
BONE_SIGMA_FRACTION = 0.1    # Gaussian bone falloff scale as a fraction of bone length


# ---------------------------------------------------------------------------
# topology and poses
# ---------------------------------------------------------------------------

@dataclass
class SkeletonTopology:
    """Joint tree: parents[k] is the parent joint index, -1 for the root.

    bones[k] is the rest-pose segment (a, b) attached to part k; by default
    the segment from the parent to the joint, degenerate (k, k) at the root.
    """
    parents: list
    bones: list = field(default_factory=list)

    def __post_init__(self):
        self.parents = [int(p) for p in self.parents]
        k = len(self.parents)
        roots = [i for i, p in enumerate(self.parents) if p < 0]
        if len(roots) != 1:
            raise ContractError(f"topology must have exactly one root, found {len(roots)}")
        for i in range(k):
            seen, j = set(), i
            while self.parents[j] >= 0:
                if j in seen:
                    raise ContractError("topology parent relation contains a cycle")
                seen.add(j)
                j = self.parents[j]
        if not self.bones:
            self.bones = [(self.parents[i] if self.parents[i] >= 0 else i, i)
                          for i in range(k)]
        self.bones = [(int(a), int(b)) for a, b in self.bones]

    @property
    def joint_count(self) -> int:
        return len(self.parents)

    def ancestor_chain(self, k: int) -> list:
        """Ordered joint indices from the root down to joint k (inclusive)."""
        if not 0 <= k < self.joint_count:
            raise ContractError(f"joint index {k} out of range")
        chain = [k]
        while self.parents[chain[-1]] >= 0:
            chain.append(self.parents[chain[-1]])
        return chain[::-1]

    def topo_order(self) -> list:
        order, placed = [], set()
        pending = list(range(self.joint_count))
        while pending:
            for i in list(pending):
                p = self.parents[i]
                if p < 0 or p in placed:
                    order.append(i)
                    placed.add(i)
                    pending.remove(i)
        return order


@dataclass
class Pose:
    """Per-joint offsets (meters) and local axis-angle rotations (radians)."""
    joints: np.ndarray                 # [K, 3] offsets in the parent frame
    omega: np.ndarray                  # [K, 3]
    global_rotation: np.ndarray = None   # axis-angle [3], optional
    global_translation: np.ndarray = None

    def __post_init__(self):
        self.joints = np.asarray(self.joints, dtype=np.float32).reshape(-1, 3)
        self.omega = np.asarray(self.omega, dtype=np.float32).reshape(-1, 3)
        if self.global_rotation is not None:
            self.global_rotation = np.asarray(self.global_rotation, dtype=np.float32)
        if self.global_translation is not None:
            self.global_translation = np.asarray(self.global_translation, dtype=np.float32)
        if not np.all(np.isfinite(self.joints)) or not np.all(np.isfinite(self.omega)):
            raise ContractError("pose contains non-finite values")

    @property
    def joint_count(self):
        return self.joints.shape[0]

    def canonicalized(self) -> "Pose":
        """Wrap rotation magnitudes into [0, 2*pi)."""
        om = self.omega.copy()
        norms = np.linalg.norm(om, axis=-1)
        for i, n in enumerate(norms):
            if n >= 2 * np.pi:
                om[i] *= (n % (2 * np.pi)) / n
        return Pose(self.joints.copy(), om, self.global_rotation, self.global_translation)


@dataclass
class RigidTransform:
    R: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        self.R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        self.t = np.asarray(self.t, dtype=np.float64).reshape(3)
        if np.abs(self.R @ self.R.T - np.eye(3)).max() > 1e-5:
            raise ContractError("rotation not orthonormal")
        if abs(np.linalg.det(self.R) - 1.0) > 1e-5:
            raise ContractError("rotation determinant != +1")

    def apply(self, x):
        return np.asarray(x) @ self.R.T + self.t


# ---------------------------------------------------------------------------
# rotations
# ---------------------------------------------------------------------------

def rodrigues_exp(w) -> np.ndarray:
    """exp([w]x) for axis-angle vectors [..., 3], series branch near zero."""
    w = np.asarray(w, dtype=np.float64)
    single = w.ndim == 1
    w = np.atleast_2d(w)
    s = (w * w).sum(-1)
    small = s < 1e-16
    safe = np.where(small, 1.0, s)
    r = np.sqrt(safe)
    a = np.where(small, 1.0 - s / 6.0 + s * s / 120.0, np.sin(r) / r)
    b = np.where(small, 0.5 - s / 24.0 + s * s / 720.0, (1.0 - np.cos(r)) / safe)
    K = _cross_mat(w)
    out = np.eye(3) + a[..., None, None] * K + b[..., None, None] * (K @ K)
    return out[0] if single else out


def _cross_mat(w):
    m = np.zeros(w.shape[:-1] + (3, 3), dtype=w.dtype)
    m[..., 0, 1] = -w[..., 2]
    m[..., 0, 2] = w[..., 1]
    m[..., 1, 0] = w[..., 2]
    m[..., 1, 2] = -w[..., 0]
    m[..., 2, 0] = -w[..., 1]
    m[..., 2, 1] = w[..., 0]
    return m


def rodrigues_log(R) -> np.ndarray:
    """Axis-angle of a rotation matrix, |w| in [0, pi]."""
    R = np.asarray(R, dtype=np.float64)
    tr = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
    theta = np.arccos(tr)
    if theta < 1e-8:
        return np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]]) / 2.0
    if np.pi - theta < 1e-5:
        # near a half-turn the skew part vanishes; recover the axis from R + I
        A = (R + np.eye(3)) / 2.0
        axis = np.sqrt(np.maximum(np.diag(A), 0.0))
        # fix signs using the largest component
        i = int(np.argmax(axis))
        if axis[i] > 0:
            for j in range(3):
                if j != i and A[i, j] < 0:
                    axis[j] = -axis[j]
        axis /= max(np.linalg.norm(axis), 1e-12)
        return theta * axis
    vee = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    return theta / (2.0 * np.sin(theta)) * vee


def rodrigues_exp_graph(w: Tensor) -> Tensor:
    """Differentiable exp([w]x) for a [K, 3] tensor -> [K, 3, 3]."""
    s = T.tsum(T.mul(w, w), axis=-1)                       # [K]
    a = T.reshape(T.rot_coeff_a(s), (-1, 1, 1))
    b = T.reshape(T.rot_coeff_b(s), (-1, 1, 1))
    K = T.cross_matrix(w)                                   # [K, 3, 3]
    K2 = T.bmm(K, K)
    eye = const(np.broadcast_to(np.eye(3, dtype=np.float32), K.data.shape).copy())
    return T.add(eye, T.add(T.mul(a, K), T.mul(b, K2)))


# ---------------------------------------------------------------------------
# kinematic chains
# ---------------------------------------------------------------------------

def _global_rt(pose: Pose):
    R = rodrigues_exp(pose.global_rotation) if pose.global_rotation is not None \
        else np.eye(3)
    t = pose.global_translation if pose.global_translation is not None \
        else np.zeros(3)
    return R, np.asarray(t, dtype=np.float64)


def chain_rts(pose: Pose, topology: SkeletonTopology,
              rot_override: np.ndarray | None = None):
    """World (R, t) per joint: the product of [[exp(w_i), j_i], [0, 1]] along
    each joint's ancestor chain. Returns ([K,3,3], [K,3]) float64 arrays."""
    K = topology.joint_count
    locR = rodrigues_exp(pose.omega) if rot_override is None else rot_override
    Rw = np.zeros((K, 3, 3))
    tw = np.zeros((K, 3))
    gR, gt = _global_rt(pose)
    for k in topology.topo_order():
        p = topology.parents[k]
        if p < 0:
            Rw[k] = gR @ locR[k]
            tw[k] = gR @ pose.joints[k].astype(np.float64) + gt
        else:
            Rw[k] = Rw[p] @ locR[k]
            tw[k] = Rw[p] @ pose.joints[k].astype(np.float64) + tw[p]
    return Rw, tw


def chain_transform(pose: Pose, k: int, topology: SkeletonTopology) -> np.ndarray:
    """4x4 homogeneous chain transform for joint k."""
    if not 0 <= k < topology.joint_count:
        raise ContractError(f"joint index {k} out of range")
    Rw, tw = chain_rts(pose, topology)
    Y = np.eye(4)
    Y[:3, :3] = Rw[k]
    Y[:3, 3] = tw[k]
    return Y


def joint_world_positions(pose: Pose, topology: SkeletonTopology) -> np.ndarray:
    _, tw = chain_rts(pose, topology)
    return tw


def part_transform(pose_c: Pose, pose: Pose, k: int,
                   topology: SkeletonTopology) -> RigidTransform:
    """Rigid map from observed space to canonical space for part k:
    Y(pose_c, k) @ Y(pose, k)^-1."""
    if pose_c.joint_count != pose.joint_count:
        raise ContractError("poses have mismatched joint counts")
    Rc, tc = chain_rts(pose_c, topology)
    Ro, to = chain_rts(pose, topology)
    R = Rc[k] @ Ro[k].T
    t = tc[k] - R @ to[k]
    return RigidTransform(R, t)


def all_part_transforms(pose_c: Pose, pose: Pose, topology: SkeletonTopology,
                        rot_override: np.ndarray | None = None):
    """Stacked (R [K,3,3], t [K,3]) float32 observed-to-canonical transforms."""
    Rc, tc = chain_rts(pose_c, topology)
    Ro, to = chain_rts(pose, topology, rot_override=rot_override)
    R = Rc @ np.swapaxes(Ro, -1, -2)
    t = tc - np.einsum("kij,kj->ki", R, to)
    return R.astype(np.float32), t.astype(np.float32)


def part_transforms_graph(store: ParamStore, corr_name: str, frame: int,
                          pose_c: Pose, pose: Pose,
                          topology: SkeletonTopology):
    """Differentiable observed-to-canonical part transforms with the frame's
    learnable rotation offsets applied on the left of each local rotation.

    Returns (R [K,3,3], t [K,3]) graph tensors; gradients reach the
    pose-correction table through the Rodrigues map.
    """
    K = topology.joint_count
    delta = T.take_rows(store.graph_tensor(corr_name), np.array([frame]))
    delta = T.reshape(delta, (K, 3))
    corrR = T.bmm(rodrigues_exp_graph(delta), const(rodrigues_exp(pose.omega)
                                                    .astype(np.float32)))
    gR, gt = _global_rt(pose)
    Rw: list = [None] * K
    tw: list = [None] * K
    gRc = const(gR.astype(np.float32))
    for k in topology.topo_order():
        p = topology.parents[k]
        Rk = T.reshape(corrR[k], (3, 3))
        off = const(pose.joints[k].reshape(3, 1))
        if p < 0:
            Rw[k] = T.matmul(gRc, Rk)
            tw[k] = const((gR @ pose.joints[k].astype(np.float64) + gt)
                          .astype(np.float32).reshape(3, 1))
        else:
            Rw[k] = T.matmul(Rw[p], Rk)
            tw[k] = T.add(T.matmul(Rw[p], off), tw[p])
    Rc, tc = chain_rts(pose_c, topology)
    Rs, ts = [], []
    for k in range(K):
        Rck = const(Rc[k].astype(np.float32))
        # M_k = Y_c Y^-1: R = R_c R^T, t = t_c - R t
        Rm = T.matmul(Rck, T.transpose(Rw[k]))
        tm = T.sub(const(tc[k].astype(np.float32).reshape(3, 1)), T.matmul(Rm, tw[k]))
        Rs.append(T.reshape(Rm, (1, 3, 3)))
        ts.append(T.reshape(tm, (1, 3)))
    return T.concat(Rs, axis=0), T.concat(ts, axis=0)


# ---------------------------------------------------------------------------
# pose correction
# ---------------------------------------------------------------------------

def init_pose_correction(store: ParamStore, name: str, frame_count: int, K: int):
    store.add(name, np.zeros((frame_count, K * 3), dtype=np.float32))


def refine_pose(pose: Pose, correction: np.ndarray, frame: int) -> Pose:
    """Compose the frame's learned offsets onto the pose's local rotations:
    exp(w') = exp(dw) exp(w). Joint offsets are untouched."""
    correction = np.asarray(correction)
    if not 0 <= frame < correction.shape[0]:
        raise ContractError(f"frame {frame} outside correction table")
    K = pose.joint_count
    dw = correction[frame].reshape(K, 3)
    new_omega = np.zeros_like(pose.omega)
    for k in range(K):
        R = rodrigues_exp(dw[k]) @ rodrigues_exp(pose.omega[k])
        new_omega[k] = rodrigues_log(R).astype(np.float32)
    return Pose(pose.joints.copy(), new_omega, pose.global_rotation,
                pose.global_translation)


# ---------------------------------------------------------------------------
# motion weight volume
# ---------------------------------------------------------------------------

@dataclass
class MotionWeightVolume:
    """Per-voxel soft part memberships over the canonical bounding box.

    grid: [K+1, N, N, N] tensor (parts 0..K-1, background last), each voxel a
    softmax across channels.
    """
    grid: Tensor
    bbox_min: np.ndarray
    bbox_max: np.ndarray

    @property
    def part_count(self):
        return self.grid.data.shape[0] - 1

    def part_fill(self):
        return np.zeros(self.part_count, dtype=np.float32)


def _segment_distances(points, a, b):
    """Distance from [N,3] points to segment a-b (possibly degenerate)."""
    ab = b - a
    denom = float(ab @ ab)
    if denom < 1e-12:
        return np.linalg.norm(points - a, axis=-1)
    t = np.clip(((points - a) @ ab) / denom, 0.0, 1.0)
    proj = a + t[:, None] * ab
    return np.linalg.norm(points - proj, axis=-1)


def voxel_centers(bbox_min, bbox_max, res):
    axes = [bbox_min[i] + (np.arange(res) + 0.5) * (bbox_max[i] - bbox_min[i]) / res
            for i in range(3)]
    gx, gy, gz = np.meshgrid(*axes, indexing="ij")
    return np.stack([gx, gy, gz], axis=-1).reshape(-1, 3)


def gaussian_bone_prior(pose_c: Pose, topology: SkeletonTopology,
                        bbox_min, bbox_max, res: int) -> np.ndarray:
    """Log-space prior volume: channel k falls off with squared distance to
    its posed bone segment; the background channel is a constant floor."""
    bbox_min = np.asarray(bbox_min, dtype=np.float64)
    bbox_max = np.asarray(bbox_max, dtype=np.float64)
    if np.any(bbox_max - bbox_min <= 0):
        raise ContractError("degenerate bounding box")
    K = topology.joint_count
    joints = joint_world_positions(pose_c, topology)
    pts = voxel_centers(bbox_min, bbox_max, res)
    lengths = [np.linalg.norm(joints[b] - joints[a]) for a, b in topology.bones]
    nonzero = [l for l in lengths if l > 1e-9]
    mean_len = np.mean(nonzero) if nonzero else 1.0
    prior = np.zeros((K + 1, res, res, res), dtype=np.float32)
    for k, (a, b) in enumerate(topology.bones):
        sigma = BONE_SIGMA_FRACTION * (lengths[k] if lengths[k] > 1e-9 else mean_len)
        d = _segment_distances(pts, joints[a], joints[b])
        prior[k] = (-(d * d) / (2.0 * sigma * sigma)).reshape(res, res, res)
    prior[K] = np.log(BACKGROUND_FLOOR)
    return prior


@dataclass
class WeightVolumeGenerator:
    """Decoder from a fixed random latent to weight-volume logits, plus the
    bone prior added before the channel softmax."""
    prefix: str
    latent: np.ndarray           # constant, drawn once at init
    prior: np.ndarray            # [K+1, res, res, res]
    bbox_min: np.ndarray
    bbox_max: np.ndarray
    res: int
    channels: tuple              # decoder channel plan, e.g. (16, 16, 8)

    @property
    def part_count(self):
        return self.prior.shape[0] - 1


def init_weight_volume_generator(store: ParamStore, prefix: str, pose_c: Pose,
                                 topology: SkeletonTopology, bbox_min, bbox_max,
                                 res: int, latent_dim: int,
                                 channels: tuple, rng: np.random.Generator
                                 ) -> WeightVolumeGenerator:
    if res % 8 != 0:
        raise ContractError("weight volume resolution must be a multiple of 8")
    base = res // 8
    c0, c1, c2 = channels
    K = topology.joint_count
    latent = rng.standard_normal(latent_dim).astype(np.float32)
    bound = np.sqrt(6.0 / latent_dim)
    store.add(f"{prefix}.project.weight",
              rng.uniform(-bound, bound, size=(latent_dim, c0 * base ** 3))
              .astype(np.float32))
    store.add(f"{prefix}.project.bias", np.zeros(c0 * base ** 3, dtype=np.float32))
    plan = [(c0, c1, 4), (c1, c2, 4), (c2, K + 1, 2)]
    for i, (ci, co, k) in enumerate(plan, start=1):
        if i == len(plan):
            w = np.zeros((co, ci, k, k, k), dtype=np.float32)
        else:
            bound = np.sqrt(6.0 / (ci * k ** 3))
            w = rng.uniform(-bound, bound, size=(co, ci, k, k, k)) \
                .astype(np.float32)
        store.add(f"{prefix}.deconv{i}.weight", w)
        store.add(f"{prefix}.deconv{i}.bias", np.zeros(co, dtype=np.float32))
    prior = gaussian_bone_prior(pose_c, topology, bbox_min, bbox_max, res)
    return WeightVolumeGenerator(prefix, latent, prior,
                                 np.asarray(bbox_min, dtype=np.float32),
                                 np.asarray(bbox_max, dtype=np.float32),
                                 res, channels)


def _deconv_layer(store, name, x, out_res):
    """Stride-2 transposed convolution: zero-insertion then a stride-1 conv
    with padding k - 1 - 1 (kernel size read off the stored weight)."""
    w = store.graph_tensor(f"{name}.weight")
    b = store.graph_tensor(f"{name}.bias")
    up = T.zero_insert3d(x, 2)
    y = T.conv3d(up, w, pad=w.data.shape[-1] // 2)
    if y.data.shape[1] != out_res:
        raise ContractError(f"decoder produced grid {y.data.shape}, wanted {out_res}")
    return T.add(y, T.reshape(b, (-1, 1, 1, 1)))


def generate_weight_volume(store: ParamStore, gen: WeightVolumeGenerator
                           ) -> MotionWeightVolume:
    """Decode the latent, add the prior to the pre-activation logits, softmax
    across channels."""
    base = gen.res // 8
    c0 = gen.channels[0]
    z = const(gen.latent.reshape(1, -1))
    h = T.add(T.matmul(z, store.graph_tensor(f"{gen.prefix}.project.weight")),
              store.graph_tensor(f"{gen.prefix}.project.bias"))
    h = T.relu(T.reshape(h, (c0, base, base, base)))
    h = T.relu(_deconv_layer(store, f"{gen.prefix}.deconv1", h, base * 2))
    h = T.relu(_deconv_layer(store, f"{gen.prefix}.deconv2", h, base * 4))
    logits = _deconv_layer(store, f"{gen.prefix}.deconv3", h, base * 8)
    if logits.data.shape != gen.prior.shape:
        raise ContractError(
            f"decoder/prior shape mismatch: {logits.data.shape} vs {gen.prior.shape}")
    vol = T.softmax(T.add(logits, const(gen.prior)), axis=0)
    return MotionWeightVolume(vol, gen.bbox_min, gen.bbox_max)


# ---------------------------------------------------------------------------
# sampling, likelihood, rigid deformation
# ---------------------------------------------------------------------------

def sample_weights(volume: MotionWeightVolume, x) -> np.ndarray:
    """All K+1 channels at one or more positions (numpy convenience).
    Outside the box: parts 0, background 1."""
    x = np.asarray(x, dtype=np.float32).reshape(-1, 3)
    C = volume.grid.data.shape[0]
    fill = np.zeros(C, dtype=np.float32)
    fill[-1] = 1.0
    with no_grad():
        pts = const(np.broadcast_to(x, (C,) + x.shape).copy())
        out = T.sample_volume(const(volume.grid.data), pts, volume.bbox_min,
                              volume.bbox_max, fill)
    return out.data.T  # [N, K+1]


def part_weights_at(volume: MotionWeightVolume, pts: Tensor) -> Tensor:
    """Part channels (no background) sampled at per-part points [K, N, 3]."""
    K = volume.part_count
    parts = volume.grid[0:K]
    return T.sample_volume(parts, pts, volume.bbox_min, volume.bbox_max,
                           volume.part_fill())


def subject_likelihood_graph(volume: MotionWeightVolume, R: Tensor, t: Tensor,
                             x: Tensor):
    """L(x) = sum_k w_k(R_k x + t_k) plus the per-part transformed points."""
    pts = T.apply_rigid(R, t, x)            # [K, N, 3]
    w = part_weights_at(volume, pts)        # [K, N]
    return T.tsum(w, axis=0), w, pts


def rigid_deform_graph(volume: MotionWeightVolume, R: Tensor, t: Tensor,
                       x: Tensor):
    """Inverse blend skinning: weight-blended average of per-part transformed
    points. Returns (x_R [N,3], L [N], active bool mask). Entries with
    L < EMPTY_LIKELIHOOD keep x unchanged and are flagged inactive; callers
    give them zero compositing weight."""
    L, w, pts = subject_likelihood_graph(volume, R, t, x)
    active = L.data >= EMPTY_LIKELIHOOD
    num = T.tsum(T.mul(T.reshape(w, w.data.shape + (1,)), pts), axis=0)  # [N, 3]
    denom = T.reshape(T.clip(L, EMPTY_LIKELIHOOD, None), (-1, 1))
    blended = T.div(num, denom)
    mask = active[:, None].astype(np.float32)
    x_r = T.add(T.mul(blended, const(mask)), T.mul(x, const(1.0 - mask)))
    return x_r, L, active


def subject_likelihood(volume: MotionWeightVolume, pose_c: Pose, pose: Pose,
                       x, topology: SkeletonTopology):
    """Operational wrapper over the graph path (numpy in, numpy out)."""
    R, t = all_part_transforms(pose_c, pose, topology)
    x = np.asarray(x, dtype=np.float32).reshape(-1, 3)
    with no_grad():
        L, w, pts = subject_likelihood_graph(volume, const(R), const(t), const(x))
    return L.data, pts.data


def rigid_deform(volume: MotionWeightVolume, pose_c: Pose, pose: Pose, x,
                 topology: SkeletonTopology):
    """Numpy wrapper: returns (x_R [N,3], L [N], active [N])."""
    R, t = all_part_transforms(pose_c, pose, topology)
    x = np.asarray(x, dtype=np.float32).reshape(-1, 3)
    with no_grad():
        x_r, L, active = rigid_deform_graph(volume, const(R), const(t), const(x))
    return x_r.data, L.data, active
