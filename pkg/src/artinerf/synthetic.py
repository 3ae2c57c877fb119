"""Articulated capsule scenes with a closed-form density and a brute-force
volume renderer. These scenes supply exact ground truth (images, masks,
poses, cameras) for training and for validating the learned pipeline.

The analytic renderer is deliberately independent of the differentiable
rendering stack: plain numpy, midpoint depth sampling, its own compositing
loop. It is the oracle the fast path is checked against.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .diffcore.tensor import ContractError
from .render import Camera, look_at_camera
from .skeleton import (Pose, SkeletonTopology, joint_world_positions)

DEFAULT_ORACLE_SAMPLES = 512


@dataclass
class CapsuleSpec:
    bone: int
    radius: float
    albedo: tuple
    amplitude: float
    pulse_amp: float = 0.0     # fractional radius modulation over time
    pulse_freq: float = 0.0    # cycles over the whole sequence
    pulse_phase: float = 0.0

    def radius_at(self, t: float, frame_count: int) -> float:
        if self.pulse_amp == 0.0:
            return self.radius
        phase = 2.0 * np.pi * self.pulse_freq * t / frame_count + self.pulse_phase
        return self.radius * (1.0 + self.pulse_amp * np.sin(phase))


@dataclass
class JointMotion:
    joint: int
    axis: tuple
    amplitude: float
    frequency: float   # cycles over the whole sequence
    phase: float = 0.0


@dataclass
class SyntheticSceneSpec:
    name: str
    seed: int
    image_size: int
    frame_count: int
    parents: list
    rest_offsets: list            # [K][3]
    capsules: list                # CapsuleSpec
    motions: list                 # JointMotion
    camera_radius: float
    camera_elevation_deg: float = 12.0
    camera_revolutions: float = 1.0
    camera_fit: float = 0.85
    canonical_frame: int = -1     # -1 = mid-sequence
    pose_noise_sigma: float = 0.0
    bbox_margin: float = 0.15

    def __post_init__(self):
        if self.frame_count < 2:
            raise ContractError("need at least two frames")
        for c in self.capsules:
            if c.radius <= 0:
                raise ContractError("capsule radius must be positive")
        for m in self.motions:
            if not 0 <= m.joint < len(self.parents):
                raise ContractError("motion trajectory names an invalid joint")
        if self.canonical_frame < 0:
            self.canonical_frame = self.frame_count // 2

    @property
    def topology(self) -> SkeletonTopology:
        return SkeletonTopology(list(self.parents))

    def to_dict(self):
        return {
            "name": self.name, "seed": self.seed, "image_size": self.image_size,
            "frame_count": self.frame_count, "parents": list(self.parents),
            "rest_offsets": [list(map(float, o)) for o in self.rest_offsets],
            "capsules": [{"bone": c.bone, "radius": c.radius,
                          "albedo": list(c.albedo), "amplitude": c.amplitude,
                          "pulse_amp": c.pulse_amp, "pulse_freq": c.pulse_freq,
                          "pulse_phase": c.pulse_phase} for c in self.capsules],
            "motions": [{"joint": m.joint, "axis": list(m.axis),
                         "amplitude": m.amplitude, "frequency": m.frequency,
                         "phase": m.phase} for m in self.motions],
            "camera_radius": self.camera_radius,
            "camera_elevation_deg": self.camera_elevation_deg,
            "camera_revolutions": self.camera_revolutions,
            "camera_fit": self.camera_fit,
            "canonical_frame": self.canonical_frame,
            "pose_noise_sigma": self.pose_noise_sigma,
            "bbox_margin": self.bbox_margin,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            name=d["name"], seed=int(d["seed"]), image_size=int(d["image_size"]),
            frame_count=int(d["frame_count"]), parents=list(d["parents"]),
            rest_offsets=d["rest_offsets"],
            capsules=[CapsuleSpec(int(c["bone"]), float(c["radius"]),
                                  tuple(c["albedo"]), float(c["amplitude"]),
                                  float(c.get("pulse_amp", 0.0)),
                                  float(c.get("pulse_freq", 0.0)),
                                  float(c.get("pulse_phase", 0.0)))
                      for c in d["capsules"]],
            motions=[JointMotion(int(m["joint"]), tuple(m["axis"]),
                                 float(m["amplitude"]), float(m["frequency"]),
                                 float(m.get("phase", 0.0)))
                     for m in d["motions"]],
            camera_radius=float(d["camera_radius"]),
            camera_elevation_deg=float(d.get("camera_elevation_deg", 12.0)),
            camera_revolutions=float(d.get("camera_revolutions", 1.0)),
            camera_fit=float(d.get("camera_fit", 0.85)),
            canonical_frame=int(d.get("canonical_frame", -1)),
            pose_noise_sigma=float(d.get("pose_noise_sigma", 0.0)),
            bbox_margin=float(d.get("bbox_margin", 0.15)),
        )

    @classmethod
    def from_json(cls, path):
        with open(path) as f:
            return cls.from_dict(json.load(f))


def builtin_scene_dir() -> Path:
    return Path(__file__).parent / "scenes"


def resolve_scene_spec(name_or_path) -> SyntheticSceneSpec:
    """Load a spec from a JSON file path or by bundled scene name."""
    p = Path(name_or_path)
    if p.exists():
        return SyntheticSceneSpec.from_json(p)
    bundled = builtin_scene_dir() / f"{name_or_path}.json"
    if bundled.exists():
        return SyntheticSceneSpec.from_json(bundled)
    raise ContractError(f"no scene spec file or bundled scene named {name_or_path!r}")


# ---------------------------------------------------------------------------
# posed geometry
# ---------------------------------------------------------------------------

class AnalyticScene:
    """Closed-form articulated scene: hard-edged capsules attached to bones."""

    def __init__(self, spec: SyntheticSceneSpec):
        self.spec = spec
        self.topology = spec.topology

    def pose_at(self, t: float) -> Pose:
        K = len(self.spec.parents)
        omega = np.zeros((K, 3), dtype=np.float32)
        for m in self.spec.motions:
            ph = 2.0 * np.pi * m.frequency * t / self.spec.frame_count + m.phase
            axis = np.asarray(m.axis, dtype=np.float32)
            omega[m.joint] += axis * (m.amplitude * np.sin(ph))
        return Pose(np.asarray(self.spec.rest_offsets, dtype=np.float32), omega)

    def capsule_segments(self, t: float):
        """Per capsule: (endpoint a, endpoint b, radius, albedo, amplitude)."""
        pose = self.pose_at(t)
        joints = joint_world_positions(pose, self.topology)
        out = []
        for c in self.spec.capsules:
            a, b = self.topology.bones[c.bone]
            out.append((joints[a], joints[b], c.radius_at(t, self.spec.frame_count),
                        np.asarray(c.albedo, dtype=np.float64), c.amplitude))
        return out

    def density(self, pts, t: float):
        """(sigma [N], rgb [N,3]) of the hard-capsule field at frame t."""
        pts = np.asarray(pts, dtype=np.float64).reshape(-1, 3)
        sigma = np.zeros(len(pts))
        rgb_num = np.zeros((len(pts), 3))
        for a, b, radius, albedo, amp in self.capsule_segments(t):
            d = _point_segment_distance(pts, a, b)
            inside = (d < radius).astype(np.float64)
            sigma += amp * inside
            rgb_num += (amp * inside)[:, None] * albedo
        rgb = np.where(sigma[:, None] > 0, rgb_num / np.maximum(sigma[:, None], 1e-12),
                       0.0)
        return sigma, rgb

    def canonical_bbox(self):
        """Axis-aligned box around the canonical-pose subject with margin for
        capsule radii, pulsation, and the bone-prior falloff."""
        t = self.spec.canonical_frame
        pts = []
        pad = 0.0
        for a, b, radius, _, _ in self.capsule_segments(t):
            pts += [a, b]
            pad = max(pad, radius)
        pts = np.asarray(pts)
        pulse = max((c.pulse_amp for c in self.spec.capsules), default=0.0)
        margin = pad * (1.0 + pulse) + self.spec.bbox_margin
        return (pts.min(axis=0) - margin).astype(np.float32), \
               (pts.max(axis=0) + margin).astype(np.float32)

    def world_bound(self):
        """Center and radius of a sphere covering the subject in every frame."""
        pts, pad = [], 0.0
        for t in range(self.spec.frame_count):
            for a, b, radius, _, _ in self.capsule_segments(t):
                pts += [a, b]
                pad = max(pad, radius)
        pts = np.asarray(pts)
        center = (pts.min(axis=0) + pts.max(axis=0)) / 2.0
        radius = np.linalg.norm(pts - center, axis=1).max() + pad * 1.5
        return center, float(radius)

    def camera_at(self, t: float) -> Camera:
        s = self.spec
        center, rb = self.world_bound()
        theta = 2.0 * np.pi * s.camera_revolutions * t / s.frame_count
        phi = np.deg2rad(s.camera_elevation_deg)
        eye = center + s.camera_radius * np.array(
            [np.cos(theta) * np.cos(phi), np.sin(theta) * np.cos(phi), np.sin(phi)])
        focal = 0.5 * s.image_size * s.camera_radius * s.camera_fit / rb
        near = max(0.05, s.camera_radius - 1.3 * rb)
        far = s.camera_radius + 1.3 * rb
        return look_at_camera(eye, center, (0.0, 0.0, 1.0), focal,
                              s.image_size, s.image_size, near, far)


def _point_segment_distance(pts, a, b):
    ab = b - a
    denom = float(ab @ ab)
    if denom < 1e-12:
        return np.linalg.norm(pts - a, axis=-1)
    tt = np.clip(((pts - a) @ ab) / denom, 0.0, 1.0)
    return np.linalg.norm(pts - (a + tt[:, None] * ab), axis=-1)


# ---------------------------------------------------------------------------
# brute-force rendering (the oracle)
# ---------------------------------------------------------------------------

def analytic_render(scene: AnalyticScene, camera: Camera, t: float,
                    samples: int = DEFAULT_ORACLE_SAMPLES):
    """Brute-force volume rendering of the closed-form density.

    Midpoint depth sampling at high sample count; returns (rgb [H,W,3],
    alpha [H,W]) as float64 in [0, 1]. Deterministic.
    """
    w, h = camera.width, camera.height
    vs, us = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    pixels = np.stack([us.reshape(-1), vs.reshape(-1)], axis=-1)
    from .render import generate_rays
    origins, dirs = generate_rays(camera, pixels)
    dz = (camera.far - camera.near) / samples
    z = camera.near + (np.arange(samples) + 0.5) * dz
    rgb_img = np.zeros((h * w, 3))
    alpha_img = np.zeros(h * w)
    chunk = 2048
    for lo in range(0, h * w, chunk):
        o = origins[lo:lo + chunk].astype(np.float64)
        d = dirs[lo:lo + chunk].astype(np.float64)
        pts = o[:, None, :] + z[None, :, None] * d[:, None, :]
        sigma, rgb = scene.density(pts.reshape(-1, 3), t)
        sigma = sigma.reshape(len(o), samples)
        rgb = rgb.reshape(len(o), samples, 3)
        alpha = 1.0 - np.exp(-sigma * dz)
        trans = np.ones_like(alpha)
        trans[:, 1:] = np.cumprod(1.0 - alpha[:, :-1], axis=1)
        weights = alpha * trans
        alpha_img[lo:lo + chunk] = weights.sum(axis=1)
        rgb_img[lo:lo + chunk] = (weights[..., None] * rgb).sum(axis=1)
    return rgb_img.reshape(h, w, 3), alpha_img.reshape(h, w)


def generate_synthetic_sequence(spec: SyntheticSceneSpec,
                                oracle_samples: int = DEFAULT_ORACLE_SAMPLES):
    """Render every frame of the spec analytically and package the result as
    a dataset; poses are recorded exactly unless pose noise is requested."""
    from .data import SequenceDataset
    scene = AnalyticScene(spec)
    rng = np.random.default_rng(spec.seed)
    frames, masks, cameras, poses = [], [], [], []
    for t in range(spec.frame_count):
        cam = scene.camera_at(t)
        rgb, alpha = analytic_render(scene, cam, t, samples=oracle_samples)
        frames.append(np.clip(rgb, 0.0, 1.0).astype(np.float32))
        masks.append((alpha > 0.5).astype(np.uint8))
        cameras.append(cam)
        pose = scene.pose_at(t)
        if spec.pose_noise_sigma > 0:
            pose = Pose(pose.joints,
                        pose.omega + rng.normal(0.0, spec.pose_noise_sigma,
                                                size=pose.omega.shape)
                        .astype(np.float32))
        poses.append(pose)
    bb_min, bb_max = scene.canonical_bbox()
    ds = SequenceDataset(frames=frames, masks=masks, cameras=cameras, poses=poses,
                         time_indices=list(range(spec.frame_count)),
                         t_c=spec.canonical_frame, topology=scene.topology,
                         bbox_min=bb_min, bbox_max=bb_max,
                         synth_spec=spec.to_dict(), analytic=scene)
    return ds
