"""Dataset model and disk layout, sparse-view resampling, and image metrics.

On-disk layout: `manifest.json` next to `frames/%05d.png` (8-bit RGB) and
`masks/%05d.png` (8-bit single channel, 0 or 255).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .diffcore.tensor import ContractError
from .render import Camera
from .skeleton import Pose, SkeletonTopology

SCHEMA_VERSION = 1
PSNR_CAP = 99.0


class DatasetError(IOError):
    pass


@dataclass
class SequenceDataset:
    """Monocular sequence: one frame, mask, camera, and pose per time step."""
    frames: list                   # [H, W, 3] float32 in [0, 1]
    masks: list                    # [H, W] uint8 in {0, 1}
    cameras: list
    poses: list
    time_indices: list
    t_c: int                       # canonical frame position within this dataset
    topology: SkeletonTopology
    bbox_min: np.ndarray
    bbox_max: np.ndarray
    synth_spec: dict | None = None
    analytic: object = None        # retained ground-truth scene, when synthetic

    def __post_init__(self):
        counts = {len(self.frames), len(self.masks), len(self.cameras),
                  len(self.poses), len(self.time_indices)}
        if len(counts) != 1:
            raise DatasetError(f"inconsistent per-frame counts: {counts}")
        if not 0 <= self.t_c < len(self.frames):
            raise DatasetError("canonical frame index out of range")
        for f, m in zip(self.frames, self.masks):
            if f.shape[:2] != m.shape:
                raise DatasetError("mask does not align with its frame")
        self.bbox_min = np.asarray(self.bbox_min, dtype=np.float32)
        self.bbox_max = np.asarray(self.bbox_max, dtype=np.float32)

    @property
    def frame_count(self):
        return len(self.frames)

    @property
    def image_size(self):
        h, w = self.frames[0].shape[:2]
        return w, h

    def canonical_pose(self) -> Pose:
        return self.poses[self.t_c]


def _pose_to_dict(p: Pose):
    d = {"joints": p.joints.reshape(-1).tolist(),
         "omega": p.omega.reshape(-1).tolist()}
    if p.global_rotation is not None:
        d["global_rotation"] = p.global_rotation.tolist()
    if p.global_translation is not None:
        d["global_translation"] = p.global_translation.tolist()
    return d


def _pose_from_dict(d):
    return Pose(np.asarray(d["joints"], dtype=np.float32).reshape(-1, 3),
                np.asarray(d["omega"], dtype=np.float32).reshape(-1, 3),
                np.asarray(d["global_rotation"], dtype=np.float32)
                if "global_rotation" in d else None,
                np.asarray(d["global_translation"], dtype=np.float32)
                if "global_translation" in d else None)


def save_dataset(ds: SequenceDataset, path) -> None:
    path = Path(path)
    (path / "frames").mkdir(parents=True, exist_ok=True)
    (path / "masks").mkdir(parents=True, exist_ok=True)
    for i, (frame, mask) in enumerate(zip(ds.frames, ds.masks)):
        Image.fromarray((np.clip(frame, 0, 1) * 255).round().astype(np.uint8)) \
            .save(path / "frames" / f"{i:05d}.png")
        Image.fromarray((mask.astype(np.uint8) * 255)) \
            .save(path / "masks" / f"{i:05d}.png")
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "frame_count": ds.frame_count,
        "t_c": ds.t_c,
        "time_indices": [int(t) for t in ds.time_indices],
        "topology": {"parents": ds.topology.parents,
                     "bones": [list(b) for b in ds.topology.bones]},
        "bbox_min": ds.bbox_min.tolist(),
        "bbox_max": ds.bbox_max.tolist(),
        "cameras": [c.to_dict() for c in ds.cameras],
        "poses": [_pose_to_dict(p) for p in ds.poses],
    }
    if ds.synth_spec is not None:
        manifest["synth_spec"] = ds.synth_spec
    with open(path / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=1)


def load_dataset(path) -> SequenceDataset:
    path = Path(path)
    mpath = path / "manifest.json"
    if not mpath.exists():
        raise DatasetError(f"no manifest.json under {path}")
    with open(mpath) as f:
        man = json.load(f)
    version = man.get("schema_version")
    if version != SCHEMA_VERSION:
        raise DatasetError(f"unknown dataset schema version: expected "
                           f"{SCHEMA_VERSION}, found {version}")
    n = man["frame_count"]
    frames, masks = [], []
    for i in range(n):
        fp = path / "frames" / f"{i:05d}.png"
        mp = path / "masks" / f"{i:05d}.png"
        if not fp.exists() or not mp.exists():
            raise DatasetError(f"manifest claims {n} frames but file {i:05d} is missing")
        frames.append(np.asarray(Image.open(fp), dtype=np.float32) / 255.0)
        masks.append((np.asarray(Image.open(mp)) > 127).astype(np.uint8))
    extra = path / "frames" / f"{n:05d}.png"
    if extra.exists():
        raise DatasetError("more frame files on disk than the manifest declares")
    ds = SequenceDataset(
        frames=frames, masks=masks,
        cameras=[Camera.from_dict(c) for c in man["cameras"]],
        poses=[_pose_from_dict(p) for p in man["poses"]],
        time_indices=list(man["time_indices"]),
        t_c=int(man["t_c"]),
        topology=SkeletonTopology(man["topology"]["parents"],
                                  [tuple(b) for b in man["topology"]["bones"]]),
        bbox_min=np.asarray(man["bbox_min"], dtype=np.float32),
        bbox_max=np.asarray(man["bbox_max"], dtype=np.float32),
        synth_spec=man.get("synth_spec"),
    )
    if ds.synth_spec is not None:
        from .synthetic import AnalyticScene, SyntheticSceneSpec
        ds.analytic = AnalyticScene(SyntheticSceneSpec.from_dict(ds.synth_spec))
    return ds


def sparsify(ds: SequenceDataset, fraction: float) -> SequenceDataset:
    """Keep every k-th frame so roughly `fraction` of frames remain; the
    canonical frame is always retained and time indices are preserved."""
    if not 0 < fraction <= 1.0:
        raise ContractError("sparsify fraction must be in (0, 1]")
    if fraction == 1.0:
        return ds
    k = max(1, round(1.0 / fraction))
    keep = list(range(0, ds.frame_count, k))
    if ds.t_c not in keep:
        keep = sorted(keep + [ds.t_c])
    if len(keep) < 2:
        raise ContractError("sparsify would leave fewer than two frames")
    return SequenceDataset(
        frames=[ds.frames[i] for i in keep],
        masks=[ds.masks[i] for i in keep],
        cameras=[ds.cameras[i] for i in keep],
        poses=[ds.poses[i] for i in keep],
        time_indices=[ds.time_indices[i] for i in keep],
        t_c=keep.index(ds.t_c),
        topology=ds.topology, bbox_min=ds.bbox_min, bbox_max=ds.bbox_max,
        synth_spec=ds.synth_spec, analytic=ds.analytic,
    )


# ---------------------------------------------------------------------------
# image metrics
# ---------------------------------------------------------------------------

@dataclass
class MetricsRow:
    view_id: object
    psnr: float
    ssim: float


def psnr(a, b) -> float:
    """Peak signal-to-noise ratio in dB for images in [0, 1], capped at 99."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ContractError("psnr inputs must share a shape")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(1.0 / mse))


_LUMA = np.array([0.299, 0.587, 0.114])


def _gaussian_kernel(size=11, sigma=1.5):
    x = np.arange(size) - (size - 1) / 2.0
    k = np.exp(-(x * x) / (2 * sigma * sigma))
    return k / k.sum()


def _filter_valid(img, k):
    """Separable valid-mode correlation with a 1-d kernel along both axes."""
    size = len(k)
    h, w = img.shape
    out = np.zeros((h - size + 1, w), dtype=np.float64)
    for i in range(size):
        out += k[i] * img[i:i + h - size + 1, :]
    out2 = np.zeros((h - size + 1, w - size + 1), dtype=np.float64)
    for j in range(size):
        out2 += k[j] * out[:, j:j + w - size + 1]
    return out2


def ssim(a, b, window=11, sigma=1.5) -> float:
    """Single-scale SSIM with a Gaussian window over luma, averaged over
    valid window positions."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ContractError("ssim inputs must share a shape")
    if a.ndim == 3:
        a = a @ _LUMA
        b = b @ _LUMA
    if min(a.shape) < window:
        raise ContractError(f"image smaller than the {window}x{window} ssim window")
    k = _gaussian_kernel(window, sigma)
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    mu_a = _filter_valid(a, k)
    mu_b = _filter_valid(b, k)
    var_a = _filter_valid(a * a, k) - mu_a ** 2
    var_b = _filter_valid(b * b, k) - mu_b ** 2
    cov = _filter_valid(a * b, k) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))
