"""Versioned binary container for parameters and optimizer state.

Layout (all integers little-endian uint32):

    magic "FLEXNERF-CKPT" | version | block count |
    per block: name length | name (utf-8) | rank | extents... | float32 payload

Blocks are written in sorted-name order so identical state always produces
byte-identical files. Optimizer moments live under the "optim/" prefix;
non-array bookkeeping (RNG state, counters) is encoded into float blocks by
the caller.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

__all__ = ["CHECKPOINT_MAGIC", "CHECKPOINT_VERSION", "CheckpointError",
           "write_blocks", "read_blocks"]

CHECKPOINT_MAGIC = b"FLEXNERF-CKPT"
CHECKPOINT_VERSION = 1


class CheckpointError(IOError):
    pass


def write_blocks(path, blocks: dict) -> None:
    """blocks: {name: float32 ndarray}. Writes atomically via a temp file."""
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<II", CHECKPOINT_VERSION, len(blocks)))
        for name in sorted(blocks):
            arr = np.ascontiguousarray(blocks[name], dtype="<f4")
            nb = name.encode("utf-8")
            f.write(struct.pack("<I", len(nb)))
            f.write(nb)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.tobytes())
    tmp.replace(path)


def _read_exact(f, n, what):
    buf = f.read(n)
    if len(buf) != n:
        raise CheckpointError(f"truncated checkpoint while reading {what}")
    return buf


def read_blocks(path) -> dict:
    path = Path(path)
    with open(path, "rb") as f:
        magic = f.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointError(f"bad magic string in {path}: {magic!r}")
        version, count = struct.unpack("<II", _read_exact(f, 8, "header"))
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(
                f"unsupported checkpoint version: expected {CHECKPOINT_VERSION}, "
                f"found {version}")
        blocks = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<I", _read_exact(f, 4, "name length"))
            name = _read_exact(f, nlen, "name").decode("utf-8")
            (rank,) = struct.unpack("<I", _read_exact(f, 4, "rank"))
            shape = struct.unpack(f"<{rank}I", _read_exact(f, 4 * rank, "extents"))
            n = int(np.prod(shape)) if rank else 1
            payload = _read_exact(f, 4 * n, f"payload of {name}")
            blocks[name] = np.frombuffer(payload, dtype="<f4").reshape(shape).copy()
        return blocks
