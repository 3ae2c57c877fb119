"""Positional/temporal encodings and the learned deformation branches:
pose-guided non-rigid offsets, pose-independent temporal deformation, and the
residual canonical-to-observed transformation.

All three MLPs zero-initialize their final layer, so a fresh model degrades
exactly to rigid skinning: x_c = x_R and x_o = x_R for every sample.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diffcore import tensor as T
from .diffcore.mlp import MLPSpec, build_mlp_params, mlp_forward
from .diffcore.params import ParamStore
from .diffcore.tensor import ContractError, Tensor, const


@dataclass(frozen=True)
class PositionalEncoder:
    """NeRF-style frequency encoding: per coordinate p emits
    (sin(2^l pi p), cos(2^l pi p)) for l = 0..freqs-1."""
    freqs: int
    include_input: bool = True

    def width(self, in_width: int) -> int:
        return in_width * 2 * self.freqs + (in_width if self.include_input else 0)

    def scales(self) -> np.ndarray:
        return (2.0 ** np.arange(self.freqs) * np.pi).astype(np.float32)


def positional_encode(x: Tensor, enc: PositionalEncoder) -> Tensor:
    """Encode a [N, d] batch to [N, enc.width(d)]; coordinate-major layout
    (all frequencies of coordinate 0, then coordinate 1, ...)."""
    return T.posenc(x, enc.scales(), include_input=enc.include_input)


# ---------------------------------------------------------------------------
# learnable temporal vectors
# ---------------------------------------------------------------------------

TEMPORAL_DIM = 5


@dataclass
class TemporalVectorTable:
    """One learnable vector per frame, initialized on a ramp proportional to
    the frame's time index and anchored there by a quadratic penalty."""
    name: str
    anchor: np.ndarray          # immutable copy of the initialization
    canonical_frame: int

    @property
    def frame_count(self):
        return self.anchor.shape[0]


def init_temporal_table(store: ParamStore, name: str, time_indices,
                        canonical_frame: int) -> TemporalVectorTable:
    times = np.asarray(time_indices, dtype=np.float32)
    span = max(float(times.max()), 1.0)
    ramp = (times / span)[:, None] * np.ones((1, TEMPORAL_DIM), dtype=np.float32)
    store.add(name, ramp.astype(np.float32))
    if not 0 <= canonical_frame < len(times):
        raise ContractError("canonical frame outside table range")
    return TemporalVectorTable(name, ramp.astype(np.float32).copy(), canonical_frame)


def temporal_vector(store: ParamStore, table: TemporalVectorTable, t) -> Tensor:
    """Row t of the table; fractional t is linearly interpolated between the
    neighbouring rows (used when rendering in-between time instants)."""
    tf = float(t)
    if not 0 <= tf <= table.frame_count - 1:
        raise ContractError(f"frame {t} outside table range")
    lo = int(np.floor(tf))
    hi = min(lo + 1, table.frame_count - 1)
    frac = tf - lo
    rows = T.take_rows(store.graph_tensor(table.name), np.array([lo, hi]))
    if frac == 0.0:
        return rows[0:1]
    return T.add(T.mul(rows[0:1], const(np.float32(1.0 - frac))),
                 T.mul(rows[1:2], const(np.float32(frac))))


def regularize_temporal_vectors(store: ParamStore, table: TemporalVectorTable,
                                weight: float) -> Tensor:
    """weight * sum |v_t - anchor_t|^2, keeping the vectors near their ramp."""
    diff = T.sub(store.graph_tensor(table.name), const(table.anchor))
    return T.mul(T.tsum(T.mul(diff, diff)), const(np.float32(weight)))


# ---------------------------------------------------------------------------
# deformation MLPs
# ---------------------------------------------------------------------------

@dataclass
class DeformNets:
    """Specs and encoder setup shared by the deformation branches."""
    pos_enc: PositionalEncoder
    time_enc: PositionalEncoder
    nonrigid: MLPSpec
    temporal: MLPSpec
    canon2obs: MLPSpec
    joint_count: int


def build_deform_nets(store: ParamStore, prefix: str, joint_count: int,
                      hidden: int, pos_freqs: int, time_freqs: int,
                      rng: np.random.Generator) -> DeformNets:
    pos_enc = PositionalEncoder(pos_freqs)
    time_enc = PositionalEncoder(time_freqs)
    pw = pos_enc.width(3)
    tw = time_enc.width(TEMPORAL_DIM)
    # non-rigid: encoded rigid-skinned point + flattened local rotations,
    # with the encoded point re-entering at layer 5 of 6
    nonrigid = MLPSpec(widths=(pw + 3 * joint_count,) + (hidden,) * 5 + (3,),
                       skip_layer=5, skip_width=pw, zero_init_last=True)
    # temporal: encoded observed/canonical-estimate points and both temporal
    # vectors; the observed encodings re-enter at layer 5 of 8
    temporal = MLPSpec(widths=(2 * pw + 2 * tw,) + (hidden,) * 7 + (3,),
                       skip_layer=5, skip_width=pw + tw, zero_init_last=True)
    # canonical-to-observed: same stack without the temporal vectors
    canon2obs = MLPSpec(widths=(pw,) + (hidden,) * 7 + (3,),
                        skip_layer=5, skip_width=pw, zero_init_last=True)
    build_mlp_params(store, f"{prefix}.nonrigid", nonrigid, rng)
    build_mlp_params(store, f"{prefix}.temporal.mlp", temporal, rng)
    build_mlp_params(store, f"{prefix}.canon2obs", canon2obs, rng)
    return DeformNets(pos_enc, time_enc, nonrigid, temporal, canon2obs, joint_count)


def nonrigid_offset(store: ParamStore, prefix: str, nets: DeformNets,
                    x_r: Tensor, omega: np.ndarray) -> Tensor:
    """Pose-guided offset added to the rigid deformation. `omega` is the
    frame's K local rotations (no global component)."""
    omega = np.asarray(omega, dtype=np.float32).reshape(-1)
    if omega.size != 3 * nets.joint_count:
        raise ContractError(f"expected {3 * nets.joint_count} rotation values, "
                            f"got {omega.size}")
    enc = positional_encode(x_r, nets.pos_enc)
    n = x_r.data.shape[0]
    om = T.broadcast_to(const(omega.reshape(1, -1)), (n, omega.size))
    return mlp_forward(store, f"{prefix}.nonrigid", nets.nonrigid,
                       T.concat([enc, om], axis=1), skip=enc)


def temporal_deform(store: ParamStore, prefix: str, nets: DeformNets,
                    table: TemporalVectorTable, x_o: Tensor, x_c_est: Tensor,
                    t_obs) -> Tensor:
    """Pose-independent deformation conditioned on the learnable temporal
    vectors of the observed frame and the canonical frame."""
    n = x_o.data.shape[0]
    v_o = temporal_vector(store, table, t_obs)
    v_c = temporal_vector(store, table, table.canonical_frame)
    enc_xo = positional_encode(x_o, nets.pos_enc)
    enc_xc = positional_encode(x_c_est, nets.pos_enc)
    enc_vo = positional_encode(v_o, nets.time_enc)
    enc_vc = positional_encode(v_c, nets.time_enc)
    enc_vo_b = T.broadcast_to(enc_vo, (n, enc_vo.data.shape[1]))
    enc_vc_b = T.broadcast_to(enc_vc, (n, enc_vc.data.shape[1]))
    inputs = T.concat([enc_xo, enc_xc, enc_vo_b, enc_vc_b], axis=1)
    skip = T.concat([enc_xo, enc_vo_b], axis=1)
    return mlp_forward(store, f"{prefix}.temporal.mlp", nets.temporal, inputs,
                       skip=skip)


def aggregate_canonical(x_r: Tensor, delta_nr: Tensor | None,
                        delta_t: Tensor | None) -> Tensor:
    """Predicted canonical point: (x_R + nonrigid offset) + temporal term."""
    out = x_r
    if delta_nr is not None:
        out = T.add(out, delta_nr)
    if delta_t is not None:
        out = T.add(out, delta_t)
    return out


def canonical_to_observed(store: ParamStore, prefix: str, nets: DeformNets,
                          x_c: Tensor) -> Tensor:
    """Residual map back to the observed frame: x_c + MLP(enc(x_c))."""
    enc = positional_encode(x_c, nets.pos_enc)
    res = mlp_forward(store, f"{prefix}.canon2obs", nets.canon2obs, enc, skip=enc)
    return T.add(x_c, res)
