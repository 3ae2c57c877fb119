"""Fully-connected stacks with an optional mid-network skip connection."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .params import ParamStore
from .tensor import ContractError, Tensor

__all__ = ["MLPSpec", "build_mlp_params", "mlp_forward"]

_ACTIVATIONS = {
    "relu": T.relu,
    "none": lambda t: t,
}


@dataclass(frozen=True)
class MLPSpec:
    """Layer widths plus where (1-indexed) the skip input re-enters.

    widths[0] is the input width, widths[-1] the output width. At layer
    `skip_layer` the designated skip vector is concatenated to the running
    hidden activation before that layer's affine map, so that layer's weight
    has fan-in widths[skip_layer-1] + skip_width.
    """
    widths: tuple
    activation: str = "relu"
    skip_layer: int = 0      # 0 = no skip
    skip_width: int = 0
    zero_init_last: bool = False

    @property
    def depth(self):
        return len(self.widths) - 1

    def layer_fan_in(self, layer: int) -> int:
        w = self.widths[layer - 1]
        if layer == self.skip_layer:
            w += self.skip_width
        return w

    def validate(self):
        if self.depth < 1:
            raise ContractError("MLPSpec needs at least one layer")
        if self.skip_layer and not (1 <= self.skip_layer <= self.depth):
            raise ContractError(f"skip layer {self.skip_layer} outside depth {self.depth}")
        if self.activation not in _ACTIVATIONS:
            raise ContractError(f"unknown activation {self.activation!r}")


def build_mlp_params(store: ParamStore, prefix: str, spec: MLPSpec,
                     rng: np.random.Generator) -> None:
    """He-uniform weights, zero biases; final layer optionally zeroed."""
    spec.validate()
    for layer in range(1, spec.depth + 1):
        fan_in = spec.layer_fan_in(layer)
        fan_out = spec.widths[layer]
        if spec.zero_init_last and layer == spec.depth:
            w = np.zeros((fan_in, fan_out), dtype=np.float32)
        else:
            bound = np.sqrt(6.0 / fan_in)
            w = rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(np.float32)
        store.add(f"{prefix}.l{layer}.weight", w)
        store.add(f"{prefix}.l{layer}.bias", np.zeros(fan_out, dtype=np.float32))


def mlp_forward(store: ParamStore, prefix: str, spec: MLPSpec, inputs: Tensor,
                skip: Tensor | None = None) -> Tensor:
    """Run the stack on a [N, width_in] batch. Hidden layers use the spec's
    activation; the output layer is linear."""
    if inputs.data.shape[-1] != spec.widths[0]:
        raise ContractError(
            f"{prefix}: input width {inputs.data.shape[-1]} != {spec.widths[0]}")
    if spec.skip_layer:
        if skip is None:
            raise ContractError(f"{prefix}: spec expects a skip input")
        if skip.data.shape[-1] != spec.skip_width:
            raise ContractError(
                f"{prefix}: skip width {skip.data.shape[-1]} != {spec.skip_width}")
    act = _ACTIVATIONS[spec.activation]
    h = inputs
    for layer in range(1, spec.depth + 1):
        if layer == spec.skip_layer:
            h = T.concat([h, skip], axis=1)
        w = store.graph_tensor(f"{prefix}.l{layer}.weight")
        b = store.graph_tensor(f"{prefix}.l{layer}.bias")
        h = T.add(T.matmul(h, w), b)
        if layer < spec.depth:
            h = act(h)
    return h
