"""Bias-corrected Adam over a named parameter store."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .params import ParamStore
from .tensor import ContractError

__all__ = ["AdamState", "adam_update"]


@dataclass
class AdamState:
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)  # name -> first moment
    v: dict = field(default_factory=dict)  # name -> second moment

    def moments_for(self, name: str, shape) -> tuple:
        if name not in self.m:
            self.m[name] = np.zeros(shape, dtype=np.float32)
            self.v[name] = np.zeros(shape, dtype=np.float32)
        return self.m[name], self.v[name]


def adam_update(params: ParamStore, grads: dict, state: AdamState) -> AdamState:
    """One optimizer step, in place. Frozen parameters must not appear in
    `grads`; their values (and moments) are untouched bit for bit. Parameters
    are visited in name order for reproducibility."""
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name in sorted(grads):
        p = params[name]
        if p.frozen or not p.trainable:
            raise ContractError(f"gradient supplied for frozen parameter {name}")
        g = grads[name]
        if g.shape != p.value.shape:
            raise ContractError(
                f"gradient shape {g.shape} != parameter shape {p.value.shape} for {name}")
        m, v = state.moments_for(name, p.value.shape)
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        m_hat = m / c1
        v_hat = v / c2
        p.value = p.value - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return state
