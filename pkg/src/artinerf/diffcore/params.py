"""Named trainable parameters and the store the optimizer walks."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, ContractError, backward, find_first_nonfinite

__all__ = ["Parameter", "ParamStore", "forward_backward"]


class Parameter:
    """A named leaf tensor with trainable/frozen flags.

    Frozen parameters still participate in the forward pass but receive no
    update from the optimizer; the delayed-optimization schedule toggles the
    flag over the course of training.
    """

    __slots__ = ("name", "tensor", "trainable", "frozen")

    def __init__(self, name: str, value: np.ndarray, trainable: bool = True):
        self.name = name
        self.tensor = Tensor(np.asarray(value, dtype=np.float32), requires_grad=trainable)
        self.tensor.requires_grad = trainable
        self.trainable = trainable
        self.frozen = False

    @property
    def value(self) -> np.ndarray:
        return self.tensor.data

    @value.setter
    def value(self, v):
        self.tensor.data = np.asarray(v, dtype=self.tensor.data.dtype)

    def __repr__(self):
        return f"Parameter({self.name}, shape={self.value.shape}, frozen={self.frozen})"


class ParamStore:
    """Ordered mapping of unique parameter names to Parameters."""

    def __init__(self):
        self._params: dict[str, Parameter] = {}

    def add(self, name: str, value, trainable: bool = True) -> Parameter:
        if name in self._params:
            raise ContractError(f"duplicate parameter name: {name}")
        p = Parameter(name, value, trainable)
        self._params[name] = p
        return p

    def __getitem__(self, name: str) -> Parameter:
        return self._params[name]

    def __contains__(self, name) -> bool:
        return name in self._params

    def __iter__(self):
        return iter(self._params.values())

    def __len__(self):
        return len(self._params)

    def names(self):
        return list(self._params.keys())

    def set_frozen(self, prefixes) -> None:
        """Freeze exactly the parameters whose name starts with any prefix."""
        for p in self:
            p.frozen = any(p.name.startswith(pre) for pre in prefixes)
            p.tensor.requires_grad = p.trainable and not p.frozen

    def graph_tensor(self, name: str) -> Tensor:
        return self._params[name].tensor

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {p.name: p.value for p in self}


def forward_backward(build, params: ParamStore, check_finite: bool = True):
    """Evaluate a scalar loss and its gradients.

    `build` is a callable taking the store and returning the loss Tensor.
    Returns (loss value, {name: gradient array}) where the dict carries an
    entry for every trainable, non-frozen parameter; parameters the loss never
    reached map to zero arrays. Gradients are harvested in parameter-name
    order so accumulation is reproducible bit for bit.
    """
    loss = build(params)
    if not isinstance(loss, Tensor) or loss.data.size != 1:
        raise ContractError("forward_backward requires a scalar loss tensor")
    if check_finite and not np.all(np.isfinite(loss.data)):
        op = find_first_nonfinite(loss)
        raise ArithmeticError(f"non-finite value produced by op '{op}'")
    leaf_grads = backward(loss)
    grads = {}
    for name in sorted(params.names()):
        p = params[name]
        if not p.trainable or p.frozen:
            continue
        g = leaf_grads.get(p.tensor.uid)
        grads[name] = np.zeros_like(p.value) if g is None else g
    return loss.item(), grads
