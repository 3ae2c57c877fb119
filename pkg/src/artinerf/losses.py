"""Training objectives: reconstruction, pluggable perceptual distance,
BCE-Dice segmentation, cyclic consistency, and the cycle-back-regression
temporal consistency loss, plus their weighted assembly."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diffcore import tensor as T
from .diffcore.tensor import ContractError, Tensor, const

LOG_COLUMNS = ["iter", "total", "mse", "perceptual", "tcl_rend", "can_mse",
               "tcl_deform", "ccl", "seg", "vreg", "b_value"]


def mse_loss(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ContractError(f"mse shapes differ: {a.data.shape} vs {b.data.shape}")
    d = T.sub(a, b)
    return T.tmean(T.mul(d, d))


def cyclic_loss(x_hat: Tensor, x_obs: Tensor) -> Tensor:
    """(1/L) sum_i |x_hat_i - x_i|^2 over positional samples [L, 3]."""
    if x_hat.data.shape != x_obs.data.shape:
        raise ContractError("cyclic loss sample counts differ")
    n = x_hat.data.shape[0]
    d = T.sub(x_hat, x_obs)
    return T.mul(T.tsum(T.mul(d, d)), const(np.float32(1.0 / max(n, 1))))


def bce_dice_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Binary-cross-entropy plus Dice disagreement: BCE + (1 - Dice).

    target must be binary; pred lives in [0, 1] and is clamped to
    [1e-6, 1 - 1e-6] inside the log terms only.
    """
    if pred.data.shape != target.data.shape:
        raise ContractError("mask shapes differ")
    td = target.data
    if not np.all((td == 0) | (td == 1)):
        raise ContractError("segmentation target must be binary")
    p = T.clip(pred, 1e-6, 1.0 - 1e-6)
    bce = T.neg(T.tmean(T.add(T.mul(target, T.log(p)),
                              T.mul(T.sub(const(np.float32(1.0)), target),
                                    T.log(T.sub(const(np.float32(1.0)), p))))))
    inter = T.tsum(T.mul(target, pred))
    denom = T.add(T.tsum(target), T.add(T.tsum(pred), const(np.float32(1e-6))))
    dice = T.div(T.mul(const(np.float32(2.0)), inter), denom)
    return T.add(bce, T.sub(const(np.float32(1.0)), dice))


# ---------------------------------------------------------------------------
# perceptual distance plugins
# ---------------------------------------------------------------------------

class RandomFeaturePerceptual:
    """Multi-scale feature distance through a fixed, seed-generated conv
    stack. The filters are frozen constants, never trained; a real learned
    perceptual metric can be registered under a new plugin name."""

    def __init__(self, seed: int = 0, channels: int = 8, scales: int = 3):
        rng = np.random.default_rng(seed)
        self.filters = []
        c_in = 3
        for _ in range(scales):
            bound = np.sqrt(6.0 / (c_in * 9))
            w = rng.uniform(-bound, bound, size=(channels, c_in, 3, 3)).astype(np.float32)
            self.filters.append(w)
            c_in = channels

    def features(self, img: Tensor):
        """img: [P, P, 3] in [0, 1]. Returns per-scale feature tensors."""
        h = T.transpose(img, (2, 0, 1))
        feats = []
        for i, w in enumerate(self.filters):
            h = T.conv2d(h, const(w), pad=1)
            feats.append(h)
            if i < len(self.filters) - 1:
                h = T.relu(h)
                if min(h.data.shape[1:]) >= 4:
                    h = T.avgpool2d(h, 2)
        return feats

    def loss(self, a: Tensor, b: Tensor) -> Tensor:
        if a.data.shape != b.data.shape:
            raise ContractError("perceptual loss patch shapes differ")
        total = None
        for fa, fb in zip(self.features(a), self.features(b)):
            d = T.sub(fa, fb)
            term = T.tmean(T.mul(d, d))
            total = term if total is None else T.add(total, term)
        return total


PERCEPTUAL_PLUGINS = {
    "random-features": RandomFeaturePerceptual,
}


def make_perceptual(name: str, seed: int = 0):
    if name not in PERCEPTUAL_PLUGINS:
        raise ContractError(f"unknown perceptual plugin {name!r}; "
                            f"known: {sorted(PERCEPTUAL_PLUGINS)}")
    return PERCEPTUAL_PLUGINS[name](seed=seed)


def perceptual_loss(a: Tensor, b: Tensor, plugin) -> Tensor:
    return plugin.loss(a, b)


# ---------------------------------------------------------------------------
# temporal consistency (cycle-back regression)
# ---------------------------------------------------------------------------

@dataclass
class TCLReport:
    beta: np.ndarray
    mu: float
    sigma_sq: float
    loss: Tensor


def tcl(u: Tensor, neighbors, query_index: float, lam: float,
        eps_sigma: float = 1e-6) -> TCLReport:
    """Cycle-back regression over a window of items.

    `neighbors` is the ordered window (flattened vectors) occupying window
    coordinates -k..k (for odd windows; generally position - (w-1)//2) and
    `query_index` is the query's *window coordinate*, usually 0 for the
    centered element. Soft-nearest-neighbor similarities form a distribution
    whose mean is pulled toward the query index; the variance estimate is
    floored at eps_sigma.
    """
    w = len(neighbors)
    if w < 2:
        raise ContractError("temporal-consistency window needs at least two items")
    half = (w - 1) // 2
    coords = np.arange(w, dtype=np.float32) - half
    dists = []
    for v in neighbors:
        d = T.sub(u, v)
        dists.append(T.reshape(T.tsum(T.mul(d, d)), (1,)))
    beta = T.softmax(T.neg(T.concat(dists, axis=0)), axis=0)
    m = const(coords)
    mu = T.tsum(T.mul(beta, m))
    dev = T.sub(m, T.reshape(mu, (1,)))
    var = T.clip(T.tsum(T.mul(beta, T.mul(dev, dev))), eps_sigma, None)
    err = T.sub(const(np.float32(query_index)), mu)
    loss = T.add(T.div(T.mul(err, err), var),
                 T.mul(const(np.float32(0.5 * lam)), T.log(var)))
    return TCLReport(beta=beta.data.copy(), mu=float(mu.data),
                     sigma_sq=float(var.data), loss=loss)


# ---------------------------------------------------------------------------
# assembly
# ---------------------------------------------------------------------------

TERM_NAMES = ("mse", "perceptual", "tcl_rend", "can_mse", "tcl_deform", "ccl",
              "seg", "vreg")


def assemble_losses(terms: dict, weights: dict):
    """Weighted sum of loss terms.

    terms: {name: Tensor or None}; weights: {name: float}. A missing term
    with nonzero weight is an error naming the term. Returns (total Tensor,
    {name: weighted scalar value}).
    """
    total = None
    breakdown = {}
    for name in TERM_NAMES:
        wgt = float(weights.get(name, 0.0))
        term = terms.get(name)
        if wgt == 0.0 or term is None:
            if wgt != 0.0 and terms.get(name, "absent") is None:
                raise ContractError(f"loss term '{name}' required but unavailable")
            breakdown[name] = 0.0
            continue
        scaled = T.mul(term, const(np.float32(wgt))) if wgt != 1.0 else term
        breakdown[name] = float(scaled.data)
        total = scaled if total is None else T.add(total, scaled)
    if total is None:
        total = const(np.float32(0.0))
    return total, breakdown
