"""Minimal reverse-mode automatic differentiation over dense numpy arrays.

Every trainable computation in the package is expressed as a graph of the
primitives defined here. Ops are batched: a graph node holds a whole array
(all samples of a ray batch, a full weight volume, ...), so graphs stay small
while the heavy lifting happens inside numpy/BLAS.

Gradient accumulation is deterministic: nodes are visited in reverse
construction order and numpy reductions are used throughout, so two backward
passes over the same graph produce bit-identical gradients.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tensor", "ContractError", "NumericError", "as_tensor", "const",
    "no_grad", "grad_enabled", "backward",
]


class ContractError(ValueError):
    """An operation was called outside its contract (shape/range violation)."""


class NumericError(ArithmeticError):
    """A forward pass produced NaN/Inf; message names the offending op."""


_GRAD_ENABLED = [True]


class no_grad:
    """Context manager: build no graph, just evaluate (for rendering/eval)."""

    def __enter__(self):
        _GRAD_ENABLED.append(False)
        return self

    def __exit__(self, *exc):
        _GRAD_ENABLED.pop()
        return False


def grad_enabled() -> bool:
    return _GRAD_ENABLED[-1]


_NODE_COUNTER = [0]


class Tensor:
    """A node in the computation graph wrapping a numpy array."""

    __slots__ = ("data", "parents", "bwd", "grad", "requires_grad", "op", "uid")

    def __init__(self, data, parents=(), bwd=None, requires_grad=None, op="const"):
        if isinstance(data, np.ndarray):
            self.data = data
        elif isinstance(data, np.generic):  # numpy scalar: keep its dtype
            self.data = np.asarray(data)
        else:
            self.data = np.asarray(data, dtype=np.float32)
        if requires_grad is None:
            requires_grad = any(p.requires_grad for p in parents)
        if not grad_enabled():
            parents, bwd, requires_grad = (), None, False
        self.parents = parents if requires_grad else ()
        self.bwd = bwd if requires_grad else None
        self.requires_grad = requires_grad
        self.grad = None
        self.op = op
        _NODE_COUNTER[0] += 1
        self.uid = _NODE_COUNTER[0]

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on non-scalar tensor of shape {self.data.shape}")
        return float(self.data.reshape(()))

    def __repr__(self):
        return f"Tensor(op={self.op}, shape={self.data.shape}, grad={self.requires_grad})"

    # Arithmetic sugar; all dispatch to the module-level primitives.
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=dtype if dtype is not None else np.float32)
    return Tensor(arr, op="const")


def const(x, dtype=None) -> Tensor:
    """An explicitly non-differentiable tensor."""
    t = as_tensor(x, dtype)
    t.requires_grad = False
    return t


def _accum(parent: Tensor, g: np.ndarray):
    if not parent.requires_grad:
        return
    if parent.grad is None:
        parent.grad = np.array(g, dtype=parent.data.dtype, copy=True)
    else:
        parent.grad += g


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Reduce a broadcasted gradient back down to `shape`."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def backward(loss: Tensor) -> dict:
    """Reverse sweep from a scalar loss. Returns {leaf tensor uid: grad array}.

    Visits nodes in reverse topological (construction) order; leaves keep
    their .grad set until the caller harvests them.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward() requires a scalar loss, got shape {loss.data.shape}")
    # Iterative topo sort (graphs can exceed the recursion limit).
    topo, visited, stack = [], set(), [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if node.uid in visited or not node.requires_grad:
            continue
        visited.add(node.uid)
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and p.uid not in visited:
                stack.append((p, False))
    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node.bwd is not None and node.grad is not None:
            node.bwd(node.grad)
    grads = {}
    for node in topo:
        if node.bwd is None and node.grad is not None:
            grads[node.uid] = node.grad
    for node in topo:
        node.grad = None
    return grads


def find_first_nonfinite(loss: Tensor):
    """Walk the graph under `loss` in construction order; name the first op
    whose output contains NaN/Inf. Returns None if everything is finite."""
    seen, stack, nodes = set(), [loss], []
    while stack:
        n = stack.pop()
        if n.uid in seen:
            continue
        seen.add(n.uid)
        nodes.append(n)
        stack.extend(n.parents)
    for n in sorted(nodes, key=lambda t: t.uid):
        if not np.all(np.isfinite(n.data)):
            return n.op
    return None


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data + b.data, (a, b), op="add")

    def bwd(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    out.bwd = bwd
    return out


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data - b.data, (a, b), op="sub")

    def bwd(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(-g, b.data.shape))

    out.bwd = bwd
    return out


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data * b.data, (a, b), op="mul")

    def bwd(g):
        _accum(a, _unbroadcast(g * b.data, a.data.shape))
        _accum(b, _unbroadcast(g * a.data, b.data.shape))

    out.bwd = bwd
    return out


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data / b.data, (a, b), op="div")

    def bwd(g):
        _accum(a, _unbroadcast(g / b.data, a.data.shape))
        _accum(b, _unbroadcast(-g * out.data / b.data, b.data.shape))

    out.bwd = bwd
    return out


def neg(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(-a.data, (a,), op="neg")
    out.bwd = lambda g: _accum(a, -g)
    return out


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ContractError(f"matmul expects 2-d operands, got {a.data.shape} @ {b.data.shape}")
    out = Tensor(a.data @ b.data, (a, b), op="matmul")

    def bwd(g):
        _accum(a, g @ b.data.T)
        _accum(b, a.data.T @ g)

    out.bwd = bwd
    return out


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims), (a,), op="sum")

    def bwd(g):
        if axis is None:
            _accum(a, np.broadcast_to(g, a.data.shape))
        else:
            if not keepdims:
                g = np.expand_dims(g, axis)
            _accum(a, np.broadcast_to(g, a.data.shape))

    out.bwd = bwd
    return out


def tmean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else a.data.shape[axis]
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / n)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.exp(a.data), (a,), op="exp")
    out.bwd = lambda g: _accum(a, g * out.data)
    return out


def log(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.log(a.data), (a,), op="log")
    out.bwd = lambda g: _accum(a, g / a.data)
    return out


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.sqrt(a.data), (a,), op="sqrt")
    out.bwd = lambda g: _accum(a, g * (0.5 / out.data))
    return out


def sin(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.sin(a.data), (a,), op="sin")
    out.bwd = lambda g: _accum(a, g * np.cos(a.data))
    return out


def cos(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.cos(a.data), (a,), op="cos")
    out.bwd = lambda g: _accum(a, -g * np.sin(a.data))
    return out


def relu(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.maximum(a.data, 0), (a,), op="relu")
    out.bwd = lambda g: _accum(a, g * (a.data > 0))
    return out


def softplus(a) -> Tensor:
    a = as_tensor(a)
    # log(1 + e^x) computed stably as max(x, 0) + log1p(e^{-|x|})
    d = a.data
    out_data = np.maximum(d, 0) + np.log1p(np.exp(-np.abs(d)))
    out = Tensor(out_data, (a,), op="softplus")

    def bwd(g):
        _accum(a, g / (1.0 + np.exp(-d)))

    out.bwd = bwd
    return out


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    d = a.data
    s = np.where(d >= 0, 1.0 / (1.0 + np.exp(-np.clip(d, -80, 80))),
                 np.exp(np.clip(d, -80, 80)) / (1.0 + np.exp(np.clip(d, -80, 80))))
    s = s.astype(d.dtype)
    out = Tensor(s, (a,), op="sigmoid")
    out.bwd = lambda g: _accum(a, g * s * (1.0 - s))
    return out


def concat(parts, axis=0) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    out = Tensor(np.concatenate([p.data for p in parts], axis=axis), tuple(parts), op="concat")
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            _accum(p, g[tuple(sl)])

    out.bwd = bwd
    return out


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data.reshape(shape), (a,), op="reshape")
    out.bwd = lambda g: _accum(a, g.reshape(a.data.shape))
    return out


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data.transpose(axes), (a,), op="transpose")
    inv = None if axes is None else np.argsort(axes)
    out.bwd = lambda g: _accum(a, g.transpose(inv))
    return out


def getitem(a, key) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data[key], (a,), op="getitem")

    def bwd(g):
        full = np.zeros_like(a.data)
        np.add.at(full, key, g)
        _accum(a, full)

    out.bwd = bwd
    return out


def take_rows(a, idx) -> Tensor:
    """Gather rows along axis 0; idx is a constant integer array."""
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.int64)
    out = Tensor(a.data[idx], (a,), op="take_rows")

    def bwd(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        _accum(a, full)

    out.bwd = bwd
    return out


def scatter_rows(a, idx, length) -> Tensor:
    """Place rows of `a` at positions idx of a zero array with axis-0 size `length`."""
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.int64)
    if len(idx) != a.data.shape[0]:
        raise ContractError("scatter_rows: index count must match rows")
    data = np.zeros((length,) + a.data.shape[1:], dtype=a.data.dtype)
    data[idx] = a.data
    out = Tensor(data, (a,), op="scatter_rows")
    out.bwd = lambda g: _accum(a, g[idx])
    return out


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.broadcast_to(a.data, shape).copy(), (a,), op="broadcast_to")
    out.bwd = lambda g: _accum(a, _unbroadcast(g, a.data.shape))
    return out


def clip(a, lo=None, hi=None) -> Tensor:
    """Clamp; gradient passes through inside the interval, zero outside."""
    a = as_tensor(a)
    out = Tensor(np.clip(a.data, lo, hi), (a,), op="clip")
    inside = np.ones_like(a.data, dtype=bool)
    if lo is not None:
        inside &= a.data >= lo
    if hi is not None:
        inside &= a.data <= hi

    def bwd(g):
        _accum(a, g * inside)

    out.bwd = bwd
    return out


def detach(a) -> Tensor:
    a = as_tensor(a)
    return Tensor(a.data, (), None, requires_grad=False, op="detach")


def exclusive_cumprod(a) -> Tensor:
    """out[..., i] = prod_{j < i} a[..., j]  (out[..., 0] = 1)."""
    a = as_tensor(a)
    u = a.data
    p = np.ones_like(u)
    if u.shape[-1] > 1:
        p[..., 1:] = np.cumprod(u[..., :-1], axis=-1)
    out = Tensor(p, (a,), op="exclusive_cumprod")

    def bwd(g):
        # dL/du_j = P_j * Q_j with Q_j = g_{j+1} + u_{j+1} Q_{j+1}
        n = u.shape[-1]
        q = np.zeros_like(u)
        for j in range(n - 2, -1, -1):
            q[..., j] = g[..., j + 1] + u[..., j + 1] * q[..., j + 1]
        _accum(a, p * q)

    out.bwd = bwd
    return out


def softmax(a, axis=0) -> Tensor:
    """Numerically stable softmax, composed from primitives."""
    a = as_tensor(a)
    m = const(np.max(a.data, axis=axis, keepdims=True))
    e = exp(sub(a, m))
    return div(e, tsum(e, axis=axis, keepdims=True))


# --- rotation helpers -------------------------------------------------------

_ROD_EPS = 1e-8


def rot_coeff_a(s) -> Tensor:
    """sin(sqrt(s))/sqrt(s) with a series branch near s = 0 (s = |w|^2)."""
    s_t = as_tensor(s)
    d = s_t.data
    small = d < _ROD_EPS
    safe = np.where(small, 1.0, d)
    r = np.sqrt(safe)
    val = np.where(small, 1.0 - d / 6.0 + d * d / 120.0, np.sin(r) / r)
    out = Tensor(val.astype(d.dtype), (s_t,), op="rot_coeff_a")

    def bwd(g):
        der = np.where(small, -1.0 / 6.0 + d / 60.0,
                       (r * np.cos(r) - np.sin(r)) / (2.0 * safe * r))
        _accum(s_t, g * der.astype(d.dtype))

    out.bwd = bwd
    return out


def rot_coeff_b(s) -> Tensor:
    """(1 - cos(sqrt(s)))/s with a series branch near s = 0."""
    s_t = as_tensor(s)
    d = s_t.data
    small = d < _ROD_EPS
    safe = np.where(small, 1.0, d)
    r = np.sqrt(safe)
    val = np.where(small, 0.5 - d / 24.0 + d * d / 720.0, (1.0 - np.cos(r)) / safe)
    out = Tensor(val.astype(d.dtype), (s_t,), op="rot_coeff_b")

    def bwd(g):
        der = np.where(small, -1.0 / 24.0 + d / 360.0,
                       (r * np.sin(r) - 2.0 * (1.0 - np.cos(r))) / (2.0 * safe * safe))
        _accum(s_t, g * der.astype(d.dtype))

    out.bwd = bwd
    return out


def cross_matrix(w) -> Tensor:
    """[..., 3] axis vectors -> [..., 3, 3] skew-symmetric cross-product matrices."""
    w = as_tensor(w)
    d = w.data
    m = np.zeros(d.shape[:-1] + (3, 3), dtype=d.dtype)
    m[..., 0, 1] = -d[..., 2]
    m[..., 0, 2] = d[..., 1]
    m[..., 1, 0] = d[..., 2]
    m[..., 1, 2] = -d[..., 0]
    m[..., 2, 0] = -d[..., 1]
    m[..., 2, 1] = d[..., 0]
    out = Tensor(m, (w,), op="cross_matrix")

    def bwd(g):
        gw = np.zeros_like(d)
        gw[..., 0] = g[..., 2, 1] - g[..., 1, 2]
        gw[..., 1] = g[..., 0, 2] - g[..., 2, 0]
        gw[..., 2] = g[..., 1, 0] - g[..., 0, 1]
        _accum(w, gw)

    out.bwd = bwd
    return out


def bmm(a, b) -> Tensor:
    """Batched matmul over leading axes: [..., n, k] @ [..., k, m]."""
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data @ b.data, (a, b), op="bmm")

    def bwd(g):
        _accum(a, _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.data.shape))
        _accum(b, _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.data.shape))

    out.bwd = bwd
    return out


def apply_rigid(R, t, x) -> Tensor:
    """Apply K rigid transforms to N points: out[k, n] = R[k] @ x[n] + t[k]."""
    R, t, x = as_tensor(R), as_tensor(t), as_tensor(x)
    if R.data.shape[-2:] != (3, 3) or t.data.shape[-1] != 3 or x.data.shape[-1] != 3:
        raise ContractError("apply_rigid: expected R [K,3,3], t [K,3], x [N,3]")
    val = np.einsum("kij,nj->kni", R.data, x.data) + t.data[:, None, :]
    out = Tensor(val, (R, t, x), op="apply_rigid")

    def bwd(g):
        _accum(R, np.einsum("kni,nj->kij", g, x.data))
        _accum(t, g.sum(axis=1))
        _accum(x, np.einsum("kij,kni->nj", R.data, g))

    out.bwd = bwd
    return out


# --- grid sampling ----------------------------------------------------------

def _trilinear_setup(pts, bbox_min, bbox_max, grid_shape):
    """Continuous grid coords (cell-centered) + inside-box mask for [...,3] pts."""
    n = np.array(grid_shape, dtype=pts.dtype)
    span = bbox_max - bbox_min
    u = (pts - bbox_min) / span * n - 0.5
    inside = np.all((pts >= bbox_min) & (pts <= bbox_max), axis=-1)
    scale = n / span  # d(u)/d(pts) per axis
    return u, inside, scale


def sample_volume(vol, pts, bbox_min, bbox_max, outside_fill) -> Tensor:
    """Trilinearly sample channel k of `vol` at pts[k].

    vol: [C, Nx, Ny, Nz]; pts: [C, N, 3]; outside_fill: [C] constants used for
    points outside the bounding box. Differentiable w.r.t. both vol and pts.
    """
    vol, pts = as_tensor(vol), as_tensor(pts)
    C = vol.data.shape[0]
    if pts.data.shape[0] != C or pts.data.shape[-1] != 3:
        raise ContractError("sample_volume: pts must be [C, N, 3] matching vol channels")
    bbox_min = np.asarray(bbox_min, dtype=vol.data.dtype)
    bbox_max = np.asarray(bbox_max, dtype=vol.data.dtype)
    fill = np.asarray(outside_fill, dtype=vol.data.dtype)
    gs = vol.data.shape[1:]
    u, inside, scale = _trilinear_setup(pts.data, bbox_min, bbox_max, gs)
    uc = np.clip(u, 0.0, np.array(gs, dtype=u.dtype) - 1.0)
    i0 = np.floor(uc).astype(np.int64)
    i0 = np.minimum(i0, np.array(gs) - 2)
    i0 = np.maximum(i0, 0)
    f = uc - i0
    val_dtype = np.result_type(vol.data.dtype, pts.data.dtype)
    ch = np.arange(C)[:, None]
    corners = []
    wx = np.stack([1.0 - f[..., 0], f[..., 0]])
    wy = np.stack([1.0 - f[..., 1], f[..., 1]])
    wz = np.stack([1.0 - f[..., 2], f[..., 2]])
    val = np.zeros(pts.data.shape[:-1], dtype=val_dtype)
    for dx in (0, 1):
        for dy in (0, 1):
            for dz in (0, 1):
                cv = vol.data[ch, i0[..., 0] + dx, i0[..., 1] + dy, i0[..., 2] + dz]
                w = wx[dx] * wy[dy] * wz[dz]
                corners.append((dx, dy, dz, cv, w))
                val += cv * w
    val = np.where(inside, val, fill[:, None])
    out = Tensor(val, (vol, pts), op="sample_volume")

    def bwd(g):
        gm = g * inside
        if vol.requires_grad:
            # scatter via bincount on linear indices (much faster than add.at)
            chb = np.broadcast_to(ch, i0.shape[:-1])
            gv = np.zeros(vol.data.size, dtype=vol.data.dtype)
            for dx, dy, dz, cv, w in corners:
                lin = ((chb * gs[0] + i0[..., 0] + dx) * gs[1]
                       + i0[..., 1] + dy) * gs[2] + i0[..., 2] + dz
                gv += np.bincount(lin.ravel(), weights=(gm * w).ravel(),
                                  minlength=vol.data.size).astype(vol.data.dtype)
            _accum(vol, gv.reshape(vol.data.shape))
        if pts.requires_grad:
            gp = np.zeros_like(pts.data)
            sx = np.where((u[..., 0] > 0) & (u[..., 0] < gs[0] - 1), scale[0], 0.0)
            sy = np.where((u[..., 1] > 0) & (u[..., 1] < gs[1] - 1), scale[1], 0.0)
            sz = np.where((u[..., 2] > 0) & (u[..., 2] < gs[2] - 1), scale[2], 0.0)
            for dx, dy, dz, cv, w in corners:
                dwx = (1.0 if dx else -1.0) * wy[dy] * wz[dz]
                dwy = wx[dx] * (1.0 if dy else -1.0) * wz[dz]
                dwz = wx[dx] * wy[dy] * (1.0 if dz else -1.0)
                gp[..., 0] += gm * cv * dwx * sx
                gp[..., 1] += gm * cv * dwy * sy
                gp[..., 2] += gm * cv * dwz * sz
            _accum(pts, gp)

    out.bwd = bwd
    return out


# --- convolutions (stride-1 direct forms; transposed convs are built on top) -

def conv3d(x, w, pad=0) -> Tensor:
    """x: [Ci, D, H, W], w: [Co, Ci, k, k, k], stride 1, zero padding `pad`."""
    x, w = as_tensor(x), as_tensor(w)
    ci, D, H, W = x.data.shape
    co, ci2, k, _, _ = w.data.shape
    if ci != ci2:
        raise ContractError(f"conv3d channel mismatch: {ci} vs {ci2}")
    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad), (pad, pad)))
    Do, Ho, Wo = D + 2 * pad - k + 1, H + 2 * pad - k + 1, W + 2 * pad - k + 1
    out_data = np.zeros((co, Do, Ho, Wo),
                        dtype=np.result_type(x.data.dtype, w.data.dtype))
    for a in range(k):
        for b in range(k):
            for c in range(k):
                patch = xp[:, a:a + Do, b:b + Ho, c:c + Wo]
                out_data += np.tensordot(w.data[:, :, a, b, c], patch, axes=(1, 0))
    out = Tensor(out_data, (x, w), op="conv3d")

    def bwd(g):
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for a in range(k):
                for b in range(k):
                    for c in range(k):
                        gxp[:, a:a + Do, b:b + Ho, c:c + Wo] += np.tensordot(
                            w.data[:, :, a, b, c], g, axes=(0, 0))
            gx = gxp[:, pad:pad + D, pad:pad + H, pad:pad + W] if pad else gxp
            _accum(x, gx)
        if w.requires_grad:
            gw = np.zeros_like(w.data)
            for a in range(k):
                for b in range(k):
                    for c in range(k):
                        patch = xp[:, a:a + Do, b:b + Ho, c:c + Wo]
                        gw[:, :, a, b, c] = np.tensordot(g, patch, axes=((1, 2, 3), (1, 2, 3)))
            _accum(w, gw)

    out.bwd = bwd
    return out


def zero_insert3d(x, factor=2) -> Tensor:
    """Insert factor-1 zeros between voxels along each spatial axis."""
    x = as_tensor(x)
    c, D, H, W = x.data.shape
    s = factor
    out_data = np.zeros((c, (D - 1) * s + 1, (H - 1) * s + 1, (W - 1) * s + 1),
                        dtype=x.data.dtype)
    out_data[:, ::s, ::s, ::s] = x.data
    out = Tensor(out_data, (x,), op="zero_insert3d")
    out.bwd = lambda g: _accum(x, g[:, ::s, ::s, ::s])
    return out


def conv2d(x, w, pad=0) -> Tensor:
    """x: [Ci, H, W], w: [Co, Ci, k, k], stride 1, zero padding `pad`."""
    x, w = as_tensor(x), as_tensor(w)
    ci, H, W = x.data.shape
    co, ci2, k, _ = w.data.shape
    if ci != ci2:
        raise ContractError(f"conv2d channel mismatch: {ci} vs {ci2}")
    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad)))
    Ho, Wo = H + 2 * pad - k + 1, W + 2 * pad - k + 1
    out_data = np.zeros((co, Ho, Wo),
                        dtype=np.result_type(x.data.dtype, w.data.dtype))
    for a in range(k):
        for b in range(k):
            out_data += np.tensordot(w.data[:, :, a, b], xp[:, a:a + Ho, b:b + Wo],
                                     axes=(1, 0))
    out = Tensor(out_data, (x, w), op="conv2d")

    def bwd(g):
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for a in range(k):
                for b in range(k):
                    gxp[:, a:a + Ho, b:b + Wo] += np.tensordot(w.data[:, :, a, b], g,
                                                               axes=(0, 0))
            gx = gxp[:, pad:pad + H, pad:pad + W] if pad else gxp
            _accum(x, gx)
        if w.requires_grad:
            gw = np.zeros_like(w.data)
            for a in range(k):
                for b in range(k):
                    gw[:, :, a, b] = np.tensordot(g, xp[:, a:a + Ho, b:b + Wo],
                                                  axes=((1, 2), (1, 2)))
            _accum(w, gw)

    out.bwd = bwd
    return out


def avgpool2d(x, factor=2) -> Tensor:
    x = as_tensor(x)
    c, H, W = x.data.shape
    f = factor
    Hf, Wf = H // f, W // f
    v = x.data[:, :Hf * f, :Wf * f].reshape(c, Hf, f, Wf, f)
    out = Tensor(v.mean(axis=(2, 4)), (x,), op="avgpool2d")

    def bwd(g):
        gx = np.zeros_like(x.data)
        gx[:, :Hf * f, :Wf * f] = np.repeat(np.repeat(g, f, axis=1), f, axis=2) / (f * f)
        _accum(x, gx)

    out.bwd = bwd
    return out


def threshold_mask(alpha, b) -> Tensor:
    """Learnable-threshold mask: (alpha + b) * step(alpha > b), clamped to [0, 1].

    The step factor is treated as locally constant: the gradient w.r.t. both
    alpha and b is the step value itself (inside the clamp), which is what
    makes the threshold trainable.
    """
    alpha, b = as_tensor(alpha), as_tensor(b)
    h = (alpha.data > b.data).astype(alpha.data.dtype)
    raw = (alpha.data + b.data) * h
    val = np.clip(raw, 0.0, 1.0)
    out = Tensor(val, (alpha, b), op="threshold_mask")
    gate = h * ((raw >= 0.0) & (raw <= 1.0))

    def bwd(g):
        _accum(alpha, _unbroadcast(g * gate, alpha.data.shape))
        _accum(b, _unbroadcast(g * gate, b.data.shape))

    out.bwd = bwd
    return out


def posenc(x, scales, include_input=True) -> Tensor:
    """Fused frequency encoding: for [N, d] input emits, per coordinate,
    (sin(s_l p), cos(s_l p)) over the scale vector, coordinate-major with the
    input optionally prepended. One graph node instead of a handful."""
    x = as_tensor(x)
    scales = np.asarray(scales, dtype=x.data.dtype)
    n, d = x.data.shape
    f = len(scales)
    phases = x.data[:, :, None] * scales
    s, c = np.sin(phases), np.cos(phases)
    enc = np.empty((n, d, f, 2), dtype=x.data.dtype)
    enc[..., 0] = s
    enc[..., 1] = c
    flat = enc.reshape(n, d * f * 2)
    data = np.concatenate([x.data, flat], axis=1) if include_input else flat
    out = Tensor(data, (x,), op="posenc")

    def bwd(g):
        if include_input:
            gx = g[:, :d].copy()
            gf = g[:, d:]
        else:
            gx = np.zeros_like(x.data)
            gf = g
        gf = gf.reshape(n, d, f, 2)
        gx += ((gf[..., 0] * c - gf[..., 1] * s) * scales).sum(axis=2)
        _accum(x, gx)

    out.bwd = bwd
    return out
