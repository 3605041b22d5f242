"""Dense float64 tensors with reverse-mode differentiation.

Every op records its parents and a closure that maps the output gradient to
parent gradients. ``Tensor.backward`` walks the recorded graph in reverse
topological order. Only values and gradients are part of the contract; the
graph is rebuilt on every forward pass.
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

LEAKY_SLOPE = 0.01

_grad_enabled = True


class NonFiniteError(FloatingPointError):
    """Raised when an op produces NaN or Inf."""


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (evaluation passes)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        if not np.isfinite(arr).all():
            raise NonFiniteError(f"non-finite value in tensor {name or ''}".strip())
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.op = "leaf"
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op})"

    def _accum(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def backward(self, grad: np.ndarray | float | None = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ValueError(f"backward() needs a scalar output, got shape {self.shape}")
            grad = np.ones_like(self.data)
        order = _topo_order(self)
        self._accum(np.broadcast_to(np.asarray(grad, dtype=np.float64), self.shape))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
                # intermediate grads are not needed once propagated
                node.grad = None

    # operator sugar
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

    def __getitem__(self, idx):
        return getitem(self, idx)

    def __pow__(self, p):
        if p == 2:
            return square(self)
        raise NotImplementedError("only x**2 is supported")

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    if not np.isfinite(data).all():
        raise NonFiniteError(f"non-finite output from op '{op}'")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.op = op
    needs = _grad_enabled and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g, b.shape))

    return _make(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(-g, b.shape))

    return _make(a.data - b.data, (a, b), bw, "sub")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: a._accum(-g), "neg")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def bw(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(-g * out / b.data, b.shape))

    return _make(out, (a, b), bw, "div")


def square(a) -> Tensor:
    a = as_tensor(a)
    return _make(a.data * a.data, (a,), lambda g: a._accum(2.0 * g * a.data), "square")


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _make(out, (a,), lambda g: a._accum(g * out), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return _make(out, (a,), lambda g: a._accum(g / a.data), "log")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: a._accum(g * (1.0 - out * out)), "tanh")


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = _np_sigmoid(a.data)
    return _make(out, (a,), lambda g: a._accum(g * out * (1.0 - out)), "sigmoid")


def _np_sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def softplus(a) -> Tensor:
    """log(1 + exp(a)), computed without overflow."""
    a = as_tensor(a)
    x = a.data
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    return _make(out, (a,), lambda g: a._accum(g * _np_sigmoid(x)), "softplus")


def leaky_relu(a, slope: float = LEAKY_SLOPE) -> Tensor:
    a = as_tensor(a)
    x = a.data
    scale = np.where(x > 0, 1.0, slope)
    return _make(x * scale, (a,), lambda g: a._accum(g * scale), "leaky_relu")


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp with zero gradient outside [lo, hi]."""
    a = as_tensor(a)
    x = a.data
    inside = (x >= lo) & (x <= hi)
    return _make(np.clip(x, lo, hi), (a,), lambda g: a._accum(g * inside), "clip")


# ---------------------------------------------------------------- reductions

def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accum(np.broadcast_to(g, a.shape))

    return _make(np.asarray(out), (a,), bw, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.mean(axis=axis, keepdims=keepdims)
    if axis is None:
        n = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([a.shape[i] for i in axes]))

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accum(np.broadcast_to(g / n, a.shape))

    return _make(np.asarray(out), (a,), bw, "mean")


def logsumexp(a, axis: int) -> Tensor:
    """Max-shifted log(sum(exp(a))) along one axis."""
    a = as_tensor(a)
    m = a.data.max(axis=axis, keepdims=True)
    e = np.exp(a.data - m)
    s = e.sum(axis=axis, keepdims=True)
    out = np.squeeze(m + np.log(s), axis=axis)
    w = e / s

    def bw(g):
        a._accum(np.expand_dims(g, axis) * w)

    return _make(out, (a,), bw, "logsumexp")


# ---------------------------------------------------------------- linear algebra

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul expects operands with ndim >= 2")

    def bw(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))

    return _make(a.data @ b.data, (a, b), bw, "matmul")


# ---------------------------------------------------------------- shape ops

def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    src = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: a._accum(g.reshape(src)), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,), lambda g: a._accum(g.transpose(inv)), "transpose")


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    out = np.broadcast_to(a.data, shape)
    return _make(out, (a,), lambda g: a._accum(_unbroadcast(g, a.shape)), "broadcast")


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in ts], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in ts])

    def bw(g):
        for t, lo, hi in zip(ts, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                t._accum(g[tuple(idx)])

    return _make(out, ts, bw, "concat")


def getitem(a, idx) -> Tensor:
    a = as_tensor(a)
    out = a.data[idx]

    basic = all(isinstance(i, (slice, int, type(Ellipsis))) for i in (idx if isinstance(idx, tuple) else (idx,)))

    def bw(g):
        full = np.zeros_like(a.data)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        a._accum(full)

    return _make(np.array(out), (a,), bw, "slice")


def split(a, sizes: Sequence[int], axis: int = -1) -> list[Tensor]:
    out = []
    lo = 0
    axis = axis % as_tensor(a).ndim
    for n in sizes:
        idx = [slice(None)] * as_tensor(a).ndim
        idx[axis] = slice(lo, lo + n)
        out.append(getitem(a, tuple(idx)))
        lo += n
    return out


# ---------------------------------------------------------------- convolution

def conv2d(x, w, b=None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation, NCHW input, (O, C, k, k) weights."""
    x, w = as_tensor(x), as_tensor(w)
    n, c, hgt, wid = x.shape
    o, c2, k, k2 = w.shape
    if c != c2 or k != k2:
        raise ValueError(f"conv2d shape mismatch: input {x.shape}, weight {w.shape}")
    wmat = w.data.reshape(o, c * k * k)
    if k == 1 and stride == 1 and padding == 0:
        # pointwise: channel-major matmul
        cols = np.ascontiguousarray(x.data.transpose(1, 0, 2, 3)).reshape(c, -1)
        ho, wo, xp = hgt, wid, None
    else:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
        win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
        ho, wo = win.shape[2], win.shape[3]
        # (c, k, k, n, ho, wo): keeps the spatial axis innermost for cheap copies
        cols = np.ascontiguousarray(win.transpose(1, 4, 5, 0, 2, 3)).reshape(c * k * k, n * ho * wo)
    out = wmat @ cols
    if b is not None:
        b = as_tensor(b)
        out += b.data[:, None]
    out = out.reshape(o, n, ho, wo).transpose(1, 0, 2, 3)
    parents = (x, w) if b is None else (x, w, b)

    def bw(g):
        gm = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(o, n * ho * wo)
        if w.requires_grad:
            w._accum((gm @ cols.T).reshape(w.shape))
        if b is not None and b.requires_grad:
            b._accum(gm.sum(axis=1))
        if not x.requires_grad:
            return
        dcols = wmat.T @ gm
        if xp is None:
            x._accum(dcols.reshape(c, n, hgt, wid).transpose(1, 0, 2, 3))
            return
        dcols = dcols.reshape(c, k, k, n, ho, wo)
        dxp = np.zeros((c, n) + xp.shape[2:])
        for i in range(k):
            for j in range(k):
                dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[:, i, j]
        dxp = dxp[:, :, padding:padding + hgt, padding:padding + wid]
        x._accum(dxp.transpose(1, 0, 2, 3))

    return _make(np.ascontiguousarray(out), parents, bw, "conv2d")


def upsample2x(x) -> Tensor:
    """Nearest-neighbour 2x upsampling of an NCHW tensor."""
    x = as_tensor(x)
    n, c, h, w = x.shape
    out = np.broadcast_to(x.data[:, :, :, None, :, None], (n, c, h, 2, w, 2)).reshape(n, c, 2 * h, 2 * w)

    def bw(g):
        x._accum(g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)))

    return _make(np.ascontiguousarray(out), (x,), bw, "upsample")


def avgpool(x, k: int) -> Tensor:
    """Non-overlapping k x k average pooling of an NCHW tensor."""
    x = as_tensor(x)
    n, c, h, w = x.shape
    if h % k or w % k:
        raise ValueError(f"avgpool: {h}x{w} not divisible by {k}")
    return mean(reshape(x, (n, c, h // k, k, w // k, k)), axis=(3, 5))


# ---------------------------------------------------------------- parameters

class ParamStore:
    """Flat, ordered collection of named trainable leaves."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, value) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter name: {name}")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=True, name=name)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self):
        return iter(self._params.items())

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def values(self) -> list[Tensor]:
        return list(self._params.values())

    def num_scalars(self) -> int:
        return sum(p.size for p in self._params.values())

    def grad_of(self, name: str) -> np.ndarray:
        p = self._params[name]
        return np.zeros_like(p.data) if p.grad is None else p.grad

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.grad = None

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self._params.items()}

    def restore(self, values: dict[str, np.ndarray]) -> None:
        for k, v in values.items():
            p = self._params[k]
            if p.shape != v.shape:
                raise ValueError(f"shape mismatch restoring {k}: {p.shape} vs {v.shape}")
            p.data = np.array(v, dtype=np.float64, copy=True)

    def subset(self, prefix: str) -> list[str]:
        return [k for k in self._params if k.startswith(prefix)]


def forward_backward(fn: Callable[[], Tensor], store: ParamStore) -> float:
    """Evaluate a scalar loss and fill ``grad`` of every parameter in ``store``.

    Parameters that the loss does not depend on receive zero gradients.
    """
    store.zero_grad()
    loss = fn()
    if not isinstance(loss, Tensor) or loss.data.size != 1:
        shape = getattr(loss, "shape", type(loss))
        raise ValueError(f"loss must be a scalar Tensor, got {shape}")
    if loss.requires_grad:
        loss.backward()
    for name, p in store:
        if p.grad is None:
            p.grad = np.zeros_like(p.data)
        elif not np.isfinite(p.grad).all():
            raise NonFiniteError(f"non-finite gradient for parameter '{name}'")
    return loss.item()


@dataclass
class GradCheckReport:
    max_rel_err: float
    passed: bool
    n_checked: int
    worst: tuple[str, tuple[int, ...]] | None = None


def grad_check(
    fn: Callable[[], Tensor],
    store: ParamStore,
    h: float = 1e-5,
    tol: float = 1e-4,
    n_coords: int | None = None,
    rng: np.random.Generator | None = None,
    names: Iterable[str] | None = None,
    analytic: dict[str, np.ndarray] | None = None,
    abs_floor: float = 1e-8,
) -> GradCheckReport:
    """Compare analytic gradients against central differences.

    ``fn`` must be deterministic (freeze any sampling noise outside it). With
    ``n_coords`` set, that many coordinates are drawn uniformly over all
    scalars of the selected parameters; otherwise every coordinate is checked.
    ``analytic`` overrides the computed gradients (used to test the checker).
    Coordinates where both gradients are below ``abs_floor`` are compared by
    absolute error, since central differences only resolve ~eps * |f| / h.
    """
    if h <= 0 or tol <= 0:
        raise ValueError("h and tol must be positive")
    names = list(names) if names is not None else store.names()
    if analytic is None:
        forward_backward(fn, store)
        analytic = {k: store.grad_of(k).copy() for k in names}
    sizes = np.array([store[k].size for k in names])
    total = int(sizes.sum())
    if n_coords is None or n_coords >= total:
        flat = np.arange(total)
    else:
        rng = rng if rng is not None else np.random.default_rng(0)
        flat = np.sort(rng.choice(total, size=n_coords, replace=False))
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    worst_err, worst = 0.0, None
    with no_grad():
        for f in flat:
            pi = int(np.searchsorted(offsets, f, side="right") - 1)
            name = names[pi]
            p = store[name]
            local = np.unravel_index(int(f - offsets[pi]), p.shape)
            orig = p.data[local]
            p.data[local] = orig + h
            fp = fn().item()
            p.data[local] = orig - h
            fm = fn().item()
            p.data[local] = orig
            num = (fp - fm) / (2.0 * h)
            ana = float(analytic[name][local])
            big = max(abs(ana), abs(num))
            err = abs(ana - num) if big < abs_floor else abs(ana - num) / big
            if err > worst_err or worst is None:
                worst_err, worst = err, (name, tuple(int(i) for i in local))
    return GradCheckReport(worst_err, worst_err < tol, len(flat), worst)
