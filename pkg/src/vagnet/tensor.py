"""Dense float64 tensors with a reverse-mode gradient tape.

Every differentiable primitive used by the model lives here. Data is held in
numpy arrays; each op that touches a ``requires_grad`` input records a node
(parents + vector-Jacobian closure) stamped with a monotonically increasing
sequence number. ``backward`` replays the reachable nodes in reverse order of
that sequence, which is the append order of the tape.
"""

from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64

_seq = itertools.count()
_state = threading.local()


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested op."""


class UnsupportedConfig(ValueError):
    """An op was asked for a configuration it does not implement."""


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjp", "_seq", "__weakref__")
    __array_ufunc__ = None  # ndarray <op> Tensor defers to the Tensor's reflected op

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=DTYPE)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._seq = next(_seq)

    # -- bookkeeping -----------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._vjp is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def backward(self) -> None:
        backward(self)

    # -- operators -------------------------------------------------------
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

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis, keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True)


def _record(out: np.ndarray, parents: Sequence[Tensor], vjp) -> Tensor:
    t = Tensor.__new__(Tensor)
    t.data = out
    t.grad = None
    t._seq = next(_seq)
    if grad_enabled() and any(p.requires_grad for p in parents):
        t.requires_grad = True
        t._parents = tuple(parents)
        t._vjp = vjp
    else:
        t.requires_grad = False
        t._parents = ()
        t._vjp = None
    return t


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# tape + backward


@dataclass
class Tape:
    """Reachable nodes of a graph, in append (creation) order."""

    nodes: list[Tensor]

    @classmethod
    def collect(cls, root: Tensor) -> "Tape":
        seen: set[int] = set()
        stack = [root]
        nodes = []
        while stack:
            t = stack.pop()
            if id(t) in seen:
                continue
            seen.add(id(t))
            nodes.append(t)
            stack.extend(p for p in t._parents if p.requires_grad)
        nodes.sort(key=lambda t: t._seq)
        return cls(nodes)


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every ``requires_grad`` leaf behind a scalar loss.

    Gradients accumulate into existing ``.grad`` buffers; call ``zero_grad``
    between steps. Intermediate nodes do not keep their gradients.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss is not attached to a tape (no input requires grad)")
    tape = Tape.collect(loss)
    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        if node._vjp is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._vjp(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in pending:
                pending[key] = pending[key] + pg
            else:
                pending[key] = pg


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _record(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _record(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _record(a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                              _unbroadcast(g * a.data, b.shape) if b.requires_grad else None))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return _record(out, (a, b),
                   lambda g: (_unbroadcast(g / b.data, a.shape) if a.requires_grad else None,
                              _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _record(-a.data, (a,), lambda g: (-g,))


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    p = float(exponent)
    return _record(a.data ** p, (a,), lambda g: (g * p * a.data ** (p - 1.0),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _record(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return _record(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _record(out, (a,), lambda g: (g * 0.5 / out,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _record(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _record(out, (a,), lambda g: (g * out * (1.0 - out),))


def clamp(a, lo: float, hi: float) -> Tensor:
    a = as_tensor(a)
    mask = (a.data >= lo) & (a.data <= hi)
    return _record(np.clip(a.data, lo, hi), (a,), lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# reductions


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _record(np.asarray(out), (a,), vjp)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    n = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    return sum_(a, axis, keepdims) * (1.0 / n)


def max_(a, axis: int) -> Tensor:
    """Max along one axis; the gradient flows to the first maximal entry."""
    a = as_tensor(a)
    axis = axis % a.ndim
    idx = np.expand_dims(np.argmax(a.data, axis=axis), axis)
    out = np.take_along_axis(a.data, idx, axis=axis).squeeze(axis)

    def vjp(g):
        full = np.zeros_like(a.data)
        np.put_along_axis(full, idx, np.expand_dims(g, axis), axis=axis)
        return (full,)

    return _record(out, (a,), vjp)


# ---------------------------------------------------------------------------
# shape ops


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    out = a.data.reshape(shape)
    return _record(out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _record(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    ref = ts[0].shape
    axis = axis % len(ref)
    for t in ts[1:]:
        if t.ndim != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != axis):
            raise ShapeError(f"concat along axis {axis}: shapes {ref} and {t.shape} disagree")
    out = np.concatenate([t.data for t in ts], axis=axis)
    splits = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return _record(out, ts, lambda g: tuple(np.split(g, splits, axis=axis)))


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    expanded = [reshape(t, t.shape[:axis] + (1,) + t.shape[axis:]) for t in ts]
    return concat(expanded, axis=axis)


def getitem(a, key) -> Tensor:
    """Basic (non-advanced) indexing: ints and slices."""
    a = as_tensor(a)
    out = a.data[key]

    def vjp(g):
        full = np.zeros_like(a.data)
        full[key] = g
        return (full,)

    return _record(np.array(out), (a,), vjp)


def take(a, indices, axis: int) -> Tensor:
    """Gather along ``axis`` with an integer index array of any shape."""
    a = as_tensor(a)
    idx = np.asarray(indices, dtype=np.intp)
    axis = axis % a.ndim
    out = np.take(a.data, idx, axis=axis)

    def vjp(g):
        full = np.zeros_like(a.data)
        # move the gathered axes to the front so add.at scatters along axis
        moved = np.moveaxis(full, axis, 0)
        gm = np.moveaxis(g, tuple(range(axis, axis + idx.ndim)), tuple(range(idx.ndim)))
        np.add.at(moved, idx, gm)
        return (full,)

    return _record(out, (a,), vjp)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def vjp(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _record(out, (a, b), vjp)


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    if not -a.ndim <= axis < a.ndim:
        raise ShapeError(f"softmax axis {axis} out of range for rank {a.ndim}")
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _record(out, (a,), vjp)


# ---------------------------------------------------------------------------
# 3x3 patch extraction / reassembly (stride 1, zero pad 1)


def _check_patch_config(patch: int, stride: int, pad: int) -> None:
    if (patch, stride, pad) != (3, 1, 1):
        raise UnsupportedConfig(
            f"only patch=3, stride=1, pad=1 is implemented (got patch={patch}, stride={stride}, pad={pad})")


def _unfold_array(x: np.ndarray) -> np.ndarray:
    c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (3, 3), axis=(1, 2))  # C,H,W,3,3
    return np.ascontiguousarray(win.transpose(1, 2, 3, 4, 0)).reshape(h * w, 9 * c)


def _fold_array(rows: np.ndarray, h: int, w: int) -> np.ndarray:
    c = rows.shape[1] // 9
    r = rows.reshape(h, w, 3, 3, c)
    out = np.zeros((c, h + 2, w + 2))
    for dy in range(3):
        for dx in range(3):
            out[:, dy:dy + h, dx:dx + w] += r[:, :, dy, dx, :].transpose(2, 0, 1)
    return out[:, 1:h + 1, 1:w + 1]


def overlap_counts(h: int, w: int) -> np.ndarray:
    """Number of 3x3 windows covering each cell of an h x w grid."""
    rows = _unfold_array(np.ones((1, h, w)))
    return _fold_array(rows, h, w)[0]


def unfold(x, patch: int = 3, stride: int = 1, pad: int = 1) -> Tensor:
    """C x H x W -> (H*W) x (9*C); rows in raster order, columns (dy, dx, c)."""
    _check_patch_config(patch, stride, pad)
    x = as_tensor(x)
    if x.ndim != 3:
        raise ShapeError(f"unfold expects C x H x W, got {x.shape}")
    _, h, w = x.shape
    return _record(_unfold_array(x.data), (x,), lambda g: (_fold_array(g, h, w),))


def fold(rows, h: int, w: int, normalize: bool = True) -> Tensor:
    rows = as_tensor(rows)
    if rows.ndim != 2 or rows.shape[0] != h * w or rows.shape[1] % 9:
        raise ShapeError(f"fold expects ({h * w}) x (9*C) rows, got {rows.shape}")
    out = _fold_array(rows.data, h, w)
    if not normalize:
        return _record(out, (rows,), lambda g: (_unfold_array(g),))
    counts = overlap_counts(h, w)
    return _record(out / counts, (rows,), lambda g: (_unfold_array(g / counts),))


# ---------------------------------------------------------------------------
# batch normalisation


@dataclass
class RunningStats:
    mean: np.ndarray
    var: np.ndarray
    momentum: float = 0.1

    @classmethod
    def fresh(cls, channels: int) -> "RunningStats":
        return cls(np.zeros(channels), np.ones(channels))


def batchnorm(x, gamma, beta, eps: float = 1e-5, running: RunningStats | None = None,
              training: bool = True) -> Tensor:
    """Per-channel normalisation of a C x M activation over its M axis.

    The variance used for scaling is ``max(var, eps)``: a constant channel
    (or M == 1) maps to ``beta`` instead of dividing by zero.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if x.ndim != 2:
        raise ShapeError(f"batchnorm expects C x M, got {x.shape}")
    c, m = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"gamma/beta must be ({c},), got {gamma.shape}, {beta.shape}")

    if training:
        mu = x.data.mean(axis=1)
        var = x.data.var(axis=1)
        if running is not None:
            mo = running.momentum
            running.mean = (1 - mo) * running.mean + mo * mu
            if m > 1:
                running.var = (1 - mo) * running.var + mo * var * m / (m - 1)
    else:
        if running is None:
            raise ValueError("eval-mode batchnorm needs running statistics")
        mu, var = running.mean, running.var

    clamped = var < eps
    std = np.sqrt(np.maximum(var, eps))
    xhat = (x.data - mu[:, None]) / std[:, None]
    out = gamma.data[:, None] * xhat + beta.data[:, None]

    def vjp(g):
        ggamma = (g * xhat).sum(axis=1)
        gbeta = g.sum(axis=1)
        gxhat = g * gamma.data[:, None]
        if not training:
            return gxhat / std[:, None], ggamma, gbeta
        # batch statistics: mean always couples, variance only when unclamped
        gx = gxhat - gxhat.mean(axis=1, keepdims=True)
        var_term = xhat * (gxhat * xhat).mean(axis=1, keepdims=True)
        gx = gx - np.where(clamped[:, None], 0.0, var_term)
        return gx / std[:, None], ggamma, gbeta

    return _record(out, (x, gamma, beta), vjp)


# ---------------------------------------------------------------------------
# finite-difference checking


def numeric_grad(fn: Callable[[], Tensor], param: Tensor, coords: Iterable[tuple], h: float = 1e-5):
    """Central differences of scalar ``fn()`` w.r.t. selected entries of ``param``."""
    out = []
    with no_grad():
        for c in coords:
            orig = param.data[c]
            param.data[c] = orig + h
            fp = fn().item()
            param.data[c] = orig - h
            fm = fn().item()
            param.data[c] = orig
            out.append((fp - fm) / (2 * h))
    return np.array(out)


# Central differences at h=1e-5 resolve gradients only to about eps*|f|/h
# (~1e-11 for |f| ~ 1), so a vanishing gradient cannot be checked relatively.
# gradcheck divides by at least GRAD_FLOOR * max(1, |f|).
GRAD_FLOOR = 1e-6


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = GRAD_FLOOR) -> np.ndarray:
    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / scale


def gradcheck(fn: Callable[[], Tensor], params: Sequence[Tensor], n_coords: int | None = None,
              rng: np.random.Generator | None = None, h: float = 1e-5, floor: float = GRAD_FLOOR) -> float:
    """Max relative error between autodiff and central differences.

    ``n_coords`` samples that many coordinates across all ``params`` (all
    coordinates when None). The relative-error denominator is at least
    ``floor * max(1, |fn()|)``.
    """
    for p in params:
        p.zero_grad()
    loss = fn()
    backward(loss)
    scale = floor * max(1.0, abs(loss.item()))
    pool = [(i, np.unravel_index(j, p.shape)) for i, p in enumerate(params) for j in range(p.size)]
    if n_coords is not None and n_coords < len(pool):
        rng = rng or np.random.default_rng(0)
        pick = rng.choice(len(pool), size=n_coords, replace=False)
        pool = [pool[k] for k in sorted(pick)]
    worst = 0.0
    for i, p in enumerate(params):
        coords = [c for j, c in pool if j == i]
        if not coords:
            continue
        analytic = np.array([p.grad[c] if p.grad is not None else 0.0 for c in coords])
        numeric = numeric_grad(fn, p, coords, h)
        worst = max(worst, float(relative_error(analytic, numeric, scale).max()))
    return worst
