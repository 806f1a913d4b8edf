"""Differentiable operations.

Each op computes its forward value with numpy (or the row kernels) and
registers a closure mapping the output gradient to input gradients.
"""
from __future__ import annotations

import builtins
from typing import Optional, Sequence, Tuple, Union

import numpy as np

from . import kernels
from .tensor import ShapeError, Tensor, as_tensor, get_default_dtype

Axes = Union[None, int, Sequence[int]]


def _unbroadcast(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead > 0:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> Tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, [a.shape, b.shape]) from None


# elementwise ---------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor._node(a.data + b.data, "add", (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Tensor._node(a.data - b.data, "sub", (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._node(a.data * b.data, "mul", (a, b), bw)


def scale(a: Tensor, factor: float) -> Tensor:
    factor = float(factor)

    def bw(g):
        return (g * factor,)

    return Tensor._node(a.data * factor, "scale", (a,), bw)


def gelu(x: Tensor) -> Tensor:
    """Exact (erf) GELU."""
    k = kernels.get()
    flat = x.data.reshape(-1)
    out = k.gelu_forward(flat).reshape(x.shape)

    def bw(g):
        return (k.gelu_backward(flat, np.ascontiguousarray(g).reshape(-1)).reshape(x.shape),)

    return Tensor._node(out, "gelu", (x,), bw)


# linear algebra ------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the last two axes, numpy broadcasting on the rest."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", [a.shape, b.shape], "need (...,m,k)@(...,k,n)")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError("matmul", [a.shape, b.shape], "batch dims do not broadcast") from None
    out = np.matmul(a.data, b.data)

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            if b.ndim == 2:
                k, n = b.shape
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return Tensor._node(out, "matmul", (a, b), bw)


# normalisation and softmax ---------------------------------------------------

def layer_norm(x: Tensor, weight: Tensor, bias: Tensor, eps: float = 1e-6) -> Tensor:
    """LayerNorm over the last axis with affine scale and shift."""
    d = x.shape[-1]
    if weight.shape != (d,) or bias.shape != (d,):
        raise ShapeError("layer_norm", [x.shape, weight.shape, bias.shape])
    k = kernels.get()
    rows = x.data.reshape(-1, d)
    y, xhat, rstd = k.layer_norm_forward(rows, weight.data, bias.data, float(eps))

    def bw(g):
        gx, gw, gb = k.layer_norm_backward(np.ascontiguousarray(g).reshape(-1, d), xhat, rstd, weight.data)
        return gx.reshape(x.shape), gw, gb

    return Tensor._node(y.reshape(x.shape), "layer_norm", (x, weight, bias), bw)


def softmax(x: Tensor) -> Tensor:
    d = x.shape[-1]
    k = kernels.get()
    s = k.softmax_forward(x.data.reshape(-1, d))

    def bw(g):
        return (k.softmax_backward(s, np.ascontiguousarray(g).reshape(-1, d)).reshape(x.shape),)

    return Tensor._node(s.reshape(x.shape), "softmax", (x,), bw)


def log_softmax(x: Tensor) -> Tensor:
    d = x.shape[-1]
    k = kernels.get()
    lp = k.log_softmax_forward(x.data.reshape(-1, d))

    def bw(g):
        return (k.log_softmax_backward(lp, np.ascontiguousarray(g).reshape(-1, d)).reshape(x.shape),)

    return Tensor._node(lp.reshape(x.shape), "log_softmax", (x,), bw)


# reductions ----------------------------------------------------------------

def _norm_axes(x: Tensor, axes: Axes) -> Tuple[int, ...]:
    if axes is None:
        return tuple(range(x.ndim))
    if isinstance(axes, int):
        axes = (axes,)
    try:
        return tuple(sorted(ax % x.ndim for ax in axes))
    except ZeroDivisionError:
        raise ShapeError("reduce", [x.shape]) from None


def sum(x: Tensor, axes: Axes = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    ax = _norm_axes(x, axes)
    out = x.data.sum(axis=ax, keepdims=keepdims)
    kept = tuple(1 if i in ax else n for i, n in enumerate(x.shape))

    def bw(g):
        return (np.broadcast_to(g.reshape(kept), x.shape).copy(),)

    return Tensor._node(np.asarray(out), "sum", (x,), bw)


def mean(x: Tensor, axes: Axes = None, keepdims: bool = False) -> Tensor:
    ax = _norm_axes(x, axes)
    count = int(np.prod([x.shape[i] for i in ax])) if ax else 1
    out = x.data.mean(axis=ax, keepdims=keepdims)
    kept = tuple(1 if i in ax else n for i, n in enumerate(x.shape))

    def bw(g):
        return (np.broadcast_to(g.reshape(kept) / count, x.shape).copy(),)

    return Tensor._node(np.asarray(out), "mean", (x,), bw)


# shape manipulation --------------------------------------------------------

def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        out = x.data.reshape(tuple(shape))
    except ValueError:
        raise ShapeError("reshape", [x.shape, tuple(shape)]) from None

    def bw(g):
        return (g.reshape(x.shape),)

    return Tensor._node(out, "reshape", (x,), bw)


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError("transpose", [x.shape], f"bad permutation {axes}")
    inverse = tuple(np.argsort(axes))

    def bw(g):
        return (np.transpose(g, inverse),)

    return Tensor._node(np.transpose(x.data, axes), "transpose", (x,), bw)


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    try:
        out = np.concatenate([x.data for x in xs], axis=axis)
    except ValueError:
        raise ShapeError("concat", [x.shape for x in xs], f"axis={axis}") from None
    bounds = np.cumsum([0] + [x.shape[axis] for x in xs])

    def bw(g):
        index = [builtins.slice(None)] * g.ndim
        parts = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            index[axis] = builtins.slice(lo, hi)
            parts.append(g[tuple(index)])
        return tuple(parts)

    return Tensor._node(out, "concat", tuple(xs), bw)


def slice(x: Tensor, axis: int, start: int, stop: Optional[int] = None) -> Tensor:  # noqa: A001
    axis = axis % x.ndim
    n = x.shape[axis]
    lo, hi, _ = builtins.slice(start, stop).indices(n)
    if hi <= lo:
        raise ShapeError("slice", [x.shape], f"empty range [{start}:{stop}] on axis {axis}")
    index = [np.s_[:]] * x.ndim
    index[axis] = np.s_[lo:hi]
    index = tuple(index)

    def bw(g):
        full = np.zeros(x.shape, dtype=g.dtype)
        full[index] = g
        return (full,)

    return Tensor._node(x.data[index], "slice", (x,), bw)


def gather_rows(x: Tensor, index, axis: int = 0) -> Tensor:
    """Select entries along ``axis`` by integer index (repeats allowed)."""
    idx = np.asarray(index, dtype=np.int64)
    axis = axis % x.ndim
    if idx.ndim != 1 or (idx.size and (idx.min() < -x.shape[axis] or idx.max() >= x.shape[axis])):
        raise ShapeError("gather_rows", [x.shape, idx.shape], f"index out of range on axis {axis}")

    def bw(g):
        full = np.zeros(x.shape, dtype=g.dtype)
        moved = np.moveaxis(full, axis, 0)
        np.add.at(moved, idx, np.moveaxis(g, axis, 0))
        return (full,)

    return Tensor._node(np.take(x.data, idx, axis=axis), "gather_rows", (x,), bw)


# losses --------------------------------------------------------------------

def mse(a: Tensor, b: Tensor) -> Tensor:
    """Mean of squared differences over all elements."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError("mse", [a.shape, b.shape])
    diff = a.data - b.data
    n = diff.size

    def bw(g):
        d = diff * (2.0 * g.reshape(()) / n)
        return d, -d

    return Tensor._node(np.array([np.mean(diff * diff)]), "mse", (a, b), bw)


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean over rows of -log softmax(logits)[target]."""
    t = np.asarray(targets, dtype=np.int64)
    if logits.ndim != 2 or t.shape != (logits.shape[0],):
        raise ShapeError("cross_entropy", [logits.shape, t.shape])
    n, k = logits.shape
    if t.size and (t.min() < 0 or t.max() >= k):
        raise ShapeError("cross_entropy", [logits.shape, t.shape], f"targets outside [0, {k})")
    lp = kernels.get().log_softmax_forward(logits.data)
    rows = np.arange(n)
    value = -lp[rows, t].mean()

    def bw(g):
        grad = np.exp(lp)
        grad[rows, t] -= 1.0
        return (grad * (g.reshape(()) / n),)

    return Tensor._node(np.array([value]), "cross_entropy", (logits,), bw)


def kl_div(log_probs: Tensor, target: Tensor) -> Tensor:
    """KL(target || exp(log_probs)), summed over classes and averaged over rows.

    Zero-probability target entries contribute nothing.
    """
    log_probs, target = as_tensor(log_probs), as_tensor(target)
    if log_probs.shape != target.shape or log_probs.ndim != 2:
        raise ShapeError("kl_div", [log_probs.shape, target.shape])
    n = log_probs.shape[0]
    p = target.data
    pos = p > 0
    log_p = np.where(pos, np.log(np.where(pos, p, 1.0)), 0.0)
    value = np.sum(np.where(pos, p * (log_p - log_probs.data), 0.0)) / n

    def bw(g):
        s = g.reshape(()) / n
        g_lp = -p * s
        g_t = np.where(pos, log_p + 1.0 - log_probs.data, 0.0) * s if target.requires_grad else None
        return g_lp, g_t

    return Tensor._node(np.array([value]), "kl_div", (log_probs, target), bw)


OPS = {
    "matmul": matmul,
    "add": add,
    "sub": sub,
    "mul": mul,
    "scale": scale,
    "gelu": gelu,
    "layer_norm": layer_norm,
    "softmax": softmax,
    "log_softmax": log_softmax,
    "mean": mean,
    "sum": sum,
    "reshape": reshape,
    "transpose": transpose,
    "concat": concat,
    "slice": slice,
    "gather_rows": gather_rows,
    "mse": mse,
    "cross_entropy": cross_entropy,
    "kl_div": kl_div,
}


def apply(kind: str, inputs: Sequence[Tensor], **attrs) -> Tensor:
    """Dispatch an op by name; ``attrs`` are the op's keyword arguments."""
    try:
        fn = OPS[kind]
    except KeyError:
        raise ValueError(f"unknown op kind {kind!r}") from None
    if kind == "concat":
        return fn(list(inputs), **attrs)
    return fn(*inputs, **attrs)


def constant(data) -> Tensor:
    return Tensor(np.asarray(data, dtype=get_default_dtype()))
