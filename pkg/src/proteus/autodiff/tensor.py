"""Tensor type, graph recording and reverse-mode traversal."""
from __future__ import annotations

import contextlib
from typing import Callable, Dict, Iterable, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

ArrayLike = Union[np.ndarray, float, int, Sequence]


class ShapeError(ValueError):
    """Raised when an op receives operands of incompatible shape."""

    def __init__(self, op: str, shapes: Iterable[Tuple[int, ...]], detail: str = ""):
        self.op = op
        self.shapes = [tuple(s) for s in shapes]
        msg = f"{op}: incompatible shapes {self.shapes}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class NonFiniteError(FloatingPointError):
    """Raised in debug mode when an op produces NaN or Inf."""


class _State:
    dtype = np.float64
    debug = False
    deterministic = False
    grad_enabled = True


_state = _State()


def set_default_dtype(dtype) -> None:
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported dtype {dtype}; use float32 or float64")
    _state.dtype = dtype.type


def get_default_dtype():
    return _state.dtype


def set_debug(flag: bool) -> None:
    _state.debug = bool(flag)


def is_debug() -> bool:
    return _state.debug


def set_deterministic(flag: bool) -> None:
    """Pin BLAS to one thread so matmul reductions happen in a fixed order."""
    _state.deterministic = bool(flag)
    from .threads import apply_thread_limit

    apply_thread_limit()


def is_deterministic() -> bool:
    return _state.deterministic


@contextlib.contextmanager
def no_grad():
    prev = _state.grad_enabled
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


def is_grad_enabled() -> bool:
    return _state.grad_enabled


BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tensor:
    """Dense array that can take part in a differentiation graph.

    Leaves are created directly; interior nodes are created by ops and keep
    references to their inputs plus a closure computing input gradients.
    """

    __slots__ = ("data", "requires_grad", "name", "op", "parents", "_backward")
    __array_priority__ = 1000

    def __init__(self, data: ArrayLike, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.array(data, dtype=_state.dtype, copy=True, order="C")
        if arr.ndim == 0:
            arr = arr.reshape(1)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.name = name
        self.op = "leaf"
        self.parents: Tuple[Tensor, ...] = ()
        self._backward: Optional[BackwardFn] = None

    @classmethod
    def _node(cls, data: np.ndarray, op: str, parents: Tuple["Tensor", ...], backward: BackwardFn) -> "Tensor":
        out = cls.__new__(cls)
        if data.dtype != _state.dtype:
            data = data.astype(_state.dtype)
        if data.ndim == 0:
            data = data.reshape(1)
        out.data = np.ascontiguousarray(data)
        out.name = None
        out.op = op
        if _state.debug and not np.all(np.isfinite(out.data)):
            raise NonFiniteError(f"{op}: non-finite output")
        if _state.grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out.parents = parents
            out._backward = backward
        else:
            out.requires_grad = False
            out.parents = ()
            out._backward = None
        return out

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op}{tag}, requires_grad={self.requires_grad})"

    # operator sugar; implementations live in ops
    def __add__(self, other):
        from . import ops

        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops

        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops

        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops

        if np.isscalar(other):
            return ops.scale(self, float(other))
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from . import ops

        return ops.scale(self, -1.0)

    def __matmul__(self, other):
        from . import ops

        return ops.matmul(self, other)

    def reshape(self, *shape):
        from . import ops

        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def transpose(self, *axes):
        from . import ops

        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return ops.transpose(self, axes)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


GradMap = Dict[object, np.ndarray]


def _topo_order(root: Tensor):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, leaves: Optional[Mapping[str, Tensor]] = None) -> GradMap:
    """Reverse-mode gradients of a scalar ``loss``.

    With ``leaves`` given, the result is keyed by those names and every leaf
    gets an entry (zeros when it does not reach the loss). Otherwise every
    requires-grad leaf in the graph is returned, keyed by its ``name`` or,
    for unnamed leaves, by ``id(leaf)``.
    """
    if loss.size != 1:
        raise ShapeError("backward", [loss.shape], "loss must be scalar")
    grads: Dict[int, np.ndarray] = {}
    found: Dict[int, Tensor] = {}
    if loss.requires_grad:
        grads[id(loss)] = np.ones_like(loss.data)
        for node in reversed(_topo_order(loss)):
            g = grads.pop(id(node), None) if node.parents else grads.get(id(node))
            if not node.parents:
                found[id(node)] = node
                continue
            if g is None:
                continue
            in_grads = node._backward(g)
            for parent, pg in zip(node.parents, in_grads):
                if pg is None or not parent.requires_grad:
                    continue
                if pg.shape != parent.shape:
                    raise ShapeError(node.op + ".backward", [pg.shape, parent.shape])
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
    if _state.debug:
        for k, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise NonFiniteError("backward: non-finite gradient")
    if leaves is not None:
        out: GradMap = {}
        for name, leaf in leaves.items():
            g = grads.get(id(leaf))
            out[name] = np.zeros_like(leaf.data) if g is None else g
        return out
    out = {}
    for key, leaf in found.items():
        if leaf.requires_grad:
            g = grads.get(key)
            out[leaf.name if leaf.name is not None else key] = np.zeros_like(leaf.data) if g is None else g
    return out
