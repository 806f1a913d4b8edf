"""Finite-difference gradient checking for single ops."""
from __future__ import annotations

from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import ops
from .tensor import Tensor, backward, get_default_dtype, set_default_dtype

# Every op in the registry is smooth everywhere, so no resampling away from
# kinks is needed; inputs that must be distributions are built as such.


def _inputs_and_attrs(kind: str, shapes: Sequence[Tuple[int, ...]], rng: np.random.Generator):
    shapes = [tuple(s) for s in shapes]
    arrays: List[np.ndarray] = [rng.standard_normal(s) for s in shapes]
    attrs: Dict = {}
    if kind == "layer_norm":
        d = shapes[0][-1]
        if len(arrays) == 1:
            arrays += [1.0 + 0.5 * rng.standard_normal(d), 0.5 * rng.standard_normal(d)]
    elif kind == "scale":
        attrs["factor"] = float(rng.uniform(-2.0, 2.0))
    elif kind in ("mean", "sum"):
        attrs["axes"] = (0,) if len(shapes[0]) > 1 else None
    elif kind == "reshape":
        attrs["shape"] = (-1,)
    elif kind == "transpose":
        attrs["axes"] = tuple(reversed(range(len(shapes[0]))))
    elif kind == "concat":
        attrs["axis"] = 0
    elif kind == "slice":
        attrs.update(axis=0, start=1, stop=None)
    elif kind == "gather_rows":
        n = shapes[0][0]
        attrs.update(index=rng.integers(0, n, size=n + 1), axis=0)
    elif kind == "mse" and len(arrays) == 1:
        arrays.append(rng.standard_normal(shapes[0]))
    elif kind == "cross_entropy":
        n, k = shapes[0]
        attrs["targets"] = rng.integers(0, k, size=n)
    elif kind == "kl_div":
        logits = rng.standard_normal(shapes[0])
        lp = logits - np.log(np.exp(logits).sum(-1, keepdims=True))
        t = np.exp(rng.standard_normal(shapes[0]))
        arrays = [lp, t / t.sum(-1, keepdims=True)]
    return arrays, attrs


def _call(kind: str, tensors: List[Tensor], attrs: Dict) -> Tensor:
    return ops.apply(kind, tensors, **attrs)


def grad_check(
    kind: str,
    shapes: Sequence[Tuple[int, ...]],
    seed: int = 0,
    h: float = 1e-5,
    floor: float = 1e-3,
    attrs: Optional[Dict] = None,
) -> float:
    """Largest relative error between analytic and central-difference gradients.

    The op output is reduced to a scalar by a random projection. Relative
    error per element is ``|a - n| / max(|a|, |n|, floor)``; the floor keeps
    gradients that are zero up to roundoff from dominating.
    Runs in float64 regardless of the configured default.
    """
    prev = get_default_dtype()
    set_default_dtype(np.float64)
    try:
        rng = np.random.default_rng(seed)
        arrays, auto_attrs = _inputs_and_attrs(kind, shapes, rng)
        if attrs:
            auto_attrs.update(attrs)
        tensors = [Tensor(a, requires_grad=True) for a in arrays]
        out = _call(kind, tensors, auto_attrs)
        proj = rng.standard_normal(out.shape)
        loss = ops.sum(ops.mul(out, Tensor(proj)))
        grads = backward(loss, {str(i): t for i, t in enumerate(tensors)})

        def f() -> float:
            return float(np.sum(_call(kind, tensors, auto_attrs).data * proj))

        worst = 0.0
        for i, t in enumerate(tensors):
            flat = t.data.reshape(-1)
            analytic = grads[str(i)].reshape(-1)
            for j in range(flat.size):
                orig = flat[j]
                flat[j] = orig + h
                up = f()
                flat[j] = orig - h
                down = f()
                flat[j] = orig
                num = (up - down) / (2.0 * h)
                err = abs(analytic[j] - num) / max(abs(analytic[j]), abs(num), floor)
                worst = max(worst, err)
        return worst
    finally:
        set_default_dtype(prev)


DEFAULT_SHAPES: Dict[str, List[Tuple[int, ...]]] = {
    "matmul": [(2, 3, 4), (4, 5)],
    "add": [(3, 4), (4,)],
    "sub": [(2, 3, 4), (3, 1)],
    "mul": [(3, 4), (1, 4)],
    "scale": [(3, 4)],
    "gelu": [(4, 4)],
    "layer_norm": [(3, 8)],
    "softmax": [(3, 5)],
    "log_softmax": [(3, 5)],
    "mean": [(3, 4)],
    "sum": [(3, 4)],
    "reshape": [(2, 3, 2)],
    "transpose": [(2, 3, 4)],
    "concat": [(2, 3), (1, 3), (3, 3)],
    "slice": [(4, 3)],
    "gather_rows": [(4, 3)],
    "mse": [(3, 4), (3, 4)],
    "cross_entropy": [(4, 5)],
    "kl_div": [(4, 5)],
}
