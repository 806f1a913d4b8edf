"""Dense tensors with reverse-mode differentiation."""
from . import kernels, ops
from .gradcheck import grad_check
from .ops import OPS, apply
from .tensor import (
    GradMap,
    NonFiniteError,
    ShapeError,
    Tensor,
    as_tensor,
    backward,
    get_default_dtype,
    is_debug,
    is_deterministic,
    is_grad_enabled,
    no_grad,
    set_debug,
    set_default_dtype,
    set_deterministic,
)

__all__ = [
    "GradMap",
    "NonFiniteError",
    "OPS",
    "ShapeError",
    "Tensor",
    "apply",
    "as_tensor",
    "backward",
    "get_default_dtype",
    "grad_check",
    "is_debug",
    "is_deterministic",
    "is_grad_enabled",
    "kernels",
    "no_grad",
    "ops",
    "set_debug",
    "set_default_dtype",
    "set_deterministic",
]
