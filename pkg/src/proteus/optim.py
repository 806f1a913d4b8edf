"""AdamW with linear warmup and cosine decay."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, Mapping, Optional

import numpy as np

from .autodiff import Tensor
from .autodiff.tensor import NonFiniteError, is_debug
from .errors import ConfigError


@dataclass
class Schedule:
    base_lr: float = 5e-4
    min_lr: float = 1e-5
    warmup_steps: int = 10
    total_steps: int = 200
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    grad_clip_norm: Optional[float] = None

    def __post_init__(self):
        if self.total_steps < 1:
            raise ConfigError("total_steps", "must be >= 1")
        if not 0 <= self.warmup_steps < self.total_steps:
            raise ConfigError("warmup_steps", f"must lie in [0, total_steps={self.total_steps})")
        if self.min_lr > self.base_lr:
            raise ConfigError("min_lr", "must not exceed base_lr")
        if self.base_lr < 0 or self.min_lr < 0:
            raise ConfigError("base_lr", "learning rates must be non-negative")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay", "must be non-negative")
        if self.grad_clip_norm is not None and self.grad_clip_norm <= 0:
            raise ConfigError("grad_clip_norm", "must be positive when set")

    def to_dict(self) -> dict:
        return asdict(self)


def lr_at(step: int, s: Schedule) -> float:
    if not 0 <= step <= s.total_steps:
        raise ValueError(f"step {step} outside [0, {s.total_steps}]")
    if step < s.warmup_steps:
        return s.base_lr * step / s.warmup_steps
    t = (step - s.warmup_steps) / (s.total_steps - s.warmup_steps)
    return s.min_lr + 0.5 * (s.base_lr - s.min_lr) * (1.0 + math.cos(math.pi * t))


@dataclass
class OptState:
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    def to_tensors(self, prefix: str = "__opt__.") -> Dict[str, np.ndarray]:
        out = {f"{prefix}m.{k}": a for k, a in self.m.items()}
        out.update({f"{prefix}v.{k}": a for k, a in self.v.items()})
        out[f"{prefix}step"] = np.array([self.step], dtype=np.float64)
        return out

    @classmethod
    def from_tensors(cls, tensors: Mapping[str, np.ndarray], prefix: str = "__opt__.") -> "OptState":
        state = cls()
        for key, arr in tensors.items():
            if key.startswith(prefix + "m."):
                state.m[key[len(prefix) + 2:]] = np.asarray(arr, dtype=np.float64)
            elif key.startswith(prefix + "v."):
                state.v[key[len(prefix) + 2:]] = np.asarray(arr, dtype=np.float64)
        if prefix + "step" in tensors:
            state.step = int(np.asarray(tensors[prefix + "step"]).reshape(-1)[0])
        return state


def global_norm(grads: Mapping[str, np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))


def clip_global_norm(grads: Mapping[str, np.ndarray], max_norm: float) -> Dict[str, np.ndarray]:
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    norm = global_norm(grads)
    if norm <= max_norm:
        return dict(grads)
    factor = max_norm / norm
    return {k: g * factor for k, g in grads.items()}


def adamw_step(
    params: Mapping[str, Tensor],
    grads: Mapping[str, np.ndarray],
    state: OptState,
    s: Schedule,
    step: int,
    decay: Optional[Callable[[str], bool]] = None,
) -> float:
    """Apply one AdamW update in place and return the learning rate used.

    ``decay(name)`` selects the parameters that receive weight decay; by
    default every name ending in ``.weight`` that is not a norm scale.
    """
    if decay is None:
        from .vit import is_decayed as decay
    if is_debug():
        for k, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise NonFiniteError(f"adamw_step: non-finite gradient for {k}")
    if s.grad_clip_norm is not None:
        grads = clip_global_norm(grads, s.grad_clip_norm)
    lr = lr_at(step, s)
    state.step += 1
    t = state.step
    bc1 = 1.0 - s.beta1 ** t
    bc2 = 1.0 - s.beta2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name}")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = s.beta1 * m + (1.0 - s.beta1) * g
        v = s.beta2 * v + (1.0 - s.beta2) * (g * g)
        state.m[name], state.v[name] = m, v
        if lr == 0.0:
            continue
        update = (m / bc1) / (np.sqrt(v / bc2) + s.epsilon)
        data = p.data
        if s.weight_decay and decay(name):
            data = data * (1.0 - lr * s.weight_decay)
        p.data = np.ascontiguousarray(data - lr * update, dtype=p.data.dtype)
    return lr
