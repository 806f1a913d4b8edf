"""Run configuration: JSON in, fully materialised JSON out."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional

from .data import AugRecipe
from .distill import LossWeights, Objective
from .errors import ConfigError
from .optim import Schedule
from .vit import ViTConfig

MODES = ("train_teacher", "distill", "probe", "make_dataset", "visualize")
DTYPES = ("float64", "float32")


def _teacher_default() -> ViTConfig:
    return ViTConfig(dim=48, depth=4, heads=4)


@dataclass
class RunConfig:
    mode: str = "distill"
    seed: int = 0
    deterministic: bool = True
    debug: bool = False
    dtype: str = "float64"
    out: str = "run"
    data: Optional[str] = None
    teacher_checkpoint: Optional[str] = None
    teacher: ViTConfig = field(default_factory=_teacher_default)
    student: ViTConfig = field(default_factory=ViTConfig)
    objective: Objective = field(default_factory=Objective)
    schedule: Schedule = field(default_factory=Schedule)
    epochs: int = 5
    batch_size: int = 32
    augment: Optional[AugRecipe] = None
    init: str = "random"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError("mode", f"must be one of {MODES}, got {self.mode!r}")
        if self.dtype not in DTYPES:
            raise ConfigError("dtype", f"must be one of {DTYPES}, got {self.dtype!r}")
        if self.init not in ("random", "inherit"):
            raise ConfigError("init", f"must be 'random' or 'inherit', got {self.init!r}")
        if not isinstance(self.seed, int) or isinstance(self.seed, bool) or self.seed < 0:
            raise ConfigError("seed", f"must be a non-negative integer, got {self.seed!r}")
        if not isinstance(self.epochs, int) or self.epochs < 1:
            raise ConfigError("epochs", f"must be a positive integer, got {self.epochs!r}")
        if not isinstance(self.batch_size, int) or self.batch_size < 1:
            raise ConfigError("batch_size", f"must be a positive integer, got {self.batch_size!r}")

    def check_paths(self, *names: str) -> None:
        for name in names:
            value = getattr(self, name)
            if value is None:
                raise ConfigError(name, "is required for this command")
            if not Path(value).exists():
                raise ConfigError(name, f"path does not exist: {value}")

    def to_dict(self) -> Dict[str, Any]:
        return {
            "mode": self.mode, "seed": self.seed, "deterministic": self.deterministic, "debug": self.debug,
            "dtype": self.dtype, "out": self.out, "data": self.data, "teacher_checkpoint": self.teacher_checkpoint,
            "teacher": self.teacher.to_dict(), "student": self.student.to_dict(),
            "objective": self.objective.to_dict(), "schedule": self.schedule.to_dict(),
            "epochs": self.epochs, "batch_size": self.batch_size,
            "augment": None if self.augment is None else self.augment.to_dict(), "init": self.init,
        }

    def write(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")


def _build(cls, value, name: str):
    if value is None or isinstance(value, cls):
        return value
    if not isinstance(value, dict):
        raise ConfigError(name, f"expected an object, got {type(value).__name__}")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(value) - known)
    if unknown:
        raise ConfigError(f"{name}.{unknown[0]}", "unknown field")
    try:
        return cls(**value)
    except ConfigError as exc:
        path = exc.field if exc.field.startswith(name + ".") else f"{name}.{exc.field}"
        raise ConfigError(path, str(exc).split(": ", 1)[-1]) from None
    except TypeError as exc:
        raise ConfigError(name, str(exc)) from None


def from_dict(d: Dict[str, Any]) -> RunConfig:
    if not isinstance(d, dict):
        raise ConfigError("config", "top level must be a JSON object")
    known = {f.name for f in dataclasses.fields(RunConfig)}
    unknown = sorted(set(d) - known)
    if unknown:
        raise ConfigError(unknown[0], "unknown config field")
    d = dict(d)
    for key, cls in (("teacher", ViTConfig), ("student", ViTConfig), ("schedule", Schedule), ("augment", AugRecipe)):
        if key in d:
            d[key] = _build(cls, d[key], key)
    if "objective" in d and isinstance(d["objective"], dict):
        obj = dict(d["objective"])
        if isinstance(obj.get("weights"), dict):
            obj["weights"] = _build(LossWeights, obj["weights"], "objective.weights")
        d["objective"] = _build(Objective, obj, "objective")
    return RunConfig(**d)


def load(path) -> RunConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError("config", f"file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError("config", f"invalid JSON ({exc})") from None
    return from_dict(raw)
