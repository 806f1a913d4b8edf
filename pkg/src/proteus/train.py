"""Training loops (supervised teacher, distillation) and metrics logging."""
from __future__ import annotations

import csv
import io
import math
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, Optional

import numpy as np

from .autodiff import backward, ops
from .autodiff.tensor import is_deterministic
from .data import AugRecipe, DatasetContainer, augment_train, eval_view, iter_batches
from .distill import LossBreakdown, Objective, ProjectionHead, distill_step, make_heads, trainable_params
from .optim import OptState, Schedule, adamw_step, lr_at
from .vit import Model, make_classifier, vit_forward

METRICS_VERSION = "proteus-metrics/1"
METRICS_FIELDS = ("step", "epoch", "lr", "token", "feat", "patch", "ce", "kl", "total", "wall_ms")


class MetricsWriter:
    """CSV log with a fixed, versioned header.

    Under the determinism flag ``wall_ms`` is written as 0 so repeated runs
    produce identical bytes; measured timings then go to ``timing_path``.
    """

    def __init__(self, path, timing_path=None):
        self.path = Path(path)
        self.timing_path = Path(timing_path) if timing_path else None
        self._fh = self.path.open("w", newline="")
        self._fh.write(f"# {METRICS_VERSION}\n")
        self._csv = csv.writer(self._fh, lineterminator="\n")
        self._csv.writerow(METRICS_FIELDS)
        self._timing = None
        if self.timing_path is not None:
            self._timing = self.timing_path.open("w", newline="")
            self._timing.write("step,wall_ms\n")
        self._last_step = -1

    def write(self, step: int, epoch: int, lr: float, br: LossBreakdown, wall_ms: float):
        if step <= self._last_step:
            raise ValueError(f"metrics steps must increase: {step} after {self._last_step}")
        self._last_step = step
        logged_ms = 0.0 if is_deterministic() else wall_ms
        self._csv.writerow([step, epoch, repr(float(lr)), repr(br.token), repr(br.feat), repr(br.patch),
                            repr(br.ce), repr(br.kl), repr(br.total), f"{logged_ms:.3f}"])
        if self._timing is not None:
            self._timing.write(f"{step},{wall_ms:.3f}\n")

    def close(self):
        self._fh.close()
        if self._timing is not None:
            self._timing.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_metrics(path) -> List[Dict[str, float]]:
    """Parse a metrics file, enforcing the schema (header, types, finite values, increasing steps)."""
    text = Path(path).read_text()
    lines = text.splitlines()
    if not lines or lines[0] != f"# {METRICS_VERSION}":
        raise ValueError(f"{path}: missing or unknown metrics version line")
    reader = csv.reader(io.StringIO("\n".join(lines[1:])))
    header = next(reader, None)
    if tuple(header or ()) != METRICS_FIELDS:
        raise ValueError(f"{path}: unexpected header {header}")
    rows, last = [], -1
    for raw in reader:
        if len(raw) != len(METRICS_FIELDS):
            raise ValueError(f"{path}: row has {len(raw)} fields")
        row = {"step": int(raw[0]), "epoch": int(raw[1])}
        for key, val in zip(METRICS_FIELDS[2:], raw[2:]):
            v = float(val)
            if not math.isfinite(v):
                raise ValueError(f"{path}: non-finite {key} at step {row['step']}")
            row[key] = v
        if row["step"] <= last:
            raise ValueError(f"{path}: steps not strictly increasing at {row['step']}")
        last = row["step"]
        rows.append(row)
    return rows


def _batch_images(ds: DatasetContainer, idx: np.ndarray, recipe: Optional[AugRecipe], rng: np.random.Generator,
                  image_size: int) -> np.ndarray:
    if recipe is None:
        return eval_view(ds, idx, image_size)
    mean, std = ds.provenance.get("mean"), ds.provenance.get("std")
    if mean is None or std is None:
        mean, std = ds.channel_stats()
    return np.stack([augment_train(ds.images[i], recipe, rng, mean, std) for i in idx])


def steps_per_epoch(n: int, batch_size: int) -> int:
    return max(1, n // batch_size)


@dataclass
class DistillResult:
    history: List[LossBreakdown]
    epochs: List[int]
    heads: Dict[str, ProjectionHead]
    classifier: Optional[Dict]
    opt_state: OptState


def run_distill(teacher: Model, student: Model, ds: DatasetContainer, objective: Objective, schedule: Schedule,
                epochs: int, batch_size: int, seed: int, recipe: Optional[AugRecipe] = None,
                metrics: Optional[MetricsWriter] = None,
                on_step: Optional[Callable[[int, LossBreakdown], None]] = None) -> DistillResult:
    """Distil ``teacher`` into ``student`` over ``ds``.

    In the feature-matching objective labels are never read. Logit
    distillation reads them once (for the CE term) and needs ``teacher`` to
    carry a classifier whose width matches ``ds.class_count``.
    """
    rng = np.random.default_rng([seed, 1])
    heads = make_heads(objective, student.config.dim, teacher.config.dim, seed)
    classifier = None
    labels = None
    if objective.kind == "kd":
        classifier = make_classifier(student.config.dim, ds.class_count, seed)
        if objective.use_ce:
            labels = ds.labels.astype(np.int64)
    opt = OptState()
    history, epoch_of = [], []
    step = 0
    n = len(ds)
    for epoch in range(epochs):
        for idx in iter_batches(n, batch_size, seed, epoch):
            t0 = time.perf_counter()
            images = _batch_images(ds, idx, recipe, rng, student.config.image_size)
            br = distill_step(teacher, student, heads, images, objective, rng, opt, schedule, step,
                              classifier, None if labels is None else labels[idx])
            wall = (time.perf_counter() - t0) * 1e3
            if metrics is not None:
                metrics.write(step, epoch, lr_at(step, schedule), br, wall)
            if on_step is not None:
                on_step(step, br)
            history.append(br)
            epoch_of.append(epoch)
            step += 1
    return DistillResult(history, epoch_of, heads, classifier, opt)


def train_supervised(model: Model, ds: DatasetContainer, schedule: Schedule, epochs: int, batch_size: int,
                     seed: int, recipe: Optional[AugRecipe] = None,
                     metrics: Optional[MetricsWriter] = None) -> List[float]:
    """Cross-entropy training of encoder + linear classifier (used to build teachers)."""
    if model.classifier is None:
        model.classifier = make_classifier(model.config.dim, ds.class_count, seed)
    labels = ds.labels.astype(np.int64)
    rng = np.random.default_rng([seed, 2])
    params = trainable_params(model, None, model.classifier)
    opt = OptState()
    losses, step = [], 0
    for epoch in range(epochs):
        for idx in iter_batches(len(ds), batch_size, seed, epoch):
            t0 = time.perf_counter()
            images = _batch_images(ds, idx, recipe, rng, model.config.image_size)
            out = vit_forward(model.params, model.config, images)
            loss = ops.cross_entropy(model.logits(out.cls), labels[idx])
            grads = backward(loss, params)
            adamw_step(params, grads, opt, schedule, step)
            if metrics is not None:
                metrics.write(step, epoch, lr_at(step, schedule), LossBreakdown(ce=loss.item(), total=loss.item()),
                              (time.perf_counter() - t0) * 1e3)
            losses.append(loss.item())
            step += 1
    return losses
