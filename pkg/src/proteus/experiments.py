"""Desk-scale ablation presets.

``table1``: logit distillation (hard/soft, with/without CE) against hint
distillation, judged by a linear probe on classes the student never saw.
``table2``: combinations of the token / feature / patch objectives.
``inherit``: student initialised from selected teacher weights vs fresh.
"""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from .data import AugRecipe, DatasetContainer, ToySpec, gen_toy_dataset, subsample
from .distill import LossWeights, Objective
from .eval import FeatureMatrix, extract_features, probe_lbfgs
from .optim import Schedule
from .train import MetricsWriter, run_distill, steps_per_epoch, train_supervised
from .vit import Model, ViTConfig, init_params, weight_inherit

log = logging.getLogger(__name__)


@dataclass
class DeskSetup:
    classes: int = 10
    per_class: int = 150
    train_per_class: int = 120
    proxy_class_fraction: float = 0.5
    image_size: int = 16
    channels: int = 3
    noise: float = 0.25
    teacher: dict = field(default_factory=lambda: dict(dim=48, depth=4, heads=4, patch_size=4))
    student: dict = field(default_factory=lambda: dict(dim=32, depth=2, heads=2, patch_size=4))
    teacher_epochs: int = 20
    teacher_lr: float = 2e-3
    distill_epochs: int = 6
    distill_lr: float = 2e-3
    batch_size: int = 32
    crop_scale: Tuple[float, float] = (0.5, 1.0)
    seeds: Tuple[int, ...] = (0, 1, 2)

    def vit(self, which: str) -> ViTConfig:
        d = dict(getattr(self, which))
        d.setdefault("image_size", self.image_size)
        d.setdefault("channels", self.channels)
        return ViTConfig(**d)

    def recipe(self) -> Optional[AugRecipe]:
        if self.crop_scale is None:
            return None
        return AugRecipe(crop_scale=tuple(self.crop_scale), output_size=self.image_size)

    def schedule(self, n_images: int, epochs: int, lr: float) -> Schedule:
        total = epochs * steps_per_epoch(n_images, self.batch_size)
        return Schedule(base_lr=lr, min_lr=lr * 0.01, warmup_steps=max(1, total // 10), total_steps=total,
                        weight_decay=0.05)


def quick_setup(**overrides) -> DeskSetup:
    """A smaller setup for smoke tests."""
    base = dict(per_class=30, train_per_class=20, teacher_epochs=4, distill_epochs=3, seeds=(0,), noise=0.08,
                teacher=dict(dim=32, depth=2, heads=2, patch_size=4))
    base.update(overrides)
    return DeskSetup(**base)


def subset(ds: DatasetContainer, idx: np.ndarray, note: str) -> DatasetContainer:
    labels = ds._labels[idx] if ds.has_labels else None
    out = DatasetContainer(ds.images[idx], labels, ds.class_count, {"source": ds.provenance, "op": note})
    for key in ("mean", "std"):
        if key in ds.provenance:
            out.provenance[key] = ds.provenance[key]
    return out


def split_per_class(ds: DatasetContainer, first: int) -> Tuple[DatasetContainer, DatasetContainer]:
    """First ``first`` images of each class vs the rest."""
    labels = ds.labels
    head, tail = [], []
    for k in range(ds.class_count):
        idx = np.flatnonzero(labels == k)
        head.append(idx[:first])
        tail.append(idx[first:])
    return subset(ds, np.concatenate(head), "split_head"), subset(ds, np.concatenate(tail), "split_tail")


@dataclass
class World:
    """Everything shared by the runs of one seed."""

    seed: int
    pool: DatasetContainer
    evalset: DatasetContainer
    proxy: DatasetContainer
    kept: List[int]
    held: List[int]
    teacher: Model


def build_world(setup: DeskSetup, seed: int) -> World:
    full = gen_toy_dataset(ToySpec(classes=setup.classes, per_class=setup.per_class, size=setup.image_size,
                                   channels=setup.channels, seed=seed, noise=setup.noise))
    pool, evalset = split_per_class(full, setup.train_per_class)
    proxy = subsample(pool, "class_fraction", setup.proxy_class_fraction, seed=seed)
    kept = list(proxy.provenance["kept_classes"])
    held = [k for k in range(setup.classes) if k not in kept]
    tcfg = setup.vit("teacher")
    teacher = Model(tcfg, init_params(tcfg, seed=1000 + seed))
    sched = setup.schedule(len(pool), setup.teacher_epochs, setup.teacher_lr)
    train_supervised(teacher, pool, sched, setup.teacher_epochs, setup.batch_size, seed, setup.recipe())
    return World(seed, pool, evalset, proxy, kept, held, teacher.frozen())


def restrict_classifier(teacher: Model, classes: List[int]) -> Model:
    """Teacher whose classifier only scores ``classes`` (in that order)."""
    from .autodiff import Tensor

    w = teacher.classifier["classifier.weight"].data[:, classes]
    b = teacher.classifier["classifier.bias"].data[classes]
    clf = {"classifier.weight": Tensor(w, name="classifier.weight"),
           "classifier.bias": Tensor(b, name="classifier.bias")}
    return Model(teacher.config, teacher.params, clf)


def class_probe(model: Model, evalset: DatasetContainer, classes: List[int], seed: int) -> float:
    """Probe test accuracy on ``classes`` of the evaluation images (2/3 fit, 1/3 test per class)."""
    fm = extract_features(model, evalset)
    train_idx, test_idx = [], []
    for k in classes:
        idx = np.flatnonzero(fm.labels == k)
        cut = (2 * idx.size) // 3
        train_idx.append(idx[:cut])
        test_idx.append(idx[cut:])
    res = probe_lbfgs(fm.take(np.concatenate(train_idx)), test=fm.take(np.concatenate(test_idx)), seed=seed)
    return float(res.test_accuracy)


TABLE1_VARIANTS: Dict[str, Objective] = {
    "hard_kl_ce": Objective(kind="kd", kd_mode="hard", use_ce=True),
    "soft_kl_ce": Objective(kind="kd", kd_mode="soft", use_ce=True),
    "hard_kl": Objective(kind="kd", kd_mode="hard", use_ce=False),
    "soft_kl": Objective(kind="kd", kd_mode="soft", use_ce=False),
    "hint": Objective(kind="proteus", weights=LossWeights(token=1.0, feat=1.0, patch=0.0)),
}

TABLE2_VARIANTS: Dict[str, Objective] = {
    "token": Objective(weights=LossWeights(token=1.0, feat=0.0, patch=0.0)),
    "feat": Objective(weights=LossWeights(token=0.0, feat=1.0, patch=0.0)),
    "token+feat": Objective(weights=LossWeights(token=1.0, feat=1.0, patch=0.0)),
    "token+feat+patch": Objective(weights=LossWeights(token=1.0, feat=1.0, patch=1.0)),
}


def epoch_means(values: List[float], epochs: List[int]) -> List[float]:
    out = []
    for e in sorted(set(epochs)):
        out.append(float(np.mean([v for v, ep in zip(values, epochs) if ep == e])))
    return out


def is_monotone_decreasing(values: List[float]) -> bool:
    return all(b < a for a, b in zip(values, values[1:]))


def distill_one(setup: DeskSetup, world: World, objective: Objective, out_dir: Path,
                student: Optional[Model] = None) -> Tuple[Model, dict]:
    scfg = setup.vit("student")
    if student is None:
        student = Model(scfg, init_params(scfg, seed=2000 + world.seed))
    teacher = world.teacher
    if objective.kind == "kd":
        teacher = restrict_classifier(teacher, world.kept)
    sched = setup.schedule(len(world.proxy), setup.distill_epochs, setup.distill_lr)
    out_dir.mkdir(parents=True, exist_ok=True)
    with MetricsWriter(out_dir / "metrics.csv") as mw:
        res = run_distill(teacher, student, world.proxy, objective, sched, setup.distill_epochs, setup.batch_size,
                          world.seed, setup.recipe(), mw)
    first, last = res.history[0], res.history[-1]
    info = {
        "seed": world.seed,
        "steps": len(res.history),
        "first_total": first.total,
        "final_total": last.total,
        "final": last.as_dict(),
        "patch_epoch_means": epoch_means([b.patch for b in res.history], res.epochs),
        "total_epoch_means": epoch_means([b.total for b in res.history], res.epochs),
        "proxy_label_reads": world.proxy.label_reads,
        "heldout_probe": class_probe(student, world.evalset, world.held, world.seed),
        "proxy_probe": class_probe(student, world.evalset, world.kept, world.seed),
    }
    (out_dir / "run.json").write_text(json.dumps({"objective": objective.to_dict(), **info}, indent=2))
    return student, info


def _write_summary(out: Path, rows: List[dict]) -> None:
    keys = list(rows[0].keys())
    with (out / "summary.csv").open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow(r)


def run_table1(setup: DeskSetup, out: Path) -> dict:
    out.mkdir(parents=True, exist_ok=True)
    per_variant: Dict[str, List[dict]] = {k: [] for k in TABLE1_VARIANTS}
    for seed in setup.seeds:
        world = build_world(setup, seed)
        for name, obj in TABLE1_VARIANTS.items():
            before = world.proxy.label_reads
            _, info = distill_one(setup, world, obj, out / f"seed{seed}" / name)
            info["label_reads_during_run"] = world.proxy.label_reads - before
            per_variant[name].append(info)
            log.info("table1 seed=%d %s heldout=%.3f proxy=%.3f", seed, name, info["heldout_probe"],
                     info["proxy_probe"])
    rows = []
    for name, infos in per_variant.items():
        obj = TABLE1_VARIANTS[name]
        rows.append({
            "variant": name,
            "source": "hint" if obj.kind == "proteus" else f"{obj.kd_mode}_logits",
            "kl": obj.kind == "kd",
            "ce": obj.kind == "kd" and obj.use_ce,
            "mse": obj.kind == "proteus",
            "heldout_probe_mean": float(np.mean([i["heldout_probe"] for i in infos])),
            "proxy_probe_mean": float(np.mean([i["proxy_probe"] for i in infos])),
            "heldout_probe_per_seed": " ".join(f"{i['heldout_probe']:.4f}" for i in infos),
            "seeds": " ".join(str(i["seed"]) for i in infos),
        })
    _write_summary(out, rows)
    by = {r["variant"]: r for r in rows}
    gap = by["hint"]["heldout_probe_mean"] - by["soft_kl_ce"]["heldout_probe_mean"]
    report = {"preset": "table1", "rows": rows, "hint_minus_soft_kl_ce": gap,
              "direction_holds": bool(gap >= 0), "setup": asdict(setup)}
    if gap < 0:
        log.warning("table1: hint distillation trails soft-logit+CE on held-out classes (gap %.4f)", gap)
    (out / "summary.json").write_text(json.dumps(report, indent=2))
    return report


def run_table2(setup: DeskSetup, out: Path, single_seed: bool = True) -> dict:
    """One run per objective combination (first seed only unless ``single_seed`` is off)."""
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for seed in setup.seeds[:1] if single_seed else setup.seeds:
        world = build_world(setup, seed)
        for name, obj in TABLE2_VARIANTS.items():
            _, info = distill_one(setup, world, obj, out / f"seed{seed}" / name)
            w = obj.weights
            rows.append({
                "objectives": name, "token": w.token > 0, "feat": w.feat > 0, "patch": w.patch > 0,
                "seed": seed, "final_token": info["final"]["token"], "final_feat": info["final"]["feat"],
                "final_patch": info["final"]["patch"], "final_total": info["final_total"],
                "heldout_probe": info["heldout_probe"], "proxy_probe": info["proxy_probe"],
                "patch_monotone": is_monotone_decreasing(info["patch_epoch_means"]) if w.patch > 0 else "",
                "patch_epoch_means": " ".join(f"{v:.5f}" for v in info["patch_epoch_means"]) if w.patch > 0 else "",
            })
            log.info("table2 seed=%d %s heldout=%.3f", seed, name, info["heldout_probe"])
    _write_summary(out, rows)
    report = {"preset": "table2", "rows": rows, "setup": asdict(setup)}
    (out / "summary.json").write_text(json.dumps(report, indent=2))
    return report


def run_inherit(setup: DeskSetup, out: Path) -> dict:
    """Distil from a trained teacher into a fresh student and an inherited one."""
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    obj = Objective()
    scfg = setup.vit("student")
    for seed in setup.seeds:
        world = build_world(setup, seed)
        inherited, report = weight_inherit(world.teacher.params, scfg, seed=seed)
        starts = {"fresh": None, "inherit": Model(scfg, inherited)}
        for name, student in starts.items():
            _, info = distill_one(setup, world, obj, out / f"seed{seed}" / name, student)
            rows.append({"init": name, "seed": seed, "first_total": info["first_total"],
                         "final_total": info["final_total"], "heldout_probe": info["heldout_probe"],
                         "proxy_probe": info["proxy_probe"], "fallbacks": "; ".join(report) if name == "inherit" else ""})
    _write_summary(out, rows)
    result = {"preset": "inherit", "rows": rows, "setup": asdict(setup)}
    (out / "summary.json").write_text(json.dumps(result, indent=2))
    return result


PRESETS = {"table1": run_table1, "table2": run_table2, "inherit": run_inherit}
