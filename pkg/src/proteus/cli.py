"""Command-line entry point: ``proteus <command> ...``."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import config as cfgmod
from .autodiff import set_debug, set_default_dtype, set_deterministic
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig
from .data import (AugRecipe, ToySpec, gen_single_image_dataset, gen_toy_dataset, load_container,
                   make_source_image, merge, save_container, subsample)
from .errors import ConfigError, FormatError
from .eval import extract_features, pca_tiles, probe_lbfgs, probe_sgd, write_ppm
from .optim import Schedule
from .train import MetricsWriter, run_distill, steps_per_epoch, train_supervised
from .vit import Model, ViTConfig, init_params, weight_inherit

log = logging.getLogger("proteus")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(2, f"{self.prog}: error: {message}\n")


def _existing(path: Optional[str], field: str) -> Path:
    if path is None:
        raise ConfigError(field, "is required")
    p = Path(path)
    if not p.exists():
        raise ConfigError(field, f"path does not exist: {path}")
    return p


def _apply_runtime(cfg: RunConfig) -> None:
    set_default_dtype(np.dtype(cfg.dtype))
    set_debug(cfg.debug)
    set_deterministic(cfg.deterministic)


def _resolve_schedule(cfg: RunConfig, n_images: int) -> None:
    total = cfg.epochs * steps_per_epoch(n_images, cfg.batch_size)
    s = cfg.schedule.to_dict()
    s["total_steps"] = total
    s["warmup_steps"] = min(s["warmup_steps"], total - 1)
    cfg.schedule = Schedule(**s)


def load_model(path, field: str = "checkpoint") -> Model:
    arrays, meta = load_checkpoint(_existing(path, field))
    if not meta or "model" not in meta:
        raise FormatError(f"{path}: checkpoint carries no model config")
    config = ViTConfig.from_dict(meta["model"])
    return Model.from_arrays(config, {k: v.astype(np.float64) for k, v in arrays.items()})


def _save_model(path: Path, model: Model, cfg: RunConfig) -> None:
    save_checkpoint(path, model.tensors(), {"model": model.config.to_dict(), "seed": cfg.seed, "mode": cfg.mode})


def _run_config(args) -> RunConfig:
    cfg = cfgmod.load(args.config) if args.config else RunConfig()
    for key in ("out", "data", "seed", "epochs", "batch_size"):
        value = getattr(args, key, None)
        if value is not None:
            setattr(cfg, key, value)
    if getattr(args, "teacher", None) is not None:
        cfg.teacher_checkpoint = args.teacher
    if getattr(args, "no_deterministic", False):
        cfg.deterministic = False
    if getattr(args, "debug", False):
        cfg.debug = True
    cfg.__post_init__()
    return cfg


# commands ---------------------------------------------------------------------

def cmd_make_dataset(args) -> int:
    if args.kind == "toy":
        ds = gen_toy_dataset(ToySpec(classes=args.classes, per_class=args.per_class, size=args.size,
                                     channels=args.channels, seed=args.seed, noise=args.noise))
    elif args.kind == "single":
        if args.image:
            from .eval import read_ppm
            image = read_ppm(_existing(args.image, "image")).transpose(2, 0, 1)
        else:
            image = make_source_image(size=args.source_size, channels=args.channels, seed=args.seed)
        ds = gen_single_image_dataset(image, args.count, AugRecipe(output_size=args.size), seed=args.seed)
    elif args.kind == "subsample":
        ds = subsample(load_container(_existing(args.input, "input")), args.mode, args.fraction, seed=args.seed)
    else:
        if not args.inputs:
            raise ConfigError("inputs", "merge needs at least one container")
        ds = merge([load_container(_existing(p, "inputs")) for p in args.inputs])
    save_container(ds, args.output)
    print(f"wrote {args.output}: N={len(ds)} classes={ds.class_count}")
    return 0


def cmd_train_teacher(args) -> int:
    cfg = _run_config(args)
    cfg.mode = "train_teacher"
    _apply_runtime(cfg)
    ds = load_container(_existing(cfg.data, "data"))
    _resolve_schedule(cfg, len(ds))
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.write(out / "config.json")
    model = Model(cfg.teacher, init_params(cfg.teacher, seed=cfg.seed))
    with MetricsWriter(out / "metrics.csv", out / "timing.csv") as mw:
        losses = train_supervised(model, ds, cfg.schedule, cfg.epochs, cfg.batch_size, cfg.seed, cfg.augment, mw)
    _save_model(out / "checkpoint.prtc", model, cfg)
    print(f"teacher trained: {len(losses)} steps, final loss {losses[-1]:.4f}")
    return 0


def cmd_distill(args) -> int:
    cfg = _run_config(args)
    cfg.mode = "distill"
    _apply_runtime(cfg)
    ds = load_container(_existing(cfg.data, "data"))
    if cfg.teacher_checkpoint is not None:
        teacher = load_model(cfg.teacher_checkpoint, "teacher_checkpoint")
        cfg.teacher = teacher.config
    else:
        teacher = Model(cfg.teacher, init_params(cfg.teacher, seed=cfg.seed + 1))
    teacher = teacher.frozen()
    if cfg.objective.kind == "kd":
        if teacher.classifier is None:
            raise ConfigError("teacher_checkpoint", "logit distillation needs a teacher with a classifier")
        width = teacher.classifier["classifier.bias"].data.shape[0]
        if width != ds.class_count:
            raise ConfigError("data", f"dataset has {ds.class_count} classes, teacher classifier has {width}")
    if cfg.init == "inherit":
        params, notes = weight_inherit(teacher.params, cfg.student, seed=cfg.seed)
        for note in notes:
            log.info("inherit: %s", note)
        student = Model(cfg.student, params)
    else:
        student = Model(cfg.student, init_params(cfg.student, seed=cfg.seed))
    _resolve_schedule(cfg, len(ds))
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.write(out / "config.json")
    with MetricsWriter(out / "metrics.csv", out / "timing.csv") as mw:
        res = run_distill(teacher, student, ds, cfg.objective, cfg.schedule, cfg.epochs, cfg.batch_size, cfg.seed,
                          cfg.augment, mw)
    _save_model(out / "checkpoint.prtc", student, cfg)
    print(f"distilled: {len(res.history)} steps, total {res.history[0].total:.4f} -> {res.history[-1].total:.4f}")
    return 0


def cmd_probe(args) -> int:
    model = load_model(args.checkpoint)
    train = extract_features(model, load_container(_existing(args.train, "train")), args.layers)
    val = extract_features(model, load_container(_existing(args.val, "val")), args.layers) if args.val else None
    test = extract_features(model, load_container(_existing(args.test, "test")), args.layers) if args.test else None
    if args.method == "lbfgs":
        res = probe_lbfgs(train, val, test, max_iter=args.max_iter, seed=args.seed)
    else:
        res = probe_sgd(train, val, test, iterations=args.max_iter, seed=args.seed)
    out = Path(args.output)
    out.parent.mkdir(parents=True, exist_ok=True)
    res.to_json(out)
    chosen = res.grid[int(np.argmax(res.grid_accuracies))]
    print(f"probe ({args.method}): selected {chosen:g}, val {res.val_accuracy:.4f}, test {res.test_accuracy}")
    return 0


def cmd_visualize(args) -> int:
    model = load_model(args.checkpoint)
    ds = load_container(_existing(args.data, "data"))
    indices = [int(i) for i in args.indices.split(",")] if args.indices else list(range(min(4, len(ds))))
    bad = [i for i in indices if not 0 <= i < len(ds)]
    if bad:
        raise ConfigError("indices", f"out of range for N={len(ds)}: {bad}")
    rgb = pca_tiles(model, ds, indices, args.scale)
    out = Path(args.output)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_ppm(out, rgb)
    print(f"wrote {out} ({rgb.shape[1]}x{rgb.shape[0]})")
    return 0


def cmd_ablate(args) -> int:
    from .experiments import PRESETS, DeskSetup, quick_setup

    set_deterministic(True)
    setup = quick_setup() if args.quick else DeskSetup()
    if args.seeds:
        setup.seeds = tuple(int(s) for s in args.seeds.split(","))
    report = PRESETS[args.preset](setup, Path(args.out))
    for row in report["rows"]:
        print(" ".join(f"{k}={v:.4f}" if isinstance(v, float) else f"{k}={v}" for k, v in row.items()))
    if args.preset == "table1":
        flag = "holds" if report["direction_holds"] else "REGRESSION (direction reversed)"
        print(f"held-out gap hint - soft_kl_ce = {report['hint_minus_soft_kl_ce']:+.4f}: {flag}")
    return 0


# parser -----------------------------------------------------------------------

def _run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON run config; missing fields take defaults")
    p.add_argument("--out", help="output directory")
    p.add_argument("--data", help="PXDS training set")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--no-deterministic", action="store_true", help="allow multi-threaded BLAS")
    p.add_argument("--debug", action="store_true", help="fail on non-finite values")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="proteus", description="Feature distillation of small vision transformers.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("make-dataset", help="write a PXDS container")
    p.add_argument("kind", choices=("toy", "single", "subsample", "merge"))
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--classes", type=int, default=10)
    p.add_argument("--per-class", dest="per_class", type=int, default=50)
    p.add_argument("--size", type=int, default=16)
    p.add_argument("--channels", type=int, default=3)
    p.add_argument("--noise", type=float, default=0.08)
    p.add_argument("--count", type=int, default=500, help="single: number of crops")
    p.add_argument("--image", help="single: source PPM (default: synthetic)")
    p.add_argument("--source-size", dest="source_size", type=int, default=64)
    p.add_argument("--input", help="subsample: source container")
    p.add_argument("--mode", choices=("class_fraction", "per_class_fraction"), default="class_fraction")
    p.add_argument("--fraction", type=float, default=0.5)
    p.add_argument("--inputs", nargs="*", help="merge: containers to concatenate")
    p.set_defaults(func=cmd_make_dataset)

    p = sub.add_parser("train-teacher", help="supervised training of a teacher ViT")
    _run_flags(p)
    p.set_defaults(func=cmd_train_teacher)

    p = sub.add_parser("distill", help="distil a teacher checkpoint into a student")
    _run_flags(p)
    p.add_argument("--teacher", help="teacher checkpoint (default: random frozen teacher)")
    p.set_defaults(func=cmd_distill)

    p = sub.add_parser("probe", help="linear probe on frozen features")
    p.add_argument("method", choices=("lbfgs", "sgd"))
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--train", required=True)
    p.add_argument("--val")
    p.add_argument("--test")
    p.add_argument("--layers", type=int, help="number of final cls tokens to concatenate")
    p.add_argument("--max-iter", dest="max_iter", type=int, default=500)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("visualize-pca", help="PCA colouring of patch features as a PPM")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--indices", help="comma-separated image indices (default: first 4)")
    p.add_argument("--scale", type=int)
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_visualize)

    p = sub.add_parser("ablate", help="run an ablation preset")
    p.add_argument("--preset", required=True, choices=("table1", "table2", "inherit"))
    p.add_argument("--out", required=True)
    p.add_argument("--seeds", help="comma-separated seeds")
    p.add_argument("--quick", action="store_true", help="smaller models and fewer epochs")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except FormatError as exc:
        print(f"corrupt file: {exc}", file=sys.stderr)
        return 3


run_cli = main

if __name__ == "__main__":
    sys.exit(main())
