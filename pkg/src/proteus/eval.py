"""Frozen-feature evaluation: feature extraction, linear probes, PCA colouring."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import minimize

from .autodiff import no_grad
from .data import DatasetContainer, eval_view
from .vit import Model, vit_forward

L2_GRID = np.logspace(-6, 3, 45)


@dataclass
class FeatureMatrix:
    features: np.ndarray  # (N, D)
    labels: np.ndarray  # (N,)
    layers: List[int] = field(default_factory=list)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or self.features.shape[0] != self.labels.shape[0]:
            raise ValueError(f"features {self.features.shape} do not match labels {self.labels.shape}")
        if not np.all(np.isfinite(self.features)):
            raise ValueError("features contain non-finite values")

    def __len__(self) -> int:
        return self.features.shape[0]

    def take(self, idx) -> "FeatureMatrix":
        return FeatureMatrix(self.features[idx], self.labels[idx], list(self.layers))


def extract_features(model: Model, ds: DatasetContainer, layers_for_probe: Optional[int] = None,
                     batch_size: int = 128) -> FeatureMatrix:
    """Concatenated cls tokens of the last ``layers_for_probe`` blocks, centre view only."""
    cfg = model.config
    n_layers = cfg.layers_for_probe if layers_for_probe is None else layers_for_probe
    if not 1 <= n_layers <= cfg.layers_for_probe:
        raise ValueError(f"layers_for_probe must lie in [1, {cfg.layers_for_probe}] for this model")
    rows = []
    with no_grad():
        for start in range(0, len(ds), batch_size):
            idx = np.arange(start, min(start + batch_size, len(ds)))
            out = vit_forward(model.params, cfg, eval_view(ds, idx, cfg.image_size))
            lc = out.layer_cls.data[:, -n_layers:, :]
            rows.append(lc.reshape(lc.shape[0], -1))
    labels = ds.labels if ds.has_labels else np.full(len(ds), -1)
    layers = list(range(cfg.depth - n_layers, cfg.depth))
    return FeatureMatrix(np.concatenate(rows), labels, layers)


def accuracy(preds, labels) -> float:
    preds, labels = np.asarray(preds), np.asarray(labels)
    if preds.shape != labels.shape:
        raise ValueError(f"length mismatch: {preds.shape} vs {labels.shape}")
    if preds.size == 0:
        raise ValueError("accuracy of an empty set")
    return float(np.mean(preds == labels))


@dataclass
class ProbeResult:
    best_l2: float
    grid: List[float]
    grid_accuracies: List[float]
    grid_train_accuracies: List[float]
    train_accuracy: float
    val_accuracy: float
    test_accuracy: Optional[float]
    iterations_used: int
    protocol: str = "lbfgs"

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self, path=None) -> str:
        text = json.dumps(self.to_dict(), indent=2, sort_keys=True)
        if path is not None:
            Path(path).write_text(text)
        return text


def split_train_val(fm: FeatureMatrix, seed: int = 0, val_fraction: float = 0.2) -> Tuple[FeatureMatrix, FeatureMatrix]:
    """Seeded holdout of ``val_fraction`` of the rows.

    Rows are put in a canonical (lexicographic) order first, so the split
    depends on the set of rows and the seed but not on the input order.
    """
    canon = np.lexsort(np.column_stack([fm.features, fm.labels]).T[::-1])
    order = canon[np.random.default_rng([seed, 3]).permutation(len(fm))]
    n_val = max(1, int(round(val_fraction * len(fm))))
    return fm.take(np.sort(order[n_val:])), fm.take(np.sort(order[:n_val]))


class _Standardizer:
    def __init__(self, x: np.ndarray):
        self.mean = x.mean(axis=0)
        std = x.std(axis=0)
        self.std = np.where(std > 1e-12, std, 1.0)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return (x - self.mean) / self.std


def _encode(train: FeatureMatrix):
    classes = np.unique(train.labels)
    if classes.size < 2:
        raise ValueError("probe needs at least 2 classes in the training split")
    return classes


def _targets(labels: np.ndarray, classes: np.ndarray) -> np.ndarray:
    """Class index per row; rows of unseen classes get -1 (always wrong)."""
    pos = np.searchsorted(classes, labels)
    pos = np.clip(pos, 0, classes.size - 1)
    return np.where(classes[pos] == labels, pos, -1)


def logreg_objective(w_flat: np.ndarray, x: np.ndarray, y: np.ndarray, k: int, l2: float):
    """Mean multinomial cross-entropy + l2/2 * ||W||^2 (bias unpenalised) and its gradient."""
    n, d = x.shape
    wb = w_flat.reshape(d + 1, k)
    w, b = wb[:d], wb[d]
    z = x @ w + b
    z = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    loss = float(np.mean(lse - z[np.arange(n), y]) + 0.5 * l2 * np.sum(w * w))
    p = np.exp(z - lse[:, None])
    p[np.arange(n), y] -= 1.0
    p /= n
    grad = np.empty_like(wb)
    grad[:d] = x.T @ p + l2 * w
    grad[d] = p.sum(axis=0)
    return loss, grad.reshape(-1)


def fit_logreg(x: np.ndarray, y: np.ndarray, k: int, l2: float, max_iter: int = 500,
               init: Optional[np.ndarray] = None) -> Tuple[np.ndarray, int]:
    """L-BFGS (memory 10, strong-Wolfe line search) on the regularised objective."""
    d = x.shape[1]
    w0 = np.zeros((d + 1) * k) if init is None else init
    res = minimize(logreg_objective, w0, args=(x, y, k, l2), jac=True, method="L-BFGS-B",
                   options={"maxcor": 10, "maxiter": max_iter, "gtol": 1e-6, "ftol": 0.0})
    return res.x, int(res.nit)


def _predict(wb_flat: np.ndarray, x: np.ndarray, k: int) -> np.ndarray:
    wb = wb_flat.reshape(x.shape[1] + 1, k)
    return np.argmax(x @ wb[:-1] + wb[-1], axis=1)


def probe_lbfgs(train: FeatureMatrix, val: Optional[FeatureMatrix] = None, test: Optional[FeatureMatrix] = None,
                max_iter: int = 500, seed: int = 0, grid: Sequence[float] = tuple(L2_GRID)) -> ProbeResult:
    """Regularised multinomial logistic regression; L2 constant chosen on val."""
    if val is None:
        train, val = split_train_val(train, seed)
    classes = _encode(train)
    k = classes.size
    scaler = _Standardizer(train.features)
    xtr, ytr = scaler(train.features), _targets(train.labels, classes)
    xva, yva = scaler(val.features), _targets(val.labels, classes)
    val_acc, train_acc, weights, iters = [], [], [], []
    for l2 in grid:
        w, nit = fit_logreg(xtr, ytr, k, float(l2), max_iter)
        weights.append(w)
        iters.append(nit)
        train_acc.append(accuracy(_predict(w, xtr, k), ytr))
        val_acc.append(accuracy(_predict(w, xva, k), yva))
    best = int(np.argmax(val_acc))
    test_acc = None
    if test is not None:
        test_acc = accuracy(_predict(weights[best], scaler(test.features), k), _targets(test.labels, classes))
    return ProbeResult(
        best_l2=float(grid[best]), grid=[float(g) for g in grid], grid_accuracies=val_acc,
        grid_train_accuracies=train_acc, train_accuracy=train_acc[best], val_accuracy=val_acc[best],
        test_accuracy=test_acc, iterations_used=iters[best], protocol="lbfgs",
    )


def probe_sgd(train: FeatureMatrix, val: Optional[FeatureMatrix] = None, test: Optional[FeatureMatrix] = None,
              lrs: Sequence[float] = (1e-3, 1e-2, 1e-1), iterations: int = 500, batch_size: int = 64,
              momentum: float = 0.9, seed: int = 0) -> ProbeResult:
    """Linear classifier trained by minibatch SGD (cosine lr) for each lr; best on val.

    With ``iterations=0`` the zero-initialised classifier is evaluated as is.
    """
    if val is None:
        train, val = split_train_val(train, seed)
    classes = _encode(train)
    k = classes.size
    scaler = _Standardizer(train.features)
    xtr, ytr = scaler(train.features), _targets(train.labels, classes)
    xva, yva = scaler(val.features), _targets(val.labels, classes)
    d, n = xtr.shape[1], xtr.shape[0]
    val_acc, train_acc, weights = [], [], []
    for lr in lrs:
        rng = np.random.default_rng([seed, 5])
        wb = np.zeros((d + 1) * k)
        vel = np.zeros_like(wb)
        for it in range(iterations):
            idx = rng.choice(n, size=min(batch_size, n), replace=False)
            _, g = logreg_objective(wb, xtr[idx], ytr[idx], k, 0.0)
            step_lr = lr * 0.5 * (1.0 + math.cos(math.pi * it / iterations))
            vel = momentum * vel + g
            wb = wb - step_lr * vel
        weights.append(wb)
        train_acc.append(accuracy(_predict(wb, xtr, k), ytr))
        val_acc.append(accuracy(_predict(wb, xva, k), yva))
    best = int(np.argmax(val_acc))
    test_acc = None
    if test is not None:
        test_acc = accuracy(_predict(weights[best], scaler(test.features), k), _targets(test.labels, classes))
    return ProbeResult(
        best_l2=0.0, grid=[float(v) for v in lrs], grid_accuracies=val_acc, grid_train_accuracies=train_acc,
        train_accuracy=train_acc[best], val_accuracy=val_acc[best], test_accuracy=test_acc,
        iterations_used=iterations, protocol="sgd",
    )


# PCA visualisation ------------------------------------------------------------

def pca_components(features: np.ndarray, n_components: int = 3, tol: float = 1e-10):
    """Top principal axes of centred features.

    Returns (components (n, D), explained variances (n,), projections (N, n)).
    Each axis is signed so its largest-magnitude loading is positive.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < n_components:
        raise ValueError(f"need at least {n_components} feature rows, got shape {x.shape}")
    xc = x - x.mean(axis=0)
    _, s, vt = np.linalg.svd(xc, full_matrices=False)
    rank = int(np.sum(s > tol * max(s[0], 1e-300))) if s.size else 0
    if rank < n_components:
        raise ValueError(f"features have effective rank {rank} < {n_components}")
    comps = vt[:n_components]
    signs = np.sign(comps[np.arange(n_components), np.argmax(np.abs(comps), axis=1)])
    comps = comps * signs[:, None]
    var = s[:n_components] ** 2 / (x.shape[0] - 1)
    return comps, var, xc @ comps.T


def pca_rgb(patch_features: np.ndarray) -> np.ndarray:
    """Project onto the first three components and min-max each to 0..255."""
    _, _, proj = pca_components(patch_features, 3)
    lo, hi = proj.min(axis=0), proj.max(axis=0)
    span = np.where(hi > lo, hi - lo, 1.0)
    return np.round((proj - lo) / span * 255.0).astype(np.uint8)


def write_ppm(path, rgb: np.ndarray) -> None:
    """Binary P6 image from an (H, W, 3) uint8 array."""
    rgb = np.ascontiguousarray(rgb, dtype=np.uint8)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ValueError(f"expected (H, W, 3), got {rgb.shape}")
    h, w, _ = rgb.shape
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + rgb.tobytes())


def read_ppm(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if buf[pos:pos + 1] == b"#":
            pos = buf.index(b"\n", pos)
            continue
        end = pos
        while end < len(buf) and not buf[end:end + 1].isspace():
            end += 1
        if end == pos:
            raise ValueError("truncated PPM header")
        fields.append(buf[pos:end])
        pos = end
    if fields[0] != b"P6":
        raise ValueError("not a binary PPM")
    w, h, maxval = (int(f) for f in fields[1:])
    if maxval != 255:
        raise ValueError("only 8-bit PPM supported")
    data = buf[pos + 1:pos + 1 + w * h * 3]  # exactly one whitespace byte follows maxval
    if len(data) != w * h * 3:
        raise ValueError(f"PPM pixel data truncated: {len(data)} of {w * h * 3} bytes")
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w, 3)


def pca_tiles(model: Model, ds: DatasetContainer, indices: Sequence[int], scale: Optional[int] = None) -> np.ndarray:
    """Colour the patches of several images with one shared PCA; tiles side by side."""
    cfg = model.config
    with no_grad():
        out = vit_forward(model.params, cfg, eval_view(ds, np.asarray(indices), cfg.image_size))
    feats = out.patches.data.reshape(-1, cfg.dim)
    rgb = pca_rgb(feats).reshape(len(indices), cfg.grid, cfg.grid, 3)
    scale = cfg.patch_size if scale is None else scale
    rgb = rgb.repeat(scale, axis=1).repeat(scale, axis=2)
    return np.concatenate(list(rgb), axis=1)
