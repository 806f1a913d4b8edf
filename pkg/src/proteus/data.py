"""Image containers and proxy-dataset construction.

Containers are immutable: every operation returns a new container and
never writes into its inputs.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigError, FormatError

MAGIC = b"PXDS"
VERSION = 1
_HEADER = struct.Struct("<4sIIHHHBH")
HEADER_SIZE = _HEADER.size


class ContainerError(FormatError):
    pass


class DatasetContainer:
    """N images of shape C x H x W (uint8) with optional uint16 labels.

    Reads of ``labels`` are counted in ``label_reads`` so that label-free
    training can be audited.
    """

    def __init__(self, images, labels=None, class_count: int = 0, provenance: Optional[dict] = None):
        images = np.array(images, dtype=np.uint8, copy=True, order="C")
        if images.ndim != 4 or images.shape[0] < 1:
            raise ValueError(f"images must be (N>=1, C, H, W), got {images.shape}")
        images.setflags(write=False)
        self.images = images
        if labels is not None:
            labels = np.array(labels, dtype=np.int64).reshape(-1)
            if labels.shape[0] != images.shape[0]:
                raise ValueError(f"{labels.shape[0]} labels for {images.shape[0]} images")
            if labels.size and (labels.min() < 0 or labels.max() >= class_count):
                raise ValueError(f"labels must lie in [0, class_count={class_count})")
            labels = labels.astype(np.uint16)
            labels.setflags(write=False)
        self._labels = labels
        self.class_count = int(class_count)
        self.provenance = dict(provenance or {})
        self.label_reads = 0

    @property
    def has_labels(self) -> bool:
        return self._labels is not None

    @property
    def labels(self) -> Optional[np.ndarray]:
        self.label_reads += 1
        return self._labels

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def image_shape(self) -> Tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def equals(self, other: "DatasetContainer") -> bool:
        """Bitwise equality of pixels, labels and class count."""
        if self.images.shape != other.images.shape or self.class_count != other.class_count:
            return False
        if self.has_labels != other.has_labels:
            return False
        if self.has_labels and not np.array_equal(self._labels, other._labels):
            return False
        return np.array_equal(self.images, other.images)

    def channel_stats(self) -> Tuple[np.ndarray, np.ndarray]:
        """Per-channel mean and std of pixels scaled to [0, 1]."""
        x = self.images.astype(np.float64) / 255.0
        mean = x.mean(axis=(0, 2, 3))
        std = x.std(axis=(0, 2, 3))
        return mean, np.where(std > 0, std, 1.0)


# serialisation ----------------------------------------------------------------

def encode_container(ds: DatasetContainer) -> bytes:
    n, c, h, w = ds.images.shape
    if max(c, h, w) > 0xFFFF or ds.class_count > 0xFFFF:
        raise ValueError("image dimensions and class count must fit in u16")
    header = _HEADER.pack(MAGIC, VERSION, n, c, h, w, int(ds.has_labels), ds.class_count)
    body = ds._labels.astype("<u2").tobytes() if ds.has_labels else b""
    return header + body + ds.images.tobytes()


def decode_container(buf: bytes) -> DatasetContainer:
    if len(buf) < HEADER_SIZE:
        raise ContainerError(f"truncated container: header needs {HEADER_SIZE} bytes, got {len(buf)}")
    magic, version, n, c, h, w, has_labels, class_count = _HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise ContainerError(f"bad magic {magic!r}; not a PXDS container")
    if version != VERSION:
        raise ContainerError(f"unsupported container version {version}")
    if has_labels not in (0, 1):
        raise ContainerError(f"invalid has_labels flag {has_labels}")
    label_bytes = 2 * n if has_labels else 0
    expected = HEADER_SIZE + label_bytes + n * c * h * w
    if len(buf) < expected:
        raise ContainerError(f"truncated container: missing {expected - len(buf)} bytes "
                             f"(expected {expected}, got {len(buf)})")
    if len(buf) > expected:
        raise ContainerError(f"{len(buf) - expected} trailing bytes after pixel data")
    labels = None
    if has_labels:
        labels = np.frombuffer(buf, dtype="<u2", count=n, offset=HEADER_SIZE)
    pixels = np.frombuffer(buf, dtype=np.uint8, count=n * c * h * w, offset=HEADER_SIZE + label_bytes)
    try:
        return DatasetContainer(pixels.reshape(n, c, h, w), labels, class_count)
    except ValueError as exc:
        raise ContainerError(str(exc)) from exc


def _meta_path(path) -> Path:
    return Path(str(path) + ".meta.json")


def save_container(ds: DatasetContainer, path) -> None:
    """Write the PXDS file; provenance goes to a ``.meta.json`` sidecar."""
    Path(path).write_bytes(encode_container(ds))
    _meta_path(path).write_text(json.dumps(ds.provenance, sort_keys=True, indent=1))


def load_container(path) -> DatasetContainer:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise ContainerError(f"cannot read container {path}: {exc}") from exc
    ds = decode_container(buf)
    meta = _meta_path(path)
    if meta.exists():
        ds.provenance = json.loads(meta.read_text())
    return ds


# generators -------------------------------------------------------------------

@dataclass
class ToySpec:
    classes: int = 10
    per_class: int = 50
    size: int = 16
    channels: int = 3
    seed: int = 0
    noise: float = 0.08


def gen_toy_dataset(spec: ToySpec) -> DatasetContainer:
    """Class-conditional oriented gratings with jitter and pixel noise.

    Each class owns an orientation, spatial frequency, phase and colour tint;
    the class templates are far apart in pixel space relative to the noise,
    which makes the set linearly separable.
    """
    if spec.classes < 2:
        raise ConfigError("classes", "need at least 2 classes")
    if spec.per_class < 1:
        raise ConfigError("per_class", "need at least 1 image per class")
    rng = np.random.default_rng(spec.seed)
    size, ch = spec.size, spec.channels
    ys, xs = np.mgrid[0:size, 0:size] / size
    images = np.empty((spec.classes * spec.per_class, ch, size, size), dtype=np.uint8)
    labels = np.repeat(np.arange(spec.classes), spec.per_class)
    for k in range(spec.classes):
        theta = math.pi * k / spec.classes
        freq = 1.5 + 1.5 * (k % 3)
        phase = rng.uniform(0, 2 * math.pi)
        tint = rng.uniform(0.3, 1.0, size=ch)
        for j in range(spec.per_class):
            jitter = rng.normal(0.0, 0.25)
            gain = rng.uniform(0.8, 1.1)
            wave = np.cos(2 * math.pi * freq * (xs * math.cos(theta) + ys * math.sin(theta)) + phase + jitter)
            img = 0.5 + 0.4 * gain * tint[:, None, None] * wave[None]
            img = img + rng.normal(0.0, spec.noise, size=img.shape)
            images[k * spec.per_class + j] = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    prov = {"generator": "toy", "classes": spec.classes, "per_class": spec.per_class,
            "size": size, "channels": ch, "seed": spec.seed, "noise": spec.noise}
    return _with_stats(DatasetContainer(images, labels, spec.classes, prov))


def make_source_image(size: int = 64, channels: int = 3, seed: int = 0) -> np.ndarray:
    """A single procedural 'large' image: a collage of blurred oriented gratings."""
    rng = np.random.default_rng(seed)
    ys, xs = np.mgrid[0:size, 0:size] / size
    img = np.zeros((channels, size, size))
    for _ in range(12):
        theta = rng.uniform(0, math.pi)
        freq = rng.uniform(1.0, 6.0)
        cx, cy = rng.uniform(0, 1, size=2)
        radius = rng.uniform(0.15, 0.45)
        blob = np.exp(-((xs - cx) ** 2 + (ys - cy) ** 2) / (2 * radius ** 2))
        wave = np.cos(2 * math.pi * freq * (xs * math.cos(theta) + ys * math.sin(theta)) + rng.uniform(0, 6.3))
        img += rng.uniform(-1, 1, size=channels)[:, None, None] * (blob * wave)[None]
    img = (img - img.min()) / (img.max() - img.min() + 1e-12)
    return np.round(img * 255.0).astype(np.uint8)


# augmentation -----------------------------------------------------------------

@dataclass
class AugRecipe:
    crop_scale: Tuple[float, float] = (0.08, 1.0)
    crop_aspect: Tuple[float, float] = (3 / 4, 4 / 3)
    hflip_prob: float = 0.5
    output_size: int = 16

    def __post_init__(self):
        lo, hi = self.crop_scale
        if not 0 < lo <= hi <= 1:
            raise ConfigError("crop_scale", f"need 0 < lo <= hi <= 1, got {self.crop_scale}")
        alo, ahi = self.crop_aspect
        if not 0 < alo <= ahi:
            raise ConfigError("crop_aspect", f"need 0 < lo <= hi, got {self.crop_aspect}")
        if not 0 <= self.hflip_prob <= 1:
            raise ConfigError("hflip_prob", "must lie in [0, 1]")
        if self.output_size < 1:
            raise ConfigError("output_size", "must be positive")
        self.crop_scale = (float(lo), float(hi))
        self.crop_aspect = (float(alo), float(ahi))

    def to_dict(self) -> dict:
        return {"crop_scale": list(self.crop_scale), "crop_aspect": list(self.crop_aspect),
                "hflip_prob": self.hflip_prob, "output_size": self.output_size}


def sample_crop(height: int, width: int, recipe: AugRecipe, rng: np.random.Generator) -> Tuple[int, int, int, int]:
    """Random-resized-crop box (top, left, h, w); central fallback after 10 tries."""
    area = height * width
    log_lo, log_hi = math.log(recipe.crop_aspect[0]), math.log(recipe.crop_aspect[1])
    for _ in range(10):
        target = area * rng.uniform(*recipe.crop_scale)
        aspect = math.exp(rng.uniform(log_lo, log_hi))
        w = int(round(math.sqrt(target * aspect)))
        h = int(round(math.sqrt(target / aspect)))
        if 0 < w <= width and 0 < h <= height:
            top = int(rng.integers(0, height - h + 1))
            left = int(rng.integers(0, width - w + 1))
            return top, left, h, w
    ratio = width / height
    if ratio < recipe.crop_aspect[0]:
        w, h = width, int(round(width / recipe.crop_aspect[0]))
    elif ratio > recipe.crop_aspect[1]:
        h, w = height, int(round(height * recipe.crop_aspect[1]))
    else:
        h, w = height, width
    return (height - h) // 2, (width - w) // 2, h, w


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize of a (C, H, W) float array with half-pixel centres."""
    _, h, w = img.shape

    def coords(n_in, n_out):
        pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        pos = np.clip(pos, 0, n_in - 1)
        lo = np.floor(pos).astype(np.int64)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, pos - lo

    y0, y1, fy = coords(h, out_h)
    x0, x1, fx = coords(w, out_w)
    top = img[:, y0][:, :, x0] * (1 - fx) + img[:, y0][:, :, x1] * fx
    bot = img[:, y1][:, :, x0] * (1 - fx) + img[:, y1][:, :, x1] * fx
    return top * (1 - fy)[:, None] + bot * fy[:, None]


def hflip(img: np.ndarray) -> np.ndarray:
    return img[..., ::-1].copy()


def _crop_flip(image: np.ndarray, recipe: AugRecipe, rng: np.random.Generator) -> np.ndarray:
    _, h, w = image.shape
    top, left, ch, cw = sample_crop(h, w, recipe, rng)
    crop = image[:, top:top + ch, left:left + cw].astype(np.float64)
    out = resize_bilinear(crop, recipe.output_size, recipe.output_size)
    if rng.uniform() < recipe.hflip_prob:
        out = hflip(out)
    return out


def normalize(pixels: np.ndarray, mean, std) -> np.ndarray:
    """uint8-range pixels -> ((x / 255) - mean) / std per channel."""
    mean = np.asarray(mean, dtype=np.float64)[:, None, None]
    std = np.asarray(std, dtype=np.float64)[:, None, None]
    return (np.asarray(pixels, dtype=np.float64) / 255.0 - mean) / std


def augment_train(image: np.ndarray, recipe: AugRecipe, rng: np.random.Generator, mean, std) -> np.ndarray:
    """Random resized crop (bilinear) and horizontal flip, then normalisation."""
    return normalize(_crop_flip(np.asarray(image), recipe, rng), mean, std)


def gen_single_image_dataset(image: np.ndarray, count: int, recipe: AugRecipe, seed: int = 0) -> DatasetContainer:
    """``count`` unlabeled augmented crops of one source image."""
    image = np.asarray(image, dtype=np.uint8)
    if image.ndim != 3:
        raise ValueError(f"source image must be (C, H, W), got {image.shape}")
    _, h, w = image.shape
    if h < recipe.output_size or w < recipe.output_size:
        raise ConfigError("output_size", f"source image {h}x{w} smaller than output size {recipe.output_size}")
    if count < 1:
        raise ConfigError("count", "must be >= 1")
    rng = np.random.default_rng(seed)
    crops = np.empty((count, image.shape[0], recipe.output_size, recipe.output_size), dtype=np.uint8)
    for i in range(count):
        crops[i] = np.clip(np.round(_crop_flip(image, recipe, rng)), 0, 255).astype(np.uint8)
    prov = {"generator": "single_image", "count": count, "seed": seed, "recipe": recipe.to_dict(),
            "source_shape": list(image.shape)}
    return _with_stats(DatasetContainer(crops, None, 0, prov))


# proxy-set operations -----------------------------------------------------------

def _with_stats(ds: DatasetContainer) -> DatasetContainer:
    mean, std = ds.channel_stats()
    ds.provenance["mean"] = [float(v) for v in mean]
    ds.provenance["std"] = [float(v) for v in std]
    return ds


def subsample(ds: DatasetContainer, mode: str, fraction: float, seed: int = 0) -> DatasetContainer:
    """Keep a fraction of each class's images, or a fraction of whole classes.

    ``class_fraction`` re-indexes the kept classes densely (in ascending
    original order) and records the original ids under ``kept_classes``.
    """
    if not ds.has_labels:
        raise ValueError("subsample needs a labeled container")
    if not 0 < fraction <= 1:
        raise ConfigError("fraction", f"must lie in (0, 1], got {fraction}")
    labels = ds.labels.astype(np.int64)
    rng = np.random.default_rng(seed)
    prov = {"source": ds.provenance, "op": "subsample", "mode": mode, "fraction": fraction, "seed": seed}
    if mode == "per_class_fraction":
        keep: List[np.ndarray] = []
        for k in range(ds.class_count):
            idx = np.flatnonzero(labels == k)
            if idx.size == 0:
                continue
            n = max(1, int(round(fraction * idx.size)))
            keep.append(np.sort(rng.choice(idx, size=n, replace=False)))
        sel = np.sort(np.concatenate(keep))
        out = DatasetContainer(ds.images[sel], labels[sel], ds.class_count, prov)
    elif mode == "class_fraction":
        n_keep = max(1, int(round(fraction * ds.class_count)))
        kept = np.sort(rng.choice(ds.class_count, size=n_keep, replace=False))
        remap = {int(c): i for i, c in enumerate(kept)}
        sel = np.flatnonzero(np.isin(labels, kept))
        new_labels = np.array([remap[int(v)] for v in labels[sel]], dtype=np.int64)
        prov["kept_classes"] = [int(c) for c in kept]
        out = DatasetContainer(ds.images[sel], new_labels, n_keep, prov)
    else:
        raise ConfigError("mode", f"unknown subsample mode {mode!r}")
    return _with_stats(out)


def select_classes(ds: DatasetContainer, classes: Sequence[int]) -> DatasetContainer:
    """Images of the given original classes, relabeled densely in the given order."""
    labels = ds.labels.astype(np.int64)
    remap = {int(c): i for i, c in enumerate(classes)}
    sel = np.flatnonzero(np.isin(labels, list(remap)))
    new_labels = np.array([remap[int(v)] for v in labels[sel]], dtype=np.int64)
    prov = {"source": ds.provenance, "op": "select_classes", "classes": [int(c) for c in classes]}
    return _with_stats(DatasetContainer(ds.images[sel], new_labels, len(remap), prov))


def merge(parts: Sequence[DatasetContainer]) -> DatasetContainer:
    """Concatenate containers in order; labels are dropped."""
    if not parts:
        raise ValueError("merge needs at least one container")
    shape = parts[0].image_shape
    for p in parts[1:]:
        if p.image_shape != shape:
            raise ValueError(f"cannot merge image shapes {shape} and {p.image_shape}")
    images = np.concatenate([p.images for p in parts], axis=0)
    prov = {"op": "merge", "sources": [p.provenance for p in parts], "counts": [len(p) for p in parts]}
    return _with_stats(DatasetContainer(images, None, 0, prov))


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    """Permutation for one epoch; depends only on (seed, epoch)."""
    return np.random.default_rng([seed, epoch]).permutation(n)


def iter_batches(n: int, batch_size: int, seed: int, epoch: int, drop_last: bool = True) -> Iterator[np.ndarray]:
    order = epoch_order(n, seed, epoch)
    stop = n - n % batch_size if drop_last and n >= batch_size else n
    for start in range(0, stop, batch_size):
        yield order[start:start + batch_size]


def eval_view(ds: DatasetContainer, indices=None, output_size: Optional[int] = None) -> np.ndarray:
    """Normalised float images without augmentation (resized when sizes differ)."""
    imgs = ds.images if indices is None else ds.images[indices]
    mean = ds.provenance.get("mean")
    std = ds.provenance.get("std")
    if mean is None or std is None:
        mean, std = ds.channel_stats()
    out = []
    for img in imgs:
        x = img.astype(np.float64)
        if output_size is not None and x.shape[-1] != output_size:
            x = resize_bilinear(x, output_size, output_size)
        out.append(normalize(x, mean, std))
    return np.stack(out)
