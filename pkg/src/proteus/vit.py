"""Vision Transformer encoder used for both teacher and student."""
from __future__ import annotations

import dataclasses
import re
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple, Union

import numpy as np

from .autodiff import Tensor, no_grad, ops
from .autodiff.tensor import ShapeError, get_default_dtype
from .errors import ConfigError

ViTParams = Dict[str, Tensor]


@dataclass
class ViTConfig:
    image_size: int = 16
    patch_size: int = 4
    channels: int = 3
    dim: int = 32
    depth: int = 2
    heads: int = 2
    mlp_ratio: float = 4.0
    # cls tokens of this many final blocks are concatenated for probing;
    # None resolves to min(4, depth)
    layers_for_probe: Optional[int] = None
    ln_eps: float = 1e-6

    def __post_init__(self):
        for name in ("image_size", "patch_size", "channels", "dim", "depth", "heads"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or value < 1:
                raise ConfigError(name, f"must be a positive integer, got {value!r}")
        if self.image_size % self.patch_size:
            raise ConfigError("patch_size", f"{self.patch_size} does not divide image_size {self.image_size}")
        if self.dim % self.heads:
            raise ConfigError("heads", f"{self.heads} does not divide dim {self.dim}")
        if self.mlp_ratio <= 0:
            raise ConfigError("mlp_ratio", "must be positive")
        if self.layers_for_probe is None:
            self.layers_for_probe = min(4, self.depth)
        if not 1 <= self.layers_for_probe <= self.depth:
            raise ConfigError("layers_for_probe", f"must lie in [1, depth={self.depth}], got {self.layers_for_probe}")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid ** 2

    @property
    def patch_dim(self) -> int:
        return self.channels * self.patch_size ** 2

    @property
    def hidden_dim(self) -> int:
        return int(round(self.dim * self.mlp_ratio))

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ViTConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(sorted(unknown)[0], "unknown ViT config field")
        return cls(**d)


@dataclass
class ViTOutput:
    cls: Tensor  # (B, dim)
    patches: Tensor  # (B, P, dim)
    layer_cls: Tensor  # (B, layers_for_probe, dim)
    embedded: Tensor  # (B, P + 1, dim) tokens entering the first block


def param_shapes(config: ViTConfig) -> Dict[str, Tuple[int, ...]]:
    d, h = config.dim, config.hidden_dim
    shapes = {
        "patch_embed.weight": (config.patch_dim, d),
        "patch_embed.bias": (d,),
        "cls_token": (d,),
        "mask_token": (d,),
        "pos_embed": (config.num_patches + 1, d),
    }
    for i in range(config.depth):
        p = f"blocks.{i}."
        shapes.update({
            p + "norm1.weight": (d,),
            p + "norm1.bias": (d,),
            p + "attn.qkv.weight": (d, 3 * d),
            p + "attn.qkv.bias": (3 * d,),
            p + "attn.proj.weight": (d, d),
            p + "attn.proj.bias": (d,),
            p + "norm2.weight": (d,),
            p + "norm2.bias": (d,),
            p + "mlp.fc1.weight": (d, h),
            p + "mlp.fc1.bias": (h,),
            p + "mlp.fc2.weight": (h, d),
            p + "mlp.fc2.bias": (d,),
        })
    shapes["norm.weight"] = (d,)
    shapes["norm.bias"] = (d,)
    return shapes


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02, bound: float = 2.0) -> np.ndarray:
    """Normal(0, std) samples redrawn until they fall within +-bound*std."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > bound
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > bound
    return out * std


def is_norm_param(name: str) -> bool:
    return bool(re.search(r"norm\d?\.(weight|bias)$", name))


def is_decayed(name: str) -> bool:
    """Weight decay applies to weight matrices only."""
    return name.endswith(".weight") and not is_norm_param(name)


def init_tensor(name: str, shape, rng: np.random.Generator) -> np.ndarray:
    if name.endswith(".bias"):
        return np.zeros(shape)
    if is_norm_param(name):
        return np.ones(shape)
    return trunc_normal(rng, shape)


def init_params(config: ViTConfig, seed: int = 0) -> ViTParams:
    """Truncated-normal weights and tokens, zero biases, unit LayerNorm scales."""
    rng = np.random.default_rng(seed)
    return {
        name: Tensor(init_tensor(name, shape, rng), requires_grad=True, name=name)
        for name, shape in param_shapes(config).items()
    }


def param_count(params: ViTParams) -> int:
    return int(sum(t.size for t in params.values()))


# tokenisation ---------------------------------------------------------------

def _check_images(shape, patch_size: int):
    if len(shape) != 4:
        raise ShapeError("patchify", [shape], "expected (B, C, H, W)")
    _, _, hgt, wid = shape
    if hgt != wid:
        raise ShapeError("patchify", [shape], "images must be square")
    if hgt % patch_size:
        raise ShapeError("patchify", [shape], f"patch size {patch_size} does not divide {hgt}")


def patchify(images: Union[np.ndarray, Tensor], patch_size: int):
    """(B, C, H, W) -> (B, P, C*p*p) in row-major patch order.

    Works on arrays and on tensors (differentiably).
    """
    _check_images(images.shape, patch_size)
    b, c, hgt, _ = images.shape
    g = hgt // patch_size
    six = (b, c, g, patch_size, g, patch_size)
    perm = (0, 2, 4, 1, 3, 5)
    out = (b, g * g, c * patch_size * patch_size)
    if isinstance(images, Tensor):
        return ops.reshape(ops.transpose(ops.reshape(images, six), perm), out)
    return np.ascontiguousarray(np.asarray(images).reshape(six).transpose(perm)).reshape(out)


def unpatchify(patches: np.ndarray, patch_size: int, channels: int) -> np.ndarray:
    b, n, _ = patches.shape
    g = int(round(np.sqrt(n)))
    if g * g != n:
        raise ShapeError("unpatchify", [patches.shape], "patch count is not a square")
    x = np.asarray(patches).reshape(b, g, g, channels, patch_size, patch_size)
    return np.ascontiguousarray(x.transpose(0, 3, 1, 4, 2, 5)).reshape(b, channels, g * patch_size, g * patch_size)


# forward --------------------------------------------------------------------

def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    return ops.add(ops.matmul(x, weight), bias)


def _attention(x: Tensor, params: ViTParams, prefix: str, config: ViTConfig) -> Tensor:
    b, n, d = x.shape
    h, hd = config.heads, config.head_dim
    qkv = linear(x, params[prefix + "qkv.weight"], params[prefix + "qkv.bias"])
    qkv = ops.transpose(ops.reshape(qkv, (b, n, 3, h, hd)), (2, 0, 3, 1, 4))
    q, k, v = (ops.reshape(ops.slice(qkv, 0, i, i + 1), (b, h, n, hd)) for i in range(3))
    scores = ops.scale(ops.matmul(q, ops.transpose(k, (0, 1, 3, 2))), hd ** -0.5)
    out = ops.matmul(ops.softmax(scores), v)
    out = ops.reshape(ops.transpose(out, (0, 2, 1, 3)), (b, n, d))
    return linear(out, params[prefix + "proj.weight"], params[prefix + "proj.bias"])


def _block(x: Tensor, params: ViTParams, i: int, config: ViTConfig) -> Tensor:
    p = f"blocks.{i}."
    eps = config.ln_eps
    h = ops.layer_norm(x, params[p + "norm1.weight"], params[p + "norm1.bias"], eps)
    x = ops.add(x, _attention(h, params, p + "attn.", config))
    h = ops.layer_norm(x, params[p + "norm2.weight"], params[p + "norm2.bias"], eps)
    h = ops.gelu(linear(h, params[p + "mlp.fc1.weight"], params[p + "mlp.fc1.bias"]))
    h = linear(h, params[p + "mlp.fc2.weight"], params[p + "mlp.fc2.bias"])
    return ops.add(x, h)


def _mask_array(mask, batch: int, num_patches: int) -> Optional[np.ndarray]:
    if mask is None:
        return None
    arr = np.asarray(getattr(mask, "mask", mask), dtype=bool)
    if arr.shape != (batch, num_patches):
        raise ShapeError("vit_forward", [arr.shape, (batch, num_patches)], "mask must be (batch, num_patches)")
    return arr


def vit_forward(params: ViTParams, config: ViTConfig, images, mask=None) -> ViTOutput:
    """Encode a batch of images.

    ``mask`` (a MaskSpec or boolean (B, P) array) replaces the embeddings of
    masked patches by the learnable mask token before positional embeddings
    are added.
    """
    images = images.data if isinstance(images, Tensor) else np.asarray(images)
    if images.ndim != 4 or images.shape[1:] != (config.channels, config.image_size, config.image_size):
        raise ShapeError(
            "vit_forward", [images.shape], f"expected (B, {config.channels}, {config.image_size}, {config.image_size})"
        )
    b = images.shape[0]
    d, n_p = config.dim, config.num_patches
    m = _mask_array(mask, b, n_p)

    x = linear(Tensor(patchify(images, config.patch_size)), params["patch_embed.weight"], params["patch_embed.bias"])
    if m is not None and m.any():
        keep = Tensor((~m)[..., None].astype(get_default_dtype()))
        hit = Tensor(m[..., None].astype(get_default_dtype()))
        x = ops.add(ops.mul(x, keep), ops.mul(hit, params["mask_token"]))
    cls = ops.add(Tensor(np.zeros((b, 1, d))), params["cls_token"])
    x = ops.add(ops.concat([cls, x], axis=1), params["pos_embed"])
    embedded = x

    first_probe = config.depth - config.layers_for_probe
    probe_cls: List[Tensor] = []
    nw, nb = params["norm.weight"], params["norm.bias"]
    for i in range(config.depth):
        x = _block(x, params, i, config)
        if i >= first_probe and i < config.depth - 1:
            probe_cls.append(ops.reshape(ops.slice(x, 1, 0, 1), (b, 1, d)))
    out = ops.layer_norm(x, nw, nb, config.ln_eps)
    cls_out = ops.reshape(ops.slice(out, 1, 0, 1), (b, d))
    patches = ops.slice(out, 1, 1, None)
    if probe_cls:
        earlier = ops.layer_norm(ops.concat(probe_cls, axis=1), nw, nb, config.ln_eps)
        layer_cls = ops.concat([earlier, ops.reshape(cls_out, (b, 1, d))], axis=1)
    else:
        layer_cls = ops.reshape(cls_out, (b, 1, d))
    return ViTOutput(cls=cls_out, patches=patches, layer_cls=layer_cls, embedded=embedded)


def teacher_forward(params: ViTParams, config: ViTConfig, images) -> ViTOutput:
    """Forward pass with graph recording disabled."""
    with no_grad():
        return vit_forward(params, config, images)


# weight inheritance ---------------------------------------------------------

def even_layers(teacher_depth: int, student_depth: int) -> List[int]:
    """Evenly spaced block indices; first and last teacher blocks always kept."""
    if student_depth > teacher_depth:
        raise ConfigError("depth", f"student depth {student_depth} exceeds teacher depth {teacher_depth}")
    if student_depth == 1:
        return [0]
    return [int(i) for i in np.round(np.linspace(0, teacher_depth - 1, student_depth))]


def even_channels(teacher: int, student: int) -> np.ndarray:
    """``student`` channel indices out of ``teacher`` with stride floor(teacher/student)."""
    if student > teacher:
        raise ConfigError("dim", f"student width {student} exceeds teacher width {teacher}")
    return np.arange(student) * (teacher // student)


def _select(arr: np.ndarray, shape: Tuple[int, ...], name: str) -> np.ndarray:
    if len(shape) != arr.ndim:
        raise ConfigError(name, f"rank mismatch {arr.shape} vs {shape}")
    for axis, (t, s) in enumerate(zip(arr.shape, shape)):
        if s > t:
            raise ConfigError(name, f"student axis {axis} ({s}) larger than teacher ({t})")
        if "attn.qkv" in name and axis == arr.ndim - 1:
            # select within each of the q, k, v chunks
            idx = even_channels(t // 3, s // 3)
            idx = np.concatenate([idx + j * (t // 3) for j in range(3)])
        else:
            idx = even_channels(t, s)
        arr = np.take(arr, idx, axis=axis)
    return arr


def weight_inherit(teacher: ViTParams, student_config: ViTConfig, seed: int = 0) -> Tuple[ViTParams, List[str]]:
    """Initialise a student by uniform selection of teacher weights.

    Returns the new parameters and a report listing every tensor that fell
    back to fresh initialisation.
    """
    t_depth = len({int(k.split(".")[1]) for k in teacher if k.startswith("blocks.")})
    t_patch_dim = teacher["patch_embed.weight"].shape[0]
    if t_patch_dim != student_config.patch_dim:
        raise ConfigError("patch_size", "teacher and student must share patch size and channels")
    layers = even_layers(t_depth, student_config.depth)
    rng = np.random.default_rng(seed)
    out: ViTParams = {}
    report: List[str] = []
    for name, shape in param_shapes(student_config).items():
        fresh = init_tensor(name, shape, rng)
        src = name
        if name.startswith("blocks."):
            parts = name.split(".")
            parts[1] = str(layers[int(parts[1])])
            src = ".".join(parts)
        t_arr = teacher[src].data
        if name == "pos_embed" and t_arr.shape[0] != shape[0]:
            report.append(f"{name}: length {t_arr.shape[0]} -> {shape[0]}, fresh init")
            data = fresh
        else:
            data = _select(t_arr, shape, name)
        out[name] = Tensor(data, requires_grad=True, name=name)
    return out, report


# model bundle -----------------------------------------------------------------

@dataclass
class Model:
    """An encoder plus an optional linear classifier on its cls token."""

    config: ViTConfig
    params: ViTParams
    classifier: Optional[Dict[str, Tensor]] = None

    @classmethod
    def create(cls, config: ViTConfig, seed: int = 0) -> "Model":
        return cls(config, init_params(config, seed))

    def logits(self, cls_tokens: Tensor) -> Tensor:
        return linear(cls_tokens, self.classifier["classifier.weight"], self.classifier["classifier.bias"])

    def tensors(self) -> Dict[str, Tensor]:
        out = dict(self.params)
        if self.classifier:
            out.update(self.classifier)
        return out

    def frozen(self) -> "Model":
        """Copy whose tensors never require gradients."""
        def freeze(d):
            return {k: Tensor(v.data, requires_grad=False, name=k) for k, v in d.items()}

        return Model(self.config, freeze(self.params), freeze(self.classifier) if self.classifier else None)

    @classmethod
    def from_arrays(cls, config: ViTConfig, arrays: Dict[str, np.ndarray]) -> "Model":
        shapes = param_shapes(config)
        missing = [k for k in shapes if k not in arrays]
        if missing:
            raise ConfigError("checkpoint", f"missing tensors {missing[:3]}")
        params = {}
        for k, shape in shapes.items():
            if tuple(arrays[k].shape) != shape:
                raise ConfigError("checkpoint", f"tensor {k} has shape {arrays[k].shape}, expected {shape}")
            params[k] = Tensor(arrays[k], requires_grad=True, name=k)
        classifier = None
        if "classifier.weight" in arrays:
            classifier = {k: Tensor(arrays[k], requires_grad=True, name=k)
                          for k in ("classifier.weight", "classifier.bias")}
        return cls(config, params, classifier)


def make_classifier(dim: int, classes: int, seed: int = 0) -> Dict[str, Tensor]:
    rng = np.random.default_rng([seed, 11])
    return {
        "classifier.weight": Tensor(trunc_normal(rng, (dim, classes)), True, "classifier.weight"),
        "classifier.bias": Tensor(np.zeros(classes), True, "classifier.bias"),
    }
