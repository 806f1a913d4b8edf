"""Distillation objectives: projection heads, patch masking, token / feature /
patch losses, the logit-based baselines, and one training step."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Dict, Optional, Tuple

import numpy as np

from .autodiff import Tensor, backward, ops
from .autodiff.tensor import ShapeError
from .errors import ConfigError
from .optim import OptState, Schedule, adamw_step
from .vit import Model, ViTOutput, linear, teacher_forward, trunc_normal, vit_forward

HEAD_KINDS = ("ln_linear", "linear_gelu", "gelu_linear")


@dataclass
class ProjectionHead:
    """Maps student tokens (width d_s) to the teacher width d_t."""

    kind: str
    params: Dict[str, Tensor]
    prefix: str

    @property
    def in_dim(self) -> int:
        return self.params[self.prefix + "linear.weight"].shape[0]

    @property
    def out_dim(self) -> int:
        return self.params[self.prefix + "linear.weight"].shape[1]


def make_head(kind: str, student_dim: int, teacher_dim: int, rng: np.random.Generator, prefix: str = "head.") -> ProjectionHead:
    if kind not in HEAD_KINDS:
        raise ConfigError("head_kind", f"unknown projection head {kind!r}; choose from {HEAD_KINDS}")
    params = {
        prefix + "linear.weight": Tensor(trunc_normal(rng, (student_dim, teacher_dim)), True, prefix + "linear.weight"),
        prefix + "linear.bias": Tensor(np.zeros(teacher_dim), True, prefix + "linear.bias"),
    }
    if kind == "ln_linear":
        params[prefix + "norm.weight"] = Tensor(np.ones(student_dim), True, prefix + "norm.weight")
        params[prefix + "norm.bias"] = Tensor(np.zeros(student_dim), True, prefix + "norm.bias")
    return ProjectionHead(kind, params, prefix)


def identity_head(kind: str, student_dim: int, teacher_dim: int, prefix: str = "head.") -> ProjectionHead:
    """Head whose linear map is [I | 0]: unit scale, zero shift and bias."""
    head = make_head(kind, student_dim, teacher_dim, np.random.default_rng(0), prefix)
    w = np.zeros((student_dim, teacher_dim))
    k = min(student_dim, teacher_dim)
    w[np.arange(k), np.arange(k)] = 1.0
    head.params[prefix + "linear.weight"].data = w
    return head


def project(head: ProjectionHead, tokens: Tensor, eps: float = 1e-6) -> Tensor:
    if tokens.shape[-1] != head.in_dim:
        raise ShapeError("project", [tokens.shape, (head.in_dim, head.out_dim)], "trailing width != head input width")
    p, pre = head.params, head.prefix
    w, b = p[pre + "linear.weight"], p[pre + "linear.bias"]
    if head.kind == "ln_linear":
        return linear(ops.layer_norm(tokens, p[pre + "norm.weight"], p[pre + "norm.bias"], eps), w, b)
    if head.kind == "linear_gelu":
        return ops.gelu(linear(tokens, w, b))
    return linear(ops.gelu(tokens), w, b)


# masking --------------------------------------------------------------------

@dataclass
class MaskSpec:
    mask: np.ndarray  # (batch, num_patches) bool, True = masked
    ratio_range: Tuple[float, float]

    @property
    def fractions(self) -> np.ndarray:
        return self.mask.mean(axis=1)


def sample_mask(batch: int, num_patches: int, ratio_range=(0.1, 0.5), rng: Optional[np.random.Generator] = None) -> MaskSpec:
    """Per sample: ratio ~ U[lo, hi], round(ratio * P) positions masked uniformly.

    The count is kept within [ceil(lo*P), floor(hi*P)] when that range is
    non-empty, and always within [1, P - 1].
    """
    lo, hi = float(ratio_range[0]), float(ratio_range[1])
    if not 0 < lo <= hi < 1:
        raise ConfigError("mask_ratio", f"need 0 < lo <= hi < 1, got {ratio_range}")
    if num_patches < 2:
        raise ConfigError("num_patches", "masking needs at least 2 patches")
    rng = rng if rng is not None else np.random.default_rng()
    n_min = math.ceil(lo * num_patches - 1e-9)
    n_max = math.floor(hi * num_patches + 1e-9)
    mask = np.zeros((batch, num_patches), dtype=bool)
    for i in range(batch):
        n = int(round(rng.uniform(lo, hi) * num_patches))
        if n_min <= n_max:
            n = min(max(n, n_min), n_max)
        n = min(max(n, 1), num_patches - 1)
        mask[i, rng.choice(num_patches, size=n, replace=False)] = True
    return MaskSpec(mask, (lo, hi))


# losses ---------------------------------------------------------------------

@dataclass
class LossWeights:
    token: float = 1.0
    feat: float = 1.0
    patch: float = 1.0
    kd_lambda: float = 0.5

    def __post_init__(self):
        for name in ("token", "feat", "patch", "kd_lambda"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise ConfigError(f"weights.{name}", f"must be finite and >= 0, got {v}")
        if self.kd_lambda > 1:
            raise ConfigError("weights.kd_lambda", "must lie in [0, 1]")


@dataclass
class LossBreakdown:
    token: float = 0.0
    feat: float = 0.0
    patch: float = 0.0
    ce: float = 0.0
    kl: float = 0.0
    total: float = 0.0

    def as_dict(self) -> Dict[str, float]:
        return asdict(self)


def _check_target(op: str, projected: Tensor, target: Tensor):
    if projected.shape != target.shape:
        raise ShapeError(op, [projected.shape, target.shape])


def loss_token(student_cls: Tensor, teacher_cls: Tensor, head: ProjectionHead) -> Tensor:
    """Mean squared error between projected student cls and teacher cls."""
    projected = project(head, student_cls)
    _check_target("loss_token", projected, teacher_cls)
    return ops.mse(projected, teacher_cls)


def loss_feat(student_tokens: Tensor, teacher_tokens: Tensor, head: ProjectionHead) -> Tensor:
    projected = project(head, student_tokens)
    _check_target("loss_feat", projected, teacher_tokens)
    return ops.mse(projected, teacher_tokens)


def patch_weights(mask: np.ndarray, dim: int, masked_only: bool = True) -> np.ndarray:
    """(B, P, 1) weights turning a sum of squared errors into the patch loss."""
    b, p = mask.shape
    if not masked_only:
        return np.full((b, p, 1), 1.0 / (b * p * dim))
    counts = mask.sum(axis=1)
    if (counts == 0).any():
        raise ValueError("loss_patch: a sample has no masked patches")
    return (mask / (counts[:, None] * b * dim))[..., None]


def loss_patch(student_masked: Tensor, teacher_patches: Tensor, mask, head: ProjectionHead,
               masked_only: bool = True) -> Tensor:
    """Squared error at masked positions: mean over channels and masked
    tokens of each sample, then over the batch."""
    m = np.asarray(getattr(mask, "mask", mask), dtype=bool)
    projected = project(head, student_masked)
    _check_target("loss_patch", projected, teacher_patches)
    if m.shape != projected.shape[:2]:
        raise ShapeError("loss_patch", [m.shape, projected.shape])
    diff = ops.sub(projected, teacher_patches)
    w = Tensor(patch_weights(m, projected.shape[-1], masked_only))
    return ops.sum(ops.mul(ops.mul(diff, diff), w))


def loss_total(token: Optional[Tensor], feat: Optional[Tensor], patch: Optional[Tensor],
               weights: LossWeights) -> Tuple[Tensor, LossBreakdown]:
    """Weighted sum of the active objectives (components left as None count as 0)."""
    terms = []
    br = LossBreakdown()
    for name, value, w in (("token", token, weights.token), ("feat", feat, weights.feat),
                           ("patch", patch, weights.patch)):
        if value is None:
            continue
        setattr(br, name, value.item())
        if w != 0.0:
            terms.append(ops.scale(value, w))
    if not terms:
        raise ValueError("loss_total: no active objective")
    total = terms[0]
    for t in terms[1:]:
        total = ops.add(total, t)
    br.total = total.item()
    return total, br


def loss_supervised_kd(student_logits: Tensor, teacher_logits: Tensor, labels, mode: str = "soft",
                       use_ce: bool = True, lam: float = 0.5) -> Tuple[Tensor, float, float]:
    """Logit distillation baseline: (1 - lam) * CE(labels) + lam * D, or D alone.

    D is KL(teacher || student) for ``soft`` and cross-entropy against the
    teacher's argmax for ``hard``. Returns (loss, ce value, D value).
    """
    if student_logits.shape != teacher_logits.shape:
        raise ShapeError("loss_supervised_kd", [student_logits.shape, teacher_logits.shape], "class counts differ")
    if mode == "soft":
        teacher_p = Tensor(np.exp(ops.log_softmax(teacher_logits.detach()).data))
        kd = ops.kl_div(ops.log_softmax(student_logits), teacher_p)
    elif mode == "hard":
        kd = ops.cross_entropy(student_logits, np.argmax(teacher_logits.data, axis=1))
    else:
        raise ConfigError("kd_mode", f"unknown mode {mode!r}")
    if not use_ce:
        return kd, 0.0, kd.item()
    ce = ops.cross_entropy(student_logits, labels)
    loss = ops.add(ops.scale(ce, 1.0 - lam), ops.scale(kd, lam))
    return loss, ce.item(), kd.item()


# training step --------------------------------------------------------------

@dataclass
class Objective:
    """What a distillation run optimises."""

    kind: str = "proteus"  # or "kd"
    weights: LossWeights = field(default_factory=LossWeights)
    mask_ratio: Tuple[float, float] = (0.1, 0.5)
    patch_masked_only: bool = True
    feat_include_cls: bool = False
    head_kind: str = "ln_linear"
    kd_mode: str = "soft"
    use_ce: bool = False

    def __post_init__(self):
        if self.kind not in ("proteus", "kd"):
            raise ConfigError("objective.kind", f"unknown objective {self.kind!r}")
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        self.mask_ratio = (float(self.mask_ratio[0]), float(self.mask_ratio[1]))
        if self.head_kind not in HEAD_KINDS:
            raise ConfigError("objective.head_kind", f"unknown projection head {self.head_kind!r}")
        if self.kd_mode not in ("soft", "hard"):
            raise ConfigError("objective.kd_mode", f"unknown mode {self.kd_mode!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mask_ratio"] = list(self.mask_ratio)
        return d


def make_heads(objective: Objective, student_dim: int, teacher_dim: int, seed: int) -> Dict[str, ProjectionHead]:
    rng = np.random.default_rng([seed, 7])
    return {name: make_head(objective.head_kind, student_dim, teacher_dim, rng, prefix=f"heads.{name}.")
            for name in ("token", "feat", "patch")}


def check_pairing(teacher: Model, student: Model):
    if teacher.config.patch_size != student.config.patch_size:
        raise ConfigError("student.patch_size", "teacher and student must share the patch size")
    if teacher.config.image_size != student.config.image_size:
        raise ConfigError("student.image_size", "teacher and student must share the image size")
    if teacher.config.channels != student.config.channels:
        raise ConfigError("student.channels", "teacher and student must share the channel count")


def _feat_tokens(out: ViTOutput, include_cls: bool) -> Tensor:
    if not include_cls:
        return out.patches
    b, d = out.cls.shape
    return ops.concat([ops.reshape(out.cls, (b, 1, d)), out.patches], axis=1)


def trainable_params(student: Model, heads: Optional[Dict[str, ProjectionHead]] = None,
                     classifier: Optional[Dict[str, Tensor]] = None) -> Dict[str, Tensor]:
    out = dict(student.params)
    for head in (heads or {}).values():
        out.update(head.params)
    if classifier:
        out.update(classifier)
    return out


def compute_losses(teacher: Model, student: Model, heads: Dict[str, ProjectionHead], images: np.ndarray,
                   objective: Objective, rng: np.random.Generator,
                   classifier: Optional[Dict[str, Tensor]] = None,
                   labels=None) -> Tuple[Tensor, LossBreakdown]:
    """Forward passes and the objective for one batch (no update)."""
    check_pairing(teacher, student)
    t_out = teacher_forward(teacher.params, teacher.config, images)
    s_out = vit_forward(student.params, student.config, images)
    if objective.kind == "kd":
        if classifier is None or teacher.classifier is None:
            raise ConfigError("objective.kind", "logit distillation needs teacher and student classifiers")
        s_logits = linear(s_out.cls, classifier["classifier.weight"], classifier["classifier.bias"])
        t_logits = teacher.logits(t_out.cls)
        loss, ce, kd = loss_supervised_kd(s_logits, t_logits, labels, objective.kd_mode, objective.use_ce,
                                          objective.weights.kd_lambda)
        return loss, LossBreakdown(ce=ce, kl=kd, total=loss.item())
    w = objective.weights
    token = feat = patch = None
    if w.token > 0:
        token = loss_token(s_out.cls, t_out.cls, heads["token"])
    if w.feat > 0:
        feat = loss_feat(_feat_tokens(s_out, objective.feat_include_cls),
                         _feat_tokens(t_out, objective.feat_include_cls), heads["feat"])
    if w.patch > 0:
        mask = sample_mask(images.shape[0], student.config.num_patches, objective.mask_ratio, rng)
        s_masked = vit_forward(student.params, student.config, images, mask)
        patch = loss_patch(s_masked.patches, t_out.patches, mask, heads["patch"], objective.patch_masked_only)
    return loss_total(token, feat, patch, w)


def distill_step(teacher: Model, student: Model, heads: Dict[str, ProjectionHead], images: np.ndarray,
                 objective: Objective, rng: np.random.Generator, opt_state: OptState, schedule: Schedule,
                 step: int, classifier: Optional[Dict[str, Tensor]] = None, labels=None) -> LossBreakdown:
    """One optimisation step of the student (and heads / classifier)."""
    loss, br = compute_losses(teacher, student, heads, images, objective, rng, classifier, labels)
    params = trainable_params(student, heads if objective.kind == "proteus" else None, classifier)
    grads = backward(loss, params)
    adamw_step(params, grads, opt_state, schedule, step)
    return br
