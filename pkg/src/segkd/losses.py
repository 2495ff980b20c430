"""Training objectives.

Supervised segmentation uses a weighted cross-entropy + soft-Dice mix
(defaults 0.2 / 0.8). Distillation aligns encoder hidden states by MSE and
decoder logits by MSE or soft-target cross-entropy, with three ways of
reconciling the teacher's low-resolution logits with the student's
full-resolution output. Contrastive and masked-reconstruction objectives back
the SSL baselines.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ValidationError
from .models import EncoderOutput, SegLogits

DICE_EPS = 1e-5
DECODER_KD_KINDS = ("mse", "cross_entropy")
MASK_MODES = ("interpolated", "uninterpolated", "drop_last_channel")


@dataclass(frozen=True)
class SupervisedLossWeights:
    ce: float = 0.2
    dice: float = 0.8

    def __post_init__(self):
        if self.ce < 0 or self.dice < 0:
            raise ValidationError("loss weights must be >= 0")


def _check_logits_mask(logits: torch.Tensor, mask: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    if logits.ndim == 3:
        logits = logits[None]
    if mask.ndim == 2:
        mask = mask[None]
    if logits.ndim != 4 or mask.ndim != 3:
        raise ValidationError(
            f"expected (B,C,H,W) logits and (B,H,W) mask, got {tuple(logits.shape)} / {tuple(mask.shape)}"
        )
    if logits.shape[0] != mask.shape[0] or logits.shape[-2:] != mask.shape[-2:]:
        raise ValidationError(
            f"logits {tuple(logits.shape)} and mask {tuple(mask.shape)} are misaligned"
        )
    if logits.shape[1] < 2:
        raise ValidationError("need at least 2 classes")
    if int(mask.max()) >= logits.shape[1]:
        raise ValidationError(
            f"mask value {int(mask.max())} >= class count {logits.shape[1]}"
        )
    return logits, mask


def soft_dice_loss(logits: torch.Tensor, mask: torch.Tensor, eps: float = DICE_EPS) -> torch.Tensor:
    """1 - mean over all classes (background included) of the smoothed overlap."""
    logits, mask = _check_logits_mask(logits, mask)
    c = logits.shape[1]
    probs = logits.softmax(dim=1)
    onehot = F.one_hot(mask, num_classes=c).permute(0, 3, 1, 2).to(probs.dtype)
    dims = (0, 2, 3)
    inter = (probs * onehot).sum(dim=dims)
    denom = probs.sum(dim=dims) + onehot.sum(dim=dims)
    per_class = (2.0 * inter + eps) / (denom + eps)
    return 1.0 - per_class.mean()


def ce_dice_loss(
    logits: torch.Tensor | SegLogits,
    mask: torch.Tensor,
    weights: SupervisedLossWeights = SupervisedLossWeights(),
) -> torch.Tensor:
    if isinstance(logits, SegLogits):
        logits = logits.logits
    logits, mask = _check_logits_mask(logits, mask)
    ce = F.cross_entropy(logits, mask)
    dice = soft_dice_loss(logits, mask)
    return weights.ce * ce + weights.dice * dice


class HiddenProjection(nn.Module):
    """Trainable student-to-teacher width projection, owned by one
    distillation run and discarded afterward."""

    def __init__(self, student_dim: int, teacher_dim: int, dtype: torch.dtype = torch.float32):
        super().__init__()
        self.proj = nn.Linear(student_dim, teacher_dim, bias=False, dtype=dtype)

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        return self.proj(tokens)


def encoder_kd_loss(
    h_student: torch.Tensor | EncoderOutput,
    h_teacher: torch.Tensor | EncoderOutput,
    projection: HiddenProjection | None = None,
) -> torch.Tensor:
    """Mean squared error over all token-grid elements after the optional
    student-to-teacher projection. Token-grid mismatches are errors; hidden
    states are never silently resampled."""
    hs = h_student.tokens if isinstance(h_student, EncoderOutput) else h_student
    ht = h_teacher.tokens if isinstance(h_teacher, EncoderOutput) else h_teacher
    if hs.shape[:-1] != ht.shape[:-1]:
        raise ValidationError(
            f"token grids differ: {tuple(hs.shape[:-1])} vs {tuple(ht.shape[:-1])}"
        )
    if projection is not None:
        hs = projection(hs)
    if hs.shape[-1] != ht.shape[-1]:
        raise ValidationError(
            f"hidden widths differ after projection: {hs.shape[-1]} vs {ht.shape[-1]} "
            "(pass a HiddenProjection)"
        )
    return F.mse_loss(hs, ht)


def _soft_cross_entropy(student_logits: torch.Tensor, teacher_logits: torch.Tensor) -> torch.Tensor:
    """Mean over pixels of H(softmax(teacher), softmax(student))."""
    log_p_s = F.log_softmax(student_logits, dim=1)
    p_t = teacher_logits.softmax(dim=1)
    return -(p_t * log_p_s).sum(dim=1).mean()


def decoder_kd_loss(
    y_student: torch.Tensor | SegLogits,
    y_teacher: torch.Tensor | SegLogits,
    kind: str = "mse",
    mask_mode: str = "interpolated",
) -> torch.Tensor:
    """Align decoder logits between student (full resolution) and teacher.

    mask_mode:
      interpolated       teacher logits bilinearly resized up to student size
      uninterpolated     student logits average-pooled down to teacher size
      drop_last_channel  teacher carries one extra channel which is dropped,
                         then alignment proceeds as in ``interpolated``
    """
    ys = y_student.logits if isinstance(y_student, SegLogits) else y_student
    yt = y_teacher.logits if isinstance(y_teacher, SegLogits) else y_teacher
    if ys.ndim == 3:
        ys = ys[None]
    if yt.ndim == 3:
        yt = yt[None]
    if kind not in DECODER_KD_KINDS:
        raise ValidationError(f"unknown decoder KD kind {kind!r}, valid: {DECODER_KD_KINDS}")
    if mask_mode not in MASK_MODES:
        raise ValidationError(f"unknown mask mode {mask_mode!r}, valid: {MASK_MODES}")
    if mask_mode == "drop_last_channel":
        if yt.shape[1] != ys.shape[1] + 1:
            raise ValidationError(
                f"drop_last_channel expects teacher with {ys.shape[1] + 1} channels, "
                f"got {yt.shape[1]}"
            )
        yt = yt[:, :-1]
    if ys.shape[1] != yt.shape[1]:
        raise ValidationError(
            f"class-channel mismatch: student {ys.shape[1]} vs teacher {yt.shape[1]}"
        )
    if mask_mode == "uninterpolated":
        if ys.shape[-2:] != yt.shape[-2:]:
            ys = F.adaptive_avg_pool2d(ys, yt.shape[-2:])
    else:
        if yt.shape[-2:] != ys.shape[-2:]:
            yt = F.interpolate(yt, size=ys.shape[-2:], mode="bilinear", align_corners=False)
    if kind == "mse":
        return F.mse_loss(ys, yt)
    return _soft_cross_entropy(ys, yt)


@dataclass
class KDLossTerms:
    encoder_loss: torch.Tensor
    decoder_loss: torch.Tensor
    w_hidden: float
    w_decoder: float
    decoder_loss_kind: str

    @property
    def weighted_total(self) -> torch.Tensor:
        return self.w_hidden * self.encoder_loss + self.w_decoder * self.decoder_loss


# ------------------------------------------------------------------ MoCo


@dataclass
class ContrastiveBatch:
    """L2-normalized queries, positive keys, shared negatives, temperature."""

    queries: torch.Tensor  # (B, D)
    positive_keys: torch.Tensor  # (B, D)
    negative_keys: torch.Tensor  # (K, D)
    temperature: float = 0.2

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValidationError(f"temperature must be > 0, got {self.temperature}")
        if self.queries.shape != self.positive_keys.shape:
            raise ValidationError("queries and positive keys must have equal shapes")
        if self.negative_keys.ndim != 2 or self.negative_keys.shape[1] != self.queries.shape[1]:
            raise ValidationError("negative keys must be (K, D) with matching D")
        for name, t in (
            ("queries", self.queries),
            ("positive_keys", self.positive_keys),
            ("negative_keys", self.negative_keys),
        ):
            norms = t.detach().norm(dim=-1)
            if (norms < 1e-8).any():
                raise ValidationError(f"{name} contain a zero-norm embedding")
            if (norms - 1.0).abs().max() > 1e-3:
                raise ValidationError(f"{name} are not L2-normalized")


def moco_loss(batch: ContrastiveBatch) -> torch.Tensor:
    """InfoNCE with the positive key prepended to the negative set."""
    tau = batch.temperature
    pos = (batch.queries * batch.positive_keys).sum(dim=-1, keepdim=True)  # (B, 1)
    neg = batch.queries @ batch.negative_keys.t()  # (B, K)
    logits = torch.cat([pos, neg], dim=1) / tau
    targets = torch.zeros(logits.shape[0], dtype=torch.long, device=logits.device)
    return F.cross_entropy(logits, targets)


@torch.no_grad()
def momentum_update(
    key_params: list[torch.Tensor] | dict[str, torch.Tensor],
    query_params: list[torch.Tensor] | dict[str, torch.Tensor],
    momentum: float,
) -> None:
    """In-place EMA: key <- m * key + (1 - m) * query."""
    if not 0.0 <= momentum <= 1.0:
        raise ValidationError(f"momentum must be in [0, 1], got {momentum}")
    if isinstance(key_params, dict):
        pairs = [(key_params[k], query_params[k]) for k in key_params]
    else:
        pairs = list(zip(key_params, query_params))
    for k, q in pairs:
        if k.shape != q.shape:
            raise ValidationError(f"shape mismatch {tuple(k.shape)} vs {tuple(q.shape)}")
        k.mul_(momentum).add_(q, alpha=1.0 - momentum)


# ------------------------------------------------------------------ MAE


def patchify(images: torch.Tensor, patch_size: int) -> torch.Tensor:
    """(B, C, H, W) -> (B, N, patch*patch*C) in row-major patch order."""
    b, c, h, w = images.shape
    if h % patch_size or w % patch_size:
        raise ValidationError(f"image size {(h, w)} not divisible by patch {patch_size}")
    gh, gw = h // patch_size, w // patch_size
    x = images.reshape(b, c, gh, patch_size, gw, patch_size)
    x = x.permute(0, 2, 4, 3, 5, 1)
    return x.reshape(b, gh * gw, patch_size * patch_size * c)


def mae_loss(
    original: torch.Tensor,
    reconstruction: torch.Tensor,
    mask_positions: torch.Tensor,
    patch_size: int,
    scope: str = "masked_only",
) -> torch.Tensor:
    """Reconstruction MSE, per-patch pixel mean then mean over selected patches.

    mask_positions is a boolean (B, N) or (N,) map of hidden patches.
    scope="all" averages over every patch instead of the masked set.
    """
    if scope not in ("masked_only", "all"):
        raise ValidationError(f"unknown mae loss scope {scope!r}")
    if original.shape != reconstruction.shape:
        raise ValidationError(
            f"shape mismatch: {tuple(original.shape)} vs {tuple(reconstruction.shape)}"
        )
    tgt = patchify(original, patch_size)
    rec = patchify(reconstruction, patch_size)
    per_patch = (rec - tgt).square().mean(dim=-1)  # (B, N)
    if scope == "all":
        return per_patch.mean()
    mask = mask_positions.to(torch.bool)
    if mask.ndim == 1:
        mask = mask[None].expand(per_patch.shape[0], -1)
    if mask.shape != per_patch.shape:
        raise ValidationError(
            f"mask_positions shape {tuple(mask.shape)} does not match patch grid "
            f"{tuple(per_patch.shape)}"
        )
    if not mask.any():
        raise ValidationError("empty mask set: no patches were hidden")
    return per_patch[mask].mean()
