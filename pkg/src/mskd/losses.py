"""Supervision signals for teachers and the distilled student.

All tensors follow the ``[B,] C, H, W`` layout; a missing batch dimension is
added on entry and every loss is averaged over the batch. Distillation KL
terms are normalised by the full pixel count of the map they live on, not by
the size of the region mask, so their magnitude grows with the region area.
"""

import math
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

from .errors import InvalidInputError, ShapeError
from .masks import region_masks

PROB_FLOOR = 1e-12
DICE_SMOOTH = 1e-5
# KL of matching distributions can come out at -1e-17 from rounding.
_NEG_TOL = 1e-9


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 1.0
    lambda2: float = 10.0

    def __post_init__(self):
        for name in ("lambda1", "lambda2"):
            value = getattr(self, name)
            if not math.isfinite(value) or value < 0:
                raise InvalidInputError(f"{name} must be finite and >= 0, got {value}")


@dataclass
class LossBreakdown:
    per_organ_logit: list
    background_logit: torch.Tensor
    per_organ_feature: list
    total: torch.Tensor
    weights: LossWeights = field(default_factory=LossWeights)

    def as_floats(self):
        """Plain-float view for logging."""
        return {
            "total": float(self.total),
            "background_logit": float(self.background_logit),
            "per_organ_logit": [float(v) for v in self.per_organ_logit],
            "per_organ_feature": [float(v) for v in self.per_organ_feature],
        }


def _batched(x, rank):
    x = torch.as_tensor(x)
    if x.dim() == rank - 1:
        return x.unsqueeze(0)
    if x.dim() != rank:
        raise ShapeError(f"expected a {rank - 1}-d or {rank}-d tensor, got shape {tuple(x.shape)}")
    return x


def softmax_channels(logits):
    logits = torch.as_tensor(logits)
    if logits.dim() < 3 or logits.shape[-3] < 2:
        raise ShapeError(f"need at least 2 channels, got shape {tuple(logits.shape)}")
    if not torch.isfinite(logits).all():
        raise InvalidInputError("logits contain non-finite values")
    # torch subtracts the per-pixel max internally.
    return torch.softmax(logits, dim=-3)


def transfer_logits(teacher_probs, k, num_organs):
    """Embed a binary teacher distribution into the (K+1)-class space.

    Background probability goes to channel 0, organ probability to channel
    ``k``, and every other organ channel is zero.
    """
    if not 1 <= k <= num_organs:
        raise InvalidInputError(f"organ index {k} outside 1..{num_organs}")
    probs = torch.as_tensor(teacher_probs)
    if probs.dim() < 3 or probs.shape[-3] != 2:
        raise ShapeError(f"teacher probabilities need 2 channels, got {tuple(probs.shape)}")
    shape = list(probs.shape)
    shape[-3] = num_organs + 1
    out = probs.new_zeros(shape)
    out[..., 0, :, :] = probs[..., 0, :, :]
    out[..., k, :, :] = probs[..., 1, :, :]
    return out


def background_signal(transferred):
    """Average of the transferred teacher distributions."""
    if len(transferred) == 0:
        raise InvalidInputError("background_signal needs at least one teacher")
    shape = transferred[0].shape
    for t in transferred:
        if t.shape != shape:
            raise ShapeError(f"transferred shapes differ: {tuple(shape)} vs {tuple(t.shape)}")
    return torch.stack(list(transferred)).mean(dim=0)


def masked_kl(target_probs, student_probs, mask):
    """sum_{i in mask} KL(target_i || student_i) / (H*W), averaged over the batch."""
    target = _batched(target_probs, 4)
    student = _batched(student_probs, 4)
    mask = _batched(mask, 3)
    if target.shape != student.shape:
        raise ShapeError(f"target {tuple(target.shape)} vs student {tuple(student.shape)}")
    if mask.shape != target.shape[:1] + target.shape[2:]:
        raise ShapeError(f"mask {tuple(mask.shape)} does not match maps {tuple(target.shape)}")
    if (target < 0).any():
        raise InvalidInputError("target probabilities must be non-negative")
    log_q = torch.log(student.clamp_min(PROB_FLOOR))
    kl = (torch.xlogy(target, target) - target * log_q).sum(dim=1)
    h, w = kl.shape[-2:]
    per_image = (kl * mask).sum(dim=(1, 2)) / (h * w)
    return per_image.mean()


def organ_logit_loss(teacher_probs, student_probs, organ_mask, k, num_organs):
    target = transfer_logits(teacher_probs, k, num_organs)
    return masked_kl(target, student_probs, organ_mask)


def background_logit_loss(all_teacher_probs, student_probs, bg_mask, num_organs):
    transferred = [
        transfer_logits(p, k, num_organs) for k, p in enumerate(all_teacher_probs, start=1)
    ]
    return masked_kl(background_signal(transferred), student_probs, bg_mask)


def sorted_feature_loss(teacher_features, student_features, mask):
    """Masked KL between channel-sorted feature distributions.

    Both inputs are already softmaxed over channels. Sorting makes the loss
    blind to how each network happens to order its channels.
    """
    t = _batched(teacher_features, 4)
    s = _batched(student_features, 4)
    if t.shape[1] != s.shape[1]:
        raise ShapeError(f"feature channels differ: teacher {t.shape[1]} vs student {s.shape[1]}")
    t_sorted = torch.sort(t, dim=1, descending=True).values
    s_sorted = torch.sort(s, dim=1, descending=True).values
    return masked_kl(t_sorted, s_sorted, mask)


def total_loss(per_organ_logit, background_logit, per_organ_feature, weights=None):
    weights = weights or LossWeights()
    parts = list(per_organ_logit) + [background_logit] + list(per_organ_feature)
    for value in parts:
        v = float(torch.as_tensor(value).detach())
        if not math.isfinite(v) or v < -_NEG_TOL:
            raise InvalidInputError(f"loss components must be finite and >= 0, got {v}")
    total = sum(per_organ_logit) + weights.lambda1 * background_logit
    if per_organ_feature:
        total = total + weights.lambda2 * sum(per_organ_feature)
    return LossBreakdown(
        per_organ_logit=list(per_organ_logit),
        background_logit=background_logit,
        per_organ_feature=list(per_organ_feature),
        total=total if torch.is_tensor(total) else torch.tensor(total, dtype=torch.float64),
        weights=weights,
    )


@dataclass
class TeacherSignals:
    """Everything the frozen teachers contribute to the student loss.

    Depends only on teacher outputs, so it can be computed once per image.
    """
    organ_targets: list  # q^k transferred to K+1 classes, one per teacher
    background_target: torch.Tensor  # mean of the transferred signals
    organ_masks: list
    background_mask: torch.Tensor
    feature_masks: list  # organ masks at the feature resolution
    sorted_features: list  # channel-softmaxed, descending-sorted teacher features, or None

    def take(self, rows):
        pick = lambda ts: None if ts is None else [t[rows] for t in ts]  # noqa: E731
        return TeacherSignals(
            organ_targets=pick(self.organ_targets),
            background_target=self.background_target[rows],
            organ_masks=pick(self.organ_masks),
            background_mask=self.background_mask[rows],
            feature_masks=pick(self.feature_masks),
            sorted_features=pick(self.sorted_features),
        )


def teacher_signals(teacher_logits, teacher_features=None, level=1):
    """Region masks and targets from K binary teachers (ordered by organ 1..K)."""
    num_organs = len(teacher_logits)
    if num_organs == 0:
        raise InvalidInputError("distillation needs at least one teacher")
    masks = region_masks(teacher_logits, level)
    targets = [transfer_logits(softmax_channels(t), k, num_organs)
               for k, t in enumerate(teacher_logits, start=1)]
    sorted_features = None
    if teacher_features is not None:
        sorted_features = [torch.sort(softmax_channels(f), dim=-3, descending=True).values
                           for f in teacher_features]
    return TeacherSignals(
        organ_targets=targets,
        background_target=background_signal(targets),
        organ_masks=masks.organ_masks,
        background_mask=masks.background_mask,
        feature_masks=masks.downsampled,
        sorted_features=sorted_features,
    )


def region_loss(signals, student_logits, student_features=None, weights=None):
    """Weighted organ, background and feature terms for the student outputs."""
    weights = weights or LossWeights()
    num_organs = len(signals.organ_targets)
    if student_logits.shape[-3] != num_organs + 1:
        raise ShapeError(
            f"student emits {student_logits.shape[-3]} classes, expected {num_organs + 1}"
        )
    student_probs = softmax_channels(student_logits)
    organ = [masked_kl(t, student_probs, m)
             for t, m in zip(signals.organ_targets, signals.organ_masks)]
    background = masked_kl(signals.background_target, student_probs, signals.background_mask)
    feature = []
    if signals.sorted_features is not None and student_features is not None:
        s_sorted = torch.sort(softmax_channels(student_features), dim=-3, descending=True).values
        for t, m in zip(signals.sorted_features, signals.feature_masks):
            if t.shape[-3] != s_sorted.shape[-3]:
                raise ShapeError(f"feature channels differ: teacher {t.shape[-3]} "
                                 f"vs student {s_sorted.shape[-3]}")
            feature.append(masked_kl(t, s_sorted, m))
    return total_loss(organ, background, feature, weights)


def distillation_loss(teacher_logits, teacher_features, student_logits, student_features,
                      weights=None, level=1):
    """Full region-based objective for one batch.

    ``teacher_logits``/``teacher_features`` are lists ordered by organ index
    1..K; features are raw decoder activations at resolution ``H/2^level``.
    """
    signals = teacher_signals(teacher_logits, teacher_features, level)
    return region_loss(signals, student_logits, student_features, weights)


def seg_loss_dice_ce(logits, labels):
    """Soft dice (mean over classes) plus pixel-mean cross-entropy.

    Dice uses ``(2*sum(p*y) + eps) / (sum(p) + sum(y) + eps)`` so a class that
    is absent and correctly left empty costs nothing.
    """
    logits = _batched(logits, 4)
    labels = _batched(labels, 3).long()
    num_classes = logits.shape[1]
    if labels.shape != logits.shape[:1] + logits.shape[2:]:
        raise ShapeError(f"labels {tuple(labels.shape)} vs logits {tuple(logits.shape)}")
    if labels.min() < 0 or labels.max() >= num_classes:
        raise InvalidInputError(f"labels must lie in 0..{num_classes - 1}")
    probs = softmax_channels(logits)
    onehot = F.one_hot(labels, num_classes).permute(0, 3, 1, 2).to(probs.dtype)
    inter = (probs * onehot).sum(dim=(2, 3))
    denom = probs.sum(dim=(2, 3)) + onehot.sum(dim=(2, 3))
    dice = 1 - (2 * inter + DICE_SMOOTH) / (denom + DICE_SMOOTH)
    ce = F.cross_entropy(logits, labels)
    return dice.mean() + ce
