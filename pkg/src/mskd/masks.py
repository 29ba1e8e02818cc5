"""Binary region masks that gate the distillation losses.

Masks are float tensors holding only 0 and 1 so they can multiply loss maps
directly. Functions accept a single item (``2xHxW`` logits, ``HxW`` masks) or
a leading batch dimension.
"""

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .errors import InvalidInputError, ShapeError


@dataclass
class RegionMaskSet:
    organ_masks: list  # K tensors, M^k
    background_mask: torch.Tensor  # M^B
    downsampled: list  # K tensors, M^{k,l}
    level: int = 0


def binarize_prediction(teacher_logits):
    """Organ mask of a binary teacher: 1 where the organ logit strictly wins.

    Equal logits resolve to background.
    """
    logits = torch.as_tensor(teacher_logits)
    if logits.dim() not in (3, 4) or logits.shape[-3] != 2:
        raise ShapeError(f"expected 2 logit channels, got shape {tuple(logits.shape)}")
    if not torch.isfinite(logits).all():
        raise InvalidInputError("teacher logits contain non-finite values")
    return (logits[..., 1, :, :] > logits[..., 0, :, :]).to(logits.dtype)


def background_mask(organ_masks):
    """Pixels every teacher calls background: prod_k (1 - M^k)."""
    if len(organ_masks) == 0:
        raise InvalidInputError("background_mask needs at least one organ mask")
    masks = [torch.as_tensor(m) for m in organ_masks]
    shape = masks[0].shape
    out = torch.ones_like(masks[0])
    for m in masks:
        if m.shape != shape:
            raise ShapeError(f"mask shapes differ: {tuple(shape)} vs {tuple(m.shape)}")
        out = out * (1 - m)
    return out


def downsample_mask(mask, levels):
    """Apply ``levels`` rounds of 2x2 max pooling."""
    mask = torch.as_tensor(mask)
    if levels < 0:
        raise InvalidInputError(f"levels must be >= 0, got {levels}")
    if levels == 0:
        return mask
    factor = 2 ** levels
    h, w = mask.shape[-2:]
    if h % factor or w % factor:
        raise ShapeError(f"mask of size {h}x{w} is not divisible by 2^{levels}")
    x = mask.reshape(-1, 1, h, w)
    for _ in range(levels):
        x = F.max_pool2d(x, 2)
    return x.reshape(*mask.shape[:-2], h // factor, w // factor)


def region_masks(teacher_logits, level):
    """Build the full mask set from a list of K teacher logit tensors."""
    organ = [binarize_prediction(t) for t in teacher_logits]
    return RegionMaskSet(
        organ_masks=organ,
        background_mask=background_mask(organ),
        downsampled=[downsample_mask(m, level) for m in organ],
        level=level,
    )
