"""Comparators: merged individual teachers and hard pseudo-label distillation."""

import numpy as np
import torch

from .data import Dataset
from .errors import InvalidInputError
from .losses import seg_loss_dice_ce, softmax_channels
from .masks import binarize_prediction
from .model import build_model
from .training import (STREAM_PSEUDO_BATCHES, STREAM_STUDENT_INIT, check_teachers, fit,
                       prepare_images, stream_seed, teacher_outputs, union_images)


def merge_teacher_logits(teacher_logits):
    """Label map from K binary teachers' logits (each [B x] 2 x H x W).

    A pixel goes to the claiming teacher with the highest organ probability;
    ties go to the lowest organ index and unclaimed pixels stay background.
    """
    if len(teacher_logits) == 0:
        raise InvalidInputError("need at least one teacher")
    claims = torch.stack([binarize_prediction(t) for t in teacher_logits])
    fg = torch.stack([softmax_channels(t)[..., 1, :, :] for t in teacher_logits])
    fg = torch.where(claims > 0, fg, torch.full_like(fg, -1.0))
    best = fg.argmax(dim=0)  # first maximum on ties
    return torch.where(claims.amax(dim=0) > 0, best + 1, torch.zeros_like(best))


@torch.no_grad()
def merge_teacher_predictions(teachers, images):
    """Run the teachers on a normalised batch (B x 1 x H x W) and merge."""
    if len(teachers) == 0:
        raise InvalidInputError("need at least one teacher")
    images = torch.as_tensor(images, dtype=torch.float32)
    return merge_teacher_logits([t(images)[0] for t in teachers])


def merged_predictor(teachers):
    def predict(x):
        return merge_teacher_predictions(teachers, x).numpy()
    return predict


def pseudo_label_dataset(teachers, datasets):
    """Union images labelled with merged hard teacher predictions."""
    if len(teachers) == 0:
        raise InvalidInputError("need at least one teacher")
    images, _ = union_images(datasets)
    cache = teacher_outputs(teachers, images, level=0)
    merged = merge_teacher_logits(cache.logits).numpy().astype(np.uint8)
    sources = [s for d in datasets for s in d.sources]
    return Dataset(
        images=images, labels=merged[cache.index], kind="multi-organ",
        num_organs=len(teachers), seed=datasets[0].seed, sources=sources,
        notes={"provenance": "pseudo-label", "teachers": str(len(teachers))},
    )


def hard_pseudo_label_distill(teachers, datasets, model_config, config):
    """Train a (K+1)-class student with dice + CE on merged hard pseudo-labels."""
    if len(teachers) == 0:
        raise InvalidInputError("need at least one teacher")
    student_config = model_config.with_outputs(len(teachers) + 1)
    check_teachers(teachers, student_config, config.feature_level)
    pseudo = pseudo_label_dataset(teachers, datasets)
    x = prepare_images(pseudo.images)
    labels = torch.from_numpy(pseudo.labels.astype(np.int64))
    student = build_model(student_config, stream_seed(config.seed, STREAM_STUDENT_INIT))

    def step_loss(idx):
        logits, _ = student(x[idx])
        loss = seg_loss_dice_ce(logits, labels[idx])
        return loss, {"total": float(loss.detach())}

    return fit(student, step_loss, pseudo.foreground_flags(), config, STREAM_PSEUDO_BATCHES)
