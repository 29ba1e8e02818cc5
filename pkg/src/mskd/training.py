"""Teacher training, student distillation and the shared optimisation loop."""

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from .data import clip_normalize_intensity, sample_batch
from .errors import ConfigError, InvalidInputError, TrainingError
from .losses import LossWeights, region_loss, seg_loss_dice_ce, teacher_signals
from .masks import binarize_prediction
from .model import apply_update, build_model, gradients, make_optimizer, set_lr

log = logging.getLogger(__name__)

# RNG stream ids; every random draw in a run comes from one of these.
STREAM_TEACHER_INIT = 1
STREAM_TEACHER_BATCHES = 2
STREAM_STUDENT_INIT = 3
STREAM_STUDENT_BATCHES = 4
STREAM_PSEUDO_BATCHES = 5


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 4
    iters_per_epoch: int = 250
    max_epochs: int = 1000
    initial_lr: float = 3e-4
    lr_decay_factor: float = 0.8
    lr_decay_threshold: float = 1e-3
    fg_fraction: float = 0.33
    lambda1: float = 1.0
    lambda2: float = 10.0
    feature_level: int = 1
    seed: int = 0
    mixed_supervision: bool = False

    def __post_init__(self):
        if self.batch_size < 1 or self.iters_per_epoch < 1 or self.max_epochs < 0:
            raise ConfigError("batch_size and iters_per_epoch must be >= 1, max_epochs >= 0")
        if not self.initial_lr > 0:
            raise ConfigError(f"initial_lr must be > 0, got {self.initial_lr}")
        if not 0 < self.lr_decay_factor < 1:
            raise ConfigError(f"lr_decay_factor must be in (0, 1), got {self.lr_decay_factor}")
        if not 0 <= self.fg_fraction <= 1:
            raise ConfigError(f"fg_fraction must be in [0, 1], got {self.fg_fraction}")
        if self.feature_level < 0:
            raise ConfigError("feature_level must be >= 0")
        try:
            LossWeights(self.lambda1, self.lambda2)
        except InvalidInputError as exc:
            raise ConfigError(str(exc)) from exc

    @property
    def weights(self):
        return LossWeights(self.lambda1, self.lambda2)


@dataclass
class TrainResult:
    model: torch.nn.Module
    optimizer: torch.optim.Optimizer
    history: list = field(default_factory=list)  # one dict per epoch


def stream_seed(seed, stream):
    return int(np.random.SeedSequence([seed, stream]).generate_state(1)[0])


def stream_rng(seed, stream):
    return np.random.default_rng([seed, stream])


def lr_schedule_step(prev_epoch_loss, curr_epoch_loss, lr, factor=0.8, threshold=1e-3):
    """Decay ``lr`` by ``factor`` when the epoch loss fell by less than ``threshold``.

    ``prev_epoch_loss`` is None after the first epoch, which never decays.
    """
    if prev_epoch_loss is None:
        return lr
    if prev_epoch_loss - curr_epoch_loss < threshold:
        return lr * factor
    return lr


def prepare_images(images):
    """Raw intensities (N x H x W) -> normalised float tensor N x 1 x H x W."""
    return torch.from_numpy(clip_normalize_intensity(images)).unsqueeze(1)


def fit(model, step_loss, flags, config, stream, callback=None):
    """Mini-batch Adam with the plateau learning-rate rule.

    ``step_loss(indices)`` returns ``(loss_tensor, record)`` where ``record``
    is a dict of floats averaged into the epoch log. ``callback(entry, model)``
    runs after every epoch.
    """
    rng = stream_rng(config.seed, stream)
    lr = config.initial_lr
    optimizer = make_optimizer(model, lr)
    history, prev = [], None
    for epoch in range(1, config.max_epochs + 1):
        sums = {}
        for it in range(config.iters_per_epoch):
            idx = sample_batch(flags, config.batch_size, config.fg_fraction, rng)
            loss, record = step_loss(idx)
            if not torch.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}, iteration {it + 1}")
            apply_update(model, optimizer, gradients(model, loss))
            for key, value in record.items():
                sums[key] = sums.get(key, 0.0) + value
        means = {k: v / config.iters_per_epoch for k, v in sums.items()}
        entry = {"epoch": epoch, "lr": lr, **means}
        history.append(entry)
        log.info("epoch %d lr %.3g loss %.5f", epoch, lr, means["total"])
        if callback is not None:
            callback(entry, model)
        lr = lr_schedule_step(prev, means["total"], lr, config.lr_decay_factor,
                              config.lr_decay_threshold)
        set_lr(optimizer, lr)
        prev = means["total"]
    return TrainResult(model=model, optimizer=optimizer, history=history)


def train_teacher(dataset, model_config, config, callback=None):
    """Fit a binary teacher on one single-organ dataset with dice + CE."""
    if not dataset.is_binary:
        raise InvalidInputError(f"teachers train on binary datasets, got kind {dataset.kind}")
    if model_config.out_channels != 2:
        raise ConfigError("a teacher must emit exactly 2 classes")
    organ = dataset.organ
    model = build_model(model_config, stream_seed(config.seed, STREAM_TEACHER_INIT * 100 + organ))
    images = prepare_images(dataset.images)
    labels = torch.from_numpy(dataset.labels.astype(np.int64))

    def step_loss(idx):
        logits, _ = model(images[idx])
        loss = seg_loss_dice_ce(logits, labels[idx])
        return loss, {"total": float(loss.detach())}

    stream = STREAM_TEACHER_BATCHES * 100 + organ
    return fit(model, step_loss, dataset.foreground_flags(), config, stream, callback)


@dataclass
class TeacherCache:
    """Frozen-teacher outputs per distinct union image."""
    logits: list  # K tensors, U x 2 x H x W
    features: list  # K tensors, U x C x h x w
    index: np.ndarray  # union item -> distinct image row


def union_images(datasets):
    images = np.concatenate([d.images for d in datasets])
    origin = np.concatenate([np.full(len(d), i) for i, d in enumerate(datasets)])
    return images, origin


@torch.no_grad()
def teacher_outputs(teachers, images, level, chunk=16):
    """Run every frozen teacher once over the distinct images."""
    flat = images.reshape(len(images), -1)
    distinct, index = np.unique(flat, axis=0, return_inverse=True)
    x = prepare_images(distinct.reshape((-1,) + images.shape[1:]))
    logits, features = [], []
    for teacher in teachers:
        teacher.eval()
        outs = [teacher(x[i:i + chunk]) for i in range(0, len(x), chunk)]
        logits.append(torch.cat([o[0] for o in outs]))
        features.append(torch.cat([o[1][level] for o in outs]))
    return TeacherCache(logits=logits, features=features, index=np.asarray(index).ravel())


def check_teachers(teachers, model_config, level):
    if len(teachers) == 0:
        raise InvalidInputError("need at least one teacher")
    for k, t in enumerate(teachers, start=1):
        if t.config.out_channels != 2:
            raise ConfigError(f"teacher {k} emits {t.config.out_channels} classes, expected 2")
        if not t.config.compatible_with(model_config):
            raise ConfigError(f"teacher {k} architecture {t.config} does not match "
                              f"student {model_config}")
    if not 0 <= level < model_config.depth:
        raise ConfigError(f"feature level {level} outside 0..{model_config.depth - 1}")


def distill_student(teachers, datasets, model_config, config, callback=None):
    """Distil K frozen binary teachers into one (K+1)-class student.

    ``datasets`` are the K binary datasets (ordered by organ); their images
    form the union the student trains on. Ground-truth labels are never read
    unless ``config.mixed_supervision`` is set.
    """
    level = config.feature_level
    num_organs = len(teachers)
    if num_organs == 0:
        raise InvalidInputError("need at least one teacher")
    student_config = model_config.with_outputs(num_organs + 1)
    check_teachers(teachers, student_config, level)
    for t in teachers:
        t.requires_grad_(False)
    images, origin = union_images(datasets)
    cache = teacher_outputs(teachers, images, level)
    # fg sampling uses each item's originating teacher, keeping the run label-blind
    flags = np.array([
        bool(binarize_prediction(cache.logits[o][cache.index[i]]).any())
        for i, o in enumerate(origin)
    ])
    signals = teacher_signals(cache.logits, cache.features, level)
    x = prepare_images(images)
    weights = config.weights
    partial_labels = None
    if config.mixed_supervision:
        partial_labels = torch.from_numpy(
            np.concatenate([d.labels for d in datasets]).astype(np.int64))
        organ_of_item = torch.from_numpy(origin.astype(np.int64) + 1)

    student = build_model(student_config, stream_seed(config.seed, STREAM_STUDENT_INIT))

    def step_loss(idx):
        s_logits, s_taps = student(x[idx])
        batch_signals = signals.take(torch.from_numpy(cache.index[idx]))
        parts = region_loss(batch_signals, s_logits, s_taps[level], weights)
        loss = parts.total
        record = {"total": 0.0, "background_logit": float(parts.background_logit.detach())}
        for k in range(num_organs):
            record[f"logit_{k + 1}"] = float(parts.per_organ_logit[k].detach())
            record[f"feature_{k + 1}"] = float(parts.per_organ_feature[k].detach())
        if partial_labels is not None:
            # organ pixels of the annotated organ only; unlabeled pixels are ambiguous
            lab = partial_labels[idx]
            target = torch.where(lab > 0, organ_of_item[idx].view(-1, 1, 1), -100)
            if (target >= 0).any():
                sup = torch.nn.functional.cross_entropy(s_logits, target, ignore_index=-100)
                loss = loss + sup
                record["supervised"] = float(sup.detach())
        record["total"] = float(loss.detach())
        return loss, record

    return fit(student, step_loss, flags, config, STREAM_STUDENT_BATCHES, callback)
