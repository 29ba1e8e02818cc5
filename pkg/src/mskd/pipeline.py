"""Run directories and the end-to-end synthetic benchmark.

A run directory holds::

    config.txt       full configuration snapshot (dotted key=value)
    seeds.txt        seed of every RNG stream used
    run.txt          role, method label, teacher sources, feature tap choice
    losses.txt       one record per epoch, all loss components
    loss_curve.png   the same log as a figure
    model.mskd       checkpoint (weights + Adam state)
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .baselines import hard_pseudo_label_distill, merged_predictor
from .config import RunConfig
from .data import derive_binary_dataset, generate_synthetic_dataset, save_dataset
from .metrics import MetricsReport, OrganRow, average_row, evaluate_model, student_predictor
from .model import save_checkpoint
from .plotting import plot_loss_curves, plot_report
from .training import (STREAM_PSEUDO_BATCHES, STREAM_STUDENT_BATCHES, STREAM_STUDENT_INIT,
                       STREAM_TEACHER_BATCHES, STREAM_TEACHER_INIT, distill_student,
                       stream_seed, train_teacher)

log = logging.getLogger(__name__)

CHECKPOINT = "model.mskd"
FEATURE_TAP_NOTE = "decoder block output, before its final ReLU; channel softmax in the loss"

METHOD_INDIVIDUAL = "Individual"
METHOD_LW = "LW"
METHOD_MSKD = "MS-KD (LW+FW)"
METHOD_PSEUDO = "Pseudo-label"


def method_label(train_config):
    return METHOD_LW if train_config.lambda2 == 0 else METHOD_MSKD


def format_history(history):
    lines = []
    for h in history:
        parts = [f"epoch={h['epoch']}", f"lr={h['lr']!r}"]
        parts += [f"{k}={v!r}" for k, v in h.items() if k not in ("epoch", "lr")]
        lines.append(" ".join(parts))
    return "\n".join(lines) + ("\n" if lines else "")


def save_run(run_dir, result, run_config, meta):
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.txt").write_text(run_config.to_text(), encoding="utf-8")
    seed = run_config.train.seed
    streams = {
        "train.seed": seed,
        "teacher_init": [stream_seed(seed, STREAM_TEACHER_INIT * 100 + k)
                         for k in range(1, run_config.data.num_organs + 1)],
        "teacher_batches": [(seed, STREAM_TEACHER_BATCHES * 100 + k)
                            for k in range(1, run_config.data.num_organs + 1)],
        "student_init": stream_seed(seed, STREAM_STUDENT_INIT),
        "student_batches": (seed, STREAM_STUDENT_BATCHES),
        "pseudo_batches": (seed, STREAM_PSEUDO_BATCHES),
        "data.seed": run_config.data.seed,
    }
    (run_dir / "seeds.txt").write_text(
        "".join(f"{k}={v}\n" for k, v in streams.items()), encoding="utf-8")
    meta = {**meta, "feature_tap": FEATURE_TAP_NOTE}
    (run_dir / "run.txt").write_text(
        "".join(f"{k}={v}\n" for k, v in meta.items()), encoding="utf-8")
    (run_dir / "losses.txt").write_text(format_history(result.history), encoding="utf-8")
    if result.history:
        plot_loss_curves(result.history, run_dir / "loss_curve.png", title=meta.get("method"))
    save_checkpoint(result.model, result.optimizer, run_dir / CHECKPOINT, meta)


def write_report(report, out_dir, stem="report"):
    out_dir = Path(out_dir)
    report.write(out_dir, stem)
    plot_report(report, out_dir / f"{stem}.png")


def generate_data(data_config, out_dir, disjoint=False):
    """Write ``train``/``test`` multi-organ sets and ``organ_<k>`` binary sets."""
    out_dir = Path(out_dir)
    train = generate_synthetic_dataset(data_config, "train")
    test = generate_synthetic_dataset(data_config, "test")
    save_dataset(train, out_dir / "train")
    save_dataset(test, out_dir / "test")
    binaries = [derive_binary_dataset(train, k, disjoint=disjoint)
                for k in range(1, data_config.num_organs + 1)]
    for b in binaries:
        save_dataset(b, out_dir / f"organ_{b.organ}")
    return train, test, binaries


@dataclass
class BenchmarkResult:
    report: MetricsReport
    per_seed: list = field(default_factory=list)  # MetricsReport per seed


def benchmark_seed(config, seed, with_pseudo=False, disjoint=False):
    """Teachers, baseline, LW and LW+FW students for one seed, evaluated on test."""
    config = config.replace("data", seed=seed).replace("train", seed=seed)
    train = generate_synthetic_dataset(config.data, "train")
    test = generate_synthetic_dataset(config.data, "test")
    binaries = [derive_binary_dataset(train, k, disjoint=disjoint)
                for k in range(1, config.data.num_organs + 1)]
    teachers = [train_teacher(b, config.model, config.train).model for b in binaries]
    report = evaluate_model(merged_predictor(teachers), test, METHOD_INDIVIDUAL)
    lw_config = config.replace("train", lambda2=0.0).train
    for train_config in (lw_config, config.train):
        student = distill_student(teachers, binaries, config.model, train_config).model
        report.extend(evaluate_model(student_predictor(student), test,
                                     method_label(train_config)))
    if with_pseudo:
        student = hard_pseudo_label_distill(teachers, binaries, config.model, config.train).model
        report.extend(evaluate_model(student_predictor(student), test, METHOD_PSEUDO))
    log.info("seed %d\n%s", seed, report.to_text())
    return report


def run_benchmark(config=None, seeds=(0, 1, 2), with_pseudo=False, disjoint=False):
    """Per-seed reports plus a summary of per-organ medians over seeds."""
    config = config or RunConfig()
    per_seed = [benchmark_seed(config, s, with_pseudo, disjoint) for s in seeds]
    summary = MetricsReport()
    for method in per_seed[0].methods():
        rows = []
        for organ in per_seed[0].organs():
            seed_rows = [rep.row(method, organ) for rep in per_seed]
            hds = [x.hd for x in seed_rows if x.hd is not None]
            rows.append(OrganRow(
                method=method, organ=organ,
                dsc_percent=float(np.median([x.dsc_percent for x in seed_rows])),
                hd=float(np.median(hds)) if hds else None,
                n_images=sum(x.n_images for x in seed_rows),
                n_hd_excluded=sum(x.n_hd_excluded for x in seed_rows),
            ))
        summary.rows += rows + [average_row(method, rows)]
    return BenchmarkResult(report=summary, per_seed=per_seed)
