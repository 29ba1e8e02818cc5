"""Dice, Hausdorff distance, per-organ report tables and uncertainty maps."""

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image
from scipy import ndimage

from .errors import ConfigError, ShapeError
from .training import prepare_images

CSV_HEADER = ["method", "organ", "dsc_percent", "hd", "n_images", "n_hd_excluded"]
AVG = "Avg"


def _pair(pred, gt):
    pred = np.asarray(pred).astype(bool)
    gt = np.asarray(gt).astype(bool)
    if pred.shape != gt.shape:
        raise ShapeError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    return pred, gt


def dsc(pred, gt):
    """2|A n B| / (|A| + |B|); two empty masks count as a perfect match."""
    pred, gt = _pair(pred, gt)
    total = int(pred.sum()) + int(gt.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((pred & gt).sum()) / total


def _directed(a, b, spacing):
    # distance from every pixel to the nearest foreground pixel of b
    dist = ndimage.distance_transform_edt(~b, sampling=spacing)
    return float(dist[a].max())


def hausdorff(pred, gt, spacing=None):
    """Symmetric (100th percentile) Hausdorff distance between foreground sets.

    Returns None when either mask is empty.
    """
    pred, gt = _pair(pred, gt)
    if not pred.any() or not gt.any():
        return None
    spacing = tuple(spacing) if spacing is not None else (1.0,) * pred.ndim
    return max(_directed(pred, gt, spacing), _directed(gt, pred, spacing))


@dataclass
class OrganRow:
    method: str
    organ: str
    dsc_percent: float
    hd: float  # None when undefined for every image
    n_images: int
    n_hd_excluded: int


@dataclass
class MetricsReport:
    rows: list = field(default_factory=list)
    hd_unit: str = "px"

    def methods(self):
        seen = []
        for r in self.rows:
            if r.method not in seen:
                seen.append(r.method)
        return seen

    def organs(self):
        seen = []
        for r in self.rows:
            if r.organ != AVG and r.organ not in seen:
                seen.append(r.organ)
        return seen

    def row(self, method, organ):
        for r in self.rows:
            if r.method == method and r.organ == organ:
                return r
        raise KeyError((method, organ))

    def average(self, method):
        return self.row(method, AVG)

    def extend(self, other):
        self.rows.extend(other.rows)
        return self

    def to_csv(self):
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        for r in self.rows:
            writer.writerow([
                r.method, r.organ, f"{r.dsc_percent:.4f}",
                "-" if r.hd is None else f"{r.hd:.4f}", r.n_images, r.n_hd_excluded,
            ])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text):
        reader = csv.DictReader(io.StringIO(text))
        if reader.fieldnames != CSV_HEADER:
            raise ConfigError(f"unexpected report header {reader.fieldnames}")
        rows = [
            OrganRow(
                method=d["method"], organ=d["organ"], dsc_percent=float(d["dsc_percent"]),
                hd=None if d["hd"] == "-" else float(d["hd"]),
                n_images=int(d["n_images"]), n_hd_excluded=int(d["n_hd_excluded"]),
            )
            for d in reader
        ]
        return cls(rows=rows)

    def to_text(self):
        """Aligned table: method, DSC per organ + Avg, HD per organ + Avg."""
        organs = self.organs() + [AVG]
        head = (["Method"] + [f"DSC {o}" for o in organs]
                + [f"HD({self.hd_unit}) {o}" for o in organs])
        lines = []
        for m in self.methods():
            cells = [m]
            cells += [f"{self.row(m, o).dsc_percent:.2f}" for o in organs]
            cells += ["-" if self.row(m, o).hd is None else f"{self.row(m, o).hd:.2f}"
                      for o in organs]
            lines.append(cells)
        widths = [max(len(str(c)) for c in col) for col in zip(head, *lines)]
        def fmt(cells):
            first = str(cells[0]).ljust(widths[0])
            return "  ".join([first] + [str(c).rjust(w) for c, w in zip(cells[1:], widths[1:])])

        out = [fmt(head), "  ".join("-" * w for w in widths)] + [fmt(c) for c in lines]
        return "\n".join(out) + "\n"

    def write(self, directory, stem="report"):
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        (directory / f"{stem}.csv").write_text(self.to_csv(), encoding="utf-8")
        (directory / f"{stem}.txt").write_text(self.to_text(), encoding="utf-8")


def organ_rows(method, predictions, labels, num_organs, spacing=None):
    """Per-organ rows plus the ``Avg`` row for one method.

    ``predictions`` and ``labels`` are N x H x W integer maps.
    """
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if predictions.shape != labels.shape:
        raise ShapeError(f"predictions {predictions.shape} vs labels {labels.shape}")
    rows = []
    for k in range(1, num_organs + 1):
        dscs, hds = [], []
        for p, g in zip(predictions, labels):
            dscs.append(dsc(p == k, g == k))
            h = hausdorff(p == k, g == k, spacing)
            if h is not None:
                hds.append(h)
        rows.append(OrganRow(
            method=method, organ=str(k), dsc_percent=100.0 * float(np.mean(dscs)),
            hd=float(np.mean(hds)) if hds else None,
            n_images=len(labels), n_hd_excluded=len(labels) - len(hds),
        ))
    rows.append(average_row(method, rows))
    return rows


def average_row(method, rows):
    """Arithmetic mean of the organ columns; HD averages the defined entries."""
    defined = [r.hd for r in rows if r.hd is not None]
    return OrganRow(
        method=method, organ=AVG,
        dsc_percent=float(np.mean([r.dsc_percent for r in rows])),
        hd=float(np.mean(defined)) if defined else None,
        n_images=rows[0].n_images if rows else 0,
        n_hd_excluded=sum(r.n_hd_excluded for r in rows),
    )


@torch.no_grad()
def predict_labels(predictor, images, chunk=16):
    """Apply ``predictor`` (normalised N x 1 x H x W tensor -> N x H x W labels) in chunks."""
    outs = [np.asarray(predictor(images[i:i + chunk])) for i in range(0, len(images), chunk)]
    return np.concatenate(outs) if outs else np.zeros((0,) + tuple(images.shape[-2:]), np.int64)


def student_predictor(model):
    def predict(x):
        logits, _ = model(x)
        return logits.argmax(dim=1).numpy()
    return predict


def evaluate_model(predictor, test_set, method, num_outputs=None, spacing=None):
    """Evaluate a predictor on a fully labelled multi-organ test set."""
    if test_set.is_binary:
        raise ConfigError("evaluation needs a multi-organ test set")
    if num_outputs is not None and num_outputs != test_set.num_organs + 1:
        raise ConfigError(
            f"model emits {num_outputs} classes but the test set has "
            f"{test_set.num_organs} organs"
        )
    preds = predict_labels(predictor, prepare_images(test_set.images))
    return MetricsReport(rows=organ_rows(method, preds, test_set.labels,
                                         test_set.num_organs, spacing))


def uncertainty_map(teacher_probs):
    """1 - max class probability per pixel."""
    probs = np.asarray(teacher_probs, dtype=np.float64)
    if probs.ndim != 3:
        raise ShapeError(f"expected C x H x W probabilities, got shape {probs.shape}")
    return 1.0 - probs.max(axis=0)


def uncertainty_image(umap, num_classes=2):
    """8-bit grayscale, darker = more uncertain; the maximum 1 - 1/C maps to black."""
    scale = np.clip(1.0 - np.asarray(umap) / (1.0 - 1.0 / num_classes), 0.0, 1.0)
    return Image.fromarray(np.round(255 * scale).astype(np.uint8), mode="L")
