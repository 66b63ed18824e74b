"""Segmentation quality metrics.

Confusion-matrix statistics (per-class accuracy, pixel accuracy, mean IoU)
plus the boundary-matching BF measure: per class, a predicted boundary
point counts as correct if some ground-truth boundary point lies within a
distance tolerance, and vice versa for recall. The tolerance is a fixed
fraction of the image diagonal, calibrated so the smallest diagonal in the
dataset gets exactly ``reference_tolerance_px`` pixels.

Boundary definition: a pixel of class c is a boundary point if it lies on
the image border or has a 4-neighbor with a different non-VOID label.
Distances are exact Euclidean, compared through integer squared distances.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .labelmap import VOID, is_fully_labeled


@dataclass(frozen=True)
class BFConfig:
    """Boundary-match tolerance rule: theta = reference px / smallest
    diagonal, so tolerance(diag) = reference px exactly at the smallest
    image."""

    smallest_diagonal: float
    reference_tolerance_px: float = 5.0

    @property
    def theta(self) -> float:
        return self.reference_tolerance_px / self.smallest_diagonal

    def tolerance(self, image_diag: float) -> float:
        return self.reference_tolerance_px * (image_diag / self.smallest_diagonal)


@dataclass
class EvalReport:
    per_class_acc: list
    pixel_acc: float
    mean_iou: float
    per_class_bf: list | None = None
    mean_bf: float | None = None
    bf_std_across_images: float | None = None
    n_images: int = 0
    n_bf_images: int = 0
    extras: dict = field(default_factory=dict)


def confusion(pred: np.ndarray, gt: np.ndarray, num_classes: int) -> np.ndarray:
    """counts[g][p] over non-void ground-truth pixels; ``pred`` must not
    contain VOID."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    if np.any(pred == VOID) or np.any(pred >= num_classes):
        raise ValueError("predictions must be class indices, never VOID")
    valid = gt != VOID
    idx = gt[valid].astype(np.int64) * num_classes + pred[valid].astype(np.int64)
    counts = np.bincount(idx, minlength=num_classes * num_classes)
    return counts.reshape(num_classes, num_classes)


def summary_metrics(cm: np.ndarray) -> tuple[list, float, float]:
    """(per_class_acc, pixel_acc, mean_iou); classes absent from both gt
    and prediction are excluded from the means."""
    cm = np.asarray(cm, dtype=np.float64)
    total = cm.sum()
    if total == 0:
        raise ValueError("empty confusion matrix")
    row = cm.sum(axis=1)
    col = cm.sum(axis=0)
    diag = np.diag(cm)
    per_class = [float(diag[c] / row[c]) if row[c] > 0 else None
                 for c in range(cm.shape[0])]
    pixel_acc = float(diag.sum() / total)
    denom = row + col - diag
    ious = [float(diag[c] / denom[c]) for c in range(cm.shape[0]) if denom[c] > 0]
    mean_iou = float(np.mean(ious)) if ious else 0.0
    return per_class, pixel_acc, mean_iou


def mean_class_accuracy(per_class: list) -> float:
    vals = [v for v in per_class if v is not None]
    return float(np.mean(vals)) if vals else 0.0


def boundary_points(labels: np.ndarray, cls: int) -> np.ndarray:
    """(K, 2) integer coordinates of class-``cls`` boundary pixels. VOID
    neighbors never create boundary points; the image border always does."""
    labels = np.asarray(labels)
    mine = labels == cls
    if not np.any(mine):
        return np.empty((0, 2), dtype=np.int64)
    differs = np.zeros_like(mine)
    nb = labels[:-1, :]
    differs[1:, :] |= (nb != labels[1:, :]) & (nb != VOID)
    nb = labels[1:, :]
    differs[:-1, :] |= (nb != labels[:-1, :]) & (nb != VOID)
    nb = labels[:, :-1]
    differs[:, 1:] |= (nb != labels[:, 1:]) & (nb != VOID)
    nb = labels[:, 1:]
    differs[:, :-1] |= (nb != labels[:, :-1]) & (nb != VOID)
    border = np.zeros_like(mine)
    border[0, :] = border[-1, :] = True
    border[:, 0] = border[:, -1] = True
    return np.argwhere(mine & (differs | border)).astype(np.int64)


def _match_fraction(points: np.ndarray, targets: np.ndarray, tol: float) -> float:
    """Fraction of ``points`` within ``tol`` of some target; empty point
    sets count as fraction 0."""
    if len(points) == 0:
        return 0.0
    if len(targets) == 0:
        return 0.0
    d2 = ((points[:, None, :] - targets[None, :, :]) ** 2).sum(axis=2)
    return float(np.mean(d2.min(axis=1) <= tol * tol))


def bf_score(pred: np.ndarray, gt: np.ndarray, num_classes: int,
             cfg: BFConfig, image_diag: float) -> dict:
    """Per-class (precision, recall, F1); classes with both boundary sets
    empty are skipped (absent from the dict)."""
    tol = cfg.tolerance(image_diag)
    out = {}
    for c in range(num_classes):
        pb = boundary_points(pred, c)
        gb = boundary_points(gt, c)
        if len(pb) == 0 and len(gb) == 0:
            continue
        precision = _match_fraction(pb, gb, tol)
        recall = _match_fraction(gb, pb, tol)
        f1 = 0.0 if precision + recall == 0 else 2 * precision * recall / (precision + recall)
        out[c] = (precision, recall, f1)
    return out


def image_diagonal(shape) -> float:
    h, w = shape[-2:]
    return math.hypot(h, w)


def upsample_labels(labels: np.ndarray, factor: int) -> np.ndarray:
    return np.repeat(np.repeat(labels, factor, axis=-2), factor, axis=-1)


def predict_labels(probs: np.ndarray, upsample: int = 1) -> np.ndarray:
    """Argmax over channels (ties to the smallest class index), optionally
    nearest-neighbor upsampled to label resolution."""
    probs = np.asarray(probs)
    lab = np.argmax(probs, axis=-3).astype(np.int64)
    if upsample > 1:
        lab = upsample_labels(lab, upsample)
    return lab


def evaluate_predictions(preds: list, gts: list, num_classes: int,
                         cfg: BFConfig | None) -> EvalReport:
    """Aggregate metrics over (prediction, ground truth) label-map pairs.

    The confusion matrix accumulates over all images; BF runs only on fully
    labeled images (no VOID anywhere) and reports the across-image mean and
    population standard deviation of the per-image class-averaged F1.
    """
    if not preds:
        raise ValueError("empty evaluation split")
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    for p, g in zip(preds, gts):
        cm += confusion(p, g, num_classes)
    per_class, pixel_acc, mean_iou = summary_metrics(cm)

    report = EvalReport(per_class, pixel_acc, mean_iou, n_images=len(preds))
    if cfg is not None:
        per_image = []
        class_scores = [[] for _ in range(num_classes)]
        for p, g in zip(preds, gts):
            if not is_fully_labeled(g):
                continue
            scores = bf_score(p, g, num_classes, cfg, image_diagonal(g.shape))
            if not scores:
                continue
            per_image.append(float(np.mean([f1 for _, _, f1 in scores.values()])))
            for c, (_, _, f1) in scores.items():
                class_scores[c].append(f1)
        if per_image:
            report.per_class_bf = [
                float(np.mean(s)) if s else None for s in class_scores]
            report.mean_bf = float(np.mean(per_image))
            report.bf_std_across_images = float(np.std(per_image))
            report.n_bf_images = len(per_image)
    return report


def evaluate_split(seg_spec, seg_params, samples, num_classes: int,
                   cfg: BFConfig | None, stride: int,
                   preprocess=None) -> EvalReport:
    """Forward every sample through the segmenter, argmax + nearest
    upsample to label resolution, and aggregate metrics."""
    from .networks import forward
    from .tensor import Tensor

    preds, gts = [], []
    for sample in samples:
        img = sample.image
        if preprocess is not None:
            img = preprocess(img)
        probs = forward(seg_spec, seg_params, Tensor(img[None]))
        preds.append(predict_labels(probs.data[0], upsample=stride))
        gts.append(sample.labels)
    return evaluate_predictions(preds, gts, num_classes, cfg)


def report_to_csv(report: EvalReport, num_classes: int) -> str:
    """One row per class plus an aggregate row."""
    lines = ["row,class,accuracy,bf_f1"]
    for c in range(num_classes):
        acc = report.per_class_acc[c]
        bf = None
        if report.per_class_bf is not None:
            bf = report.per_class_bf[c]
        lines.append(f"class,{c},{_fmt(acc)},{_fmt(bf)}")
    lines.append(f"aggregate,pixel_acc,{_fmt(report.pixel_acc)},")
    lines.append(f"aggregate,mean_class_acc,{_fmt(mean_class_accuracy(report.per_class_acc))},")
    lines.append(f"aggregate,mean_iou,{_fmt(report.mean_iou)},")
    lines.append(f"aggregate,mean_bf,{_fmt(report.mean_bf)},")
    lines.append(f"aggregate,bf_std,{_fmt(report.bf_std_across_images)},")
    return "\n".join(lines) + "\n"


def report_summary(report: EvalReport) -> str:
    parts = [
        f"images={report.n_images}",
        f"pixel_acc={_fmt(report.pixel_acc)}",
        f"mean_class_acc={_fmt(mean_class_accuracy(report.per_class_acc))}",
        f"mean_iou={_fmt(report.mean_iou)}",
        f"mean_bf={_fmt(report.mean_bf)}",
        f"bf_std={_fmt(report.bf_std_across_images)}",
        f"bf_images={report.n_bf_images}",
    ]
    return " ".join(parts)


def _fmt(v) -> str:
    return "na" if v is None else f"{v:.6f}"
