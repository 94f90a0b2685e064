"""Detection and classification metrics: IoU matching, P/R, pixel FROC, ROC/AUC, Sens/Spec."""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import linear_sum_assignment

from .data import BoundingBox, SoftMap

__all__ = [
    "ClassificationReport",
    "DetectionResult",
    "FrocPoint",
    "classification_report",
    "froc_curve",
    "iou",
    "mann_whitney_auc",
    "match_boxes",
    "precision_recall",
    "roc_auc",
    "write_report",
]


def iou(a: BoundingBox, b: BoundingBox) -> float:
    ix = max(0, min(a.x_max, b.x_max) - max(a.x_min, b.x_min))
    iy = max(0, min(a.y_max, b.y_max) - max(a.y_min, b.y_min))
    inter = ix * iy
    union = a.area + b.area - inter
    return inter / union


@dataclass
class DetectionResult:
    pred: list[BoundingBox]
    gt: list[BoundingBox]
    tp: int
    fp: int
    fn: int
    matching: list[tuple[int, int]] = field(default_factory=list)


def match_boxes(pred: list[BoundingBox], gt: list[BoundingBox], iou_thresh: float = 0.5) -> DetectionResult:
    """One-to-one matching of predictions to GT boxes; a pair counts when IoU > ``iou_thresh``.

    The matching maximizes the number of true positives and, among those,
    the summed IoU (assignment problem with a cardinality-first weight).
    """
    pred, gt = list(pred), list(gt)
    if not pred or not gt:
        return DetectionResult(pred, gt, 0, len(pred), len(gt))
    m = np.array([[iou(p, g) for g in gt] for p in pred])
    valid = m > iou_thresh
    big = float(min(len(pred), len(gt)) + 1)
    weight = np.where(valid, big + m, 0.0)
    rows, cols = linear_sum_assignment(weight, maximize=True)
    matching = sorted((int(r), int(c)) for r, c in zip(rows, cols) if valid[r, c])
    tp = len(matching)
    return DetectionResult(pred, gt, tp, len(pred) - tp, len(gt) - tp, matching)


def precision_recall(results: list[DetectionResult], average: str = "micro") -> tuple[float, float]:
    """Precision/recall over images; ``average="macro"`` averages per-image ratios instead."""

    def ratio(num, den, what):
        if den == 0:
            warnings.warn(f"{what} undefined (zero denominator); reporting 0", RuntimeWarning, stacklevel=3)
            return 0.0
        return num / den

    if average == "micro":
        tp = sum(r.tp for r in results)
        fp = sum(r.fp for r in results)
        fn = sum(r.fn for r in results)
        return ratio(tp, tp + fp, "precision"), ratio(tp, tp + fn, "recall")
    if average == "macro":
        ps = [r.tp / (r.tp + r.fp) for r in results if r.tp + r.fp]
        rs = [r.tp / (r.tp + r.fn) for r in results if r.tp + r.fn]
        return ratio(sum(ps), len(ps), "precision"), ratio(sum(rs), len(rs), "recall")
    raise ValueError(f"unknown average {average!r}")


@dataclass(frozen=True)
class FrocPoint:
    threshold: float
    avg_fp_pixels_per_image: float
    tp_pixel_fraction: float


def _gt_mask(boxes, shape) -> np.ndarray:
    m = np.zeros(shape, dtype=bool)
    for b in boxes:
        m[b.y_min:b.y_max, b.x_min:b.x_max] = True
    return m


def froc_curve(softmaps, gt_boxes, thresholds) -> list[FrocPoint]:
    """Pixel-level FROC points.

    At each threshold, predicted pixels inside any GT box are TP and those
    outside all boxes are FP. The TP fraction is averaged over images that
    have GT boxes; FP pixels are averaged over all images.
    """
    probs = [s.probs if isinstance(s, SoftMap) else np.asarray(s) for s in softmaps]
    if len(probs) != len(gt_boxes) or not probs:
        raise ValueError("need one list of GT boxes per softmap")
    gts = [_gt_mask(b, p.shape) for p, b in zip(probs, gt_boxes)]
    points = []
    for t in thresholds:
        fp_total, fractions = 0.0, []
        for p, g in zip(probs, gts):
            pred = p >= t
            fp_total += float(np.count_nonzero(pred & ~g))
            n_gt = np.count_nonzero(g)
            if n_gt:
                fractions.append(np.count_nonzero(pred & g) / n_gt)
        frac = float(np.mean(fractions)) if fractions else 0.0
        points.append(FrocPoint(float(t), fp_total / len(probs), frac))
    return points


def _check_binary(labels) -> np.ndarray:
    y = np.asarray(labels).astype(int)
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be 0/1")
    if y.min() == y.max():
        raise ValueError("ROC analysis needs both classes")
    return y


def roc_auc(probabilities, labels) -> tuple[list[tuple[float, float, float]], float]:
    """ROC points ``(threshold, fpr, tpr)`` from a sweep over unique scores and trapezoidal AUC.

    The first point uses threshold ``+inf`` (nothing positive); ties are
    resolved by moving through tied scores at once, which makes the
    trapezoidal area equal to the Mann-Whitney statistic with ties counted 1/2.
    """
    s = np.asarray(probabilities, dtype=np.float64)
    y = _check_binary(labels)
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    distinct = np.flatnonzero(np.diff(s)) if len(s) > 1 else np.array([], dtype=int)
    ends = np.concatenate([distinct, [len(s) - 1]])
    tps = np.cumsum(y)[ends]
    fps = (ends + 1) - tps
    n_pos, n_neg = int(y.sum()), int(len(y) - y.sum())
    tpr = np.concatenate([[0.0], tps / n_pos])
    fpr = np.concatenate([[0.0], fps / n_neg])
    thr = np.concatenate([[np.inf], s[ends]])
    auc = float(np.sum((fpr[1:] - fpr[:-1]) * (tpr[1:] + tpr[:-1]) / 2.0))
    points = [(float(t), float(f), float(r)) for t, f, r in zip(thr, fpr, tpr)]
    return points, auc


def mann_whitney_auc(probabilities, labels) -> float:
    """Fraction of (positive, negative) pairs ranked correctly, ties counted 1/2."""
    s = np.asarray(probabilities, dtype=np.float64)
    y = _check_binary(labels)
    pos, neg = s[y == 1], s[y == 0]
    diff = pos[:, None] - neg[None, :]
    return float(((diff > 0).sum() + 0.5 * (diff == 0).sum()) / diff.size)


@dataclass
class FoldMetrics:
    sensitivity: float
    specificity: float
    balanced_accuracy: float
    auc: float
    roc: list[tuple[float, float, float]]


@dataclass
class ClassificationReport:
    folds: list[FoldMetrics]
    mean: dict[str, float]
    std: dict[str, float]
    decision_threshold: float = 0.5

    def to_json(self) -> dict:
        return {
            "decision_threshold": self.decision_threshold,
            "folds": [asdict(f) for f in self.folds],
            "mean": self.mean,
            "std": self.std,
        }


METRIC_NAMES = ("sensitivity", "specificity", "balanced_accuracy", "auc")


def classification_report(fold_predictions, decision_threshold: float = 0.5) -> ClassificationReport:
    """Per-fold Sens/Spec/B.Acc/AUC and their mean and sample standard deviation.

    ``fold_predictions`` is a sequence of ``(probabilities, labels)`` pairs.
    A single fold reports a standard deviation of 0.
    """
    folds = []
    for probs, labels in fold_predictions:
        p = np.asarray(probs, dtype=np.float64)
        y = _check_binary(labels)
        pred = p >= decision_threshold
        sens = float(np.mean(pred[y == 1]))
        spec = float(np.mean(~pred[y == 0]))
        roc, auc = roc_auc(p, y)
        folds.append(FoldMetrics(sens, spec, (sens + spec) / 2.0, auc, roc))
    if not folds:
        raise ValueError("no folds")
    mean, std = {}, {}
    for name in METRIC_NAMES:
        v = np.array([getattr(f, name) for f in folds])
        mean[name] = float(v.mean())
        std[name] = float(v.std(ddof=1)) if len(v) > 1 else 0.0
    return ClassificationReport(folds, mean, std, decision_threshold)


def write_report(out_dir: str | Path, report: dict, roc_points=None, froc_points=None) -> dict[str, Path]:
    """Write ``report.json`` plus one-row-per-point ``roc.csv`` / ``froc.csv`` files."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"json": out / "report.json"}
    paths["json"].write_text(json.dumps(report, indent=2, sort_keys=True))
    if roc_points is not None:
        paths["roc"] = out / "roc.csv"
        with paths["roc"].open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["fold", "threshold", "fpr", "tpr"])
            for fold, pts in roc_points:
                for t, f, r in pts:
                    w.writerow([fold, t, f, r])
    if froc_points is not None:
        paths["froc"] = out / "froc.csv"
        with paths["froc"].open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["fold", "threshold", "avg_fp_pixels_per_image", "tp_pixel_fraction"])
            for fold, pts in froc_points:
                for p in pts:
                    w.writerow([fold, p.threshold, p.avg_fp_pixels_per_image, p.tp_pixel_fraction])
    return paths
