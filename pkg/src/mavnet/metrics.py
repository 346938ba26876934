"""Per-class confusion counts, IoU / FN / FP rates and centroid distance.

Undefined ratios (zero denominators) are NaN in memory and ``null`` in the
serialized report, never 0.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import NamedTuple, Optional, Sequence

import numpy as np


@dataclass
class ConfusionCounts:
    """One-vs-rest TP/FP/TN/FN arrays with one entry per class."""
    tp: np.ndarray
    fp: np.ndarray
    tn: np.ndarray
    fn: np.ndarray

    @classmethod
    def zeros(cls, num_classes: int) -> "ConfusionCounts":
        z = lambda: np.zeros(num_classes, dtype=np.int64)  # noqa: E731
        return cls(z(), z(), z(), z())

    @property
    def num_classes(self) -> int:
        return len(self.tp)

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp,
                               self.tn + other.tn, self.fn + other.fn)


def confusion_counts(pred, gt, num_classes: int, ignore_index=None) -> ConfusionCounts:
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction shape {pred.shape} != ground truth shape {gt.shape}")
    keep = np.ones(gt.shape, bool) if ignore_index is None else gt != ignore_index
    p, g = pred[keep].astype(np.int64), gt[keep].astype(np.int64)
    for name, arr in (("prediction", p), ("ground truth", g)):
        if arr.size and (arr.min() < 0 or arr.max() >= num_classes):
            raise ValueError(f"{name} holds class ids outside [0, {num_classes})")
    cm = np.bincount(g * num_classes + p, minlength=num_classes ** 2).reshape(num_classes, num_classes)
    tp = np.diag(cm).copy()
    fp = cm.sum(axis=0) - tp
    fn = cm.sum(axis=1) - tp
    tn = g.size - tp - fp - fn
    return ConfusionCounts(tp, fp, tn, fn)


def _ratio(num, den):
    num = np.asarray(num, dtype=np.float64)
    den = np.asarray(den, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(den > 0, num / np.where(den > 0, den, 1), np.nan)


def rates(counts: ConfusionCounts):
    """(IoU, FN rate, FP rate) arrays per class."""
    iou = _ratio(counts.tp, counts.tp + counts.fp + counts.fn)
    fn_rate = _ratio(counts.fn, counts.fn + counts.tp)
    fp_rate = _ratio(counts.fp, counts.fp + counts.tn)
    return iou, fn_rate, fp_rate


class CentroidDistance(NamedTuple):
    distance: float
    failure: bool  # target present in ground truth but not predicted


def centroid(mask: np.ndarray) -> Optional[tuple[float, float]]:
    rows, cols = np.nonzero(mask)
    if rows.size == 0:
        return None
    return float(rows.mean()), float(cols.mean())


def centroid_distance(pred, gt, target_class: int) -> CentroidDistance:
    """L2 distance in pixels between predicted and true target centroids ((row, col), zero-based)."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction shape {pred.shape} != ground truth shape {gt.shape}")
    cp = centroid(pred == target_class)
    cg = centroid(gt == target_class)
    if cp is None or cg is None:
        return CentroidDistance(math.nan, cg is not None and cp is None)
    return CentroidDistance(math.hypot(cp[0] - cg[0], cp[1] - cg[1]), False)


def _clean(v):
    v = float(v)
    return None if math.isnan(v) else v


@dataclass
class MetricsReport:
    class_names: Sequence[str]
    counts: ConfusionCounts
    background: int = 0
    centroid_target: Optional[int] = None
    centroid_distances: list = field(default_factory=list)
    centroid_failures: int = 0

    @property
    def iou(self):
        return rates(self.counts)[0]

    @property
    def fn_rate(self):
        return rates(self.counts)[1]

    @property
    def fp_rate(self):
        return rates(self.counts)[2]

    @property
    def mean_iou(self) -> float:
        """Mean IoU over the classes other than background; NaN entries are skipped."""
        fg = [v for k, v in enumerate(self.iou) if k != self.background and not math.isnan(v)]
        return float(np.mean(fg)) if fg else math.nan

    def add_centroid(self, result: CentroidDistance):
        if result.failure:
            self.centroid_failures += 1
        elif not math.isnan(result.distance):
            self.centroid_distances.append(result.distance)

    def centroid_stats(self) -> tuple[float, float]:
        if not self.centroid_distances:
            return math.nan, math.nan
        d = np.asarray(self.centroid_distances)
        return float(d.mean()), float(d.std())

    def to_dict(self) -> dict:
        iou, fnr, fpr = rates(self.counts)
        classes = []
        for k, name in enumerate(self.class_names):
            classes.append({
                "id": k, "name": name,
                "tp": int(self.counts.tp[k]), "fp": int(self.counts.fp[k]),
                "tn": int(self.counts.tn[k]), "fn": int(self.counts.fn[k]),
                "iou": _clean(iou[k]), "fn_rate": _clean(fnr[k]), "fp_rate": _clean(fpr[k]),
            })
        doc = {"classes": classes, "mean_iou": _clean(self.mean_iou), "background": self.background}
        if self.centroid_target is not None:
            mean, std = self.centroid_stats()
            doc["centroid"] = {
                "target_class": self.centroid_target,
                "mean": _clean(mean), "std": _clean(std),
                "frames": len(self.centroid_distances),
                "failures": self.centroid_failures,
            }
        return doc

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_text(self) -> str:
        fmt = lambda v: "   n/a" if v is None else f"{100 * v:6.2f}"  # noqa: E731
        doc = self.to_dict()
        lines = [f"{'class':<14}{'IoU%':>8}{'FN%':>8}{'FP%':>8}"]
        for c in doc["classes"]:
            lines.append(f"{c['name']:<14}{fmt(c['iou']):>8}{fmt(c['fn_rate']):>8}{fmt(c['fp_rate']):>8}")
        lines.append(f"{'mean IoU':<14}{fmt(doc['mean_iou']):>8}")
        if "centroid" in doc:
            cd = doc["centroid"]
            mean = "n/a" if cd["mean"] is None else f"{cd['mean']:.2f} +- {cd['std']:.2f}"
            lines.append(f"centroid distance (px): {mean} over {cd['frames']} frames, "
                         f"{cd['failures']} missed")
        return "\n".join(lines) + "\n"


def evaluate_masks(preds, gts, class_names, ignore_index=None, centroid_target=None,
                   background=0) -> MetricsReport:
    """Accumulate counts (and optional centroid distances) over image pairs."""
    report = MetricsReport(list(class_names), ConfusionCounts.zeros(len(class_names)),
                           background, centroid_target)
    for pred, gt in zip(preds, gts):
        report.counts = report.counts + confusion_counts(pred, gt, len(class_names), ignore_index)
        if centroid_target is not None:
            g = np.asarray(gt)
            report.add_centroid(centroid_distance(pred, g, centroid_target))
    return report
