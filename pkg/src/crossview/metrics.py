"""Confusion-matrix evaluation: per-class IoU, mIoU, accuracy, FW IoU."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class UndefinedMetricError(ValueError):
    """Raised when a metric has no defined value (e.g. empty matrix)."""


@dataclass
class ConfusionMatrix:
    """C x C counts, rows = ground truth, columns = prediction.

    Ignored ground-truth entries are skipped during accumulation.
    Matrices over the same taxonomy merge additively, so per-scan
    matrices can be accumulated in parallel and merged afterwards.
    """

    num_classes: int
    ignore_id: int = 255
    counts: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.num_classes < 1:
            raise ValueError("num_classes must be >= 1")
        if self.counts is None:
            self.counts = np.zeros((self.num_classes, self.num_classes), dtype=np.int64)
        else:
            self.counts = np.asarray(self.counts, dtype=np.int64).copy()
            if self.counts.shape != (self.num_classes, self.num_classes):
                raise ValueError(f"counts must be ({self.num_classes}, {self.num_classes})")
            if self.counts.min() < 0:
                raise ValueError("counts must be non-negative")

    def accumulate(self, pred: np.ndarray, gt: np.ndarray) -> "ConfusionMatrix":
        """Tally pred/gt pairs; gt rows equal to the ignore id are skipped."""
        p = np.asarray(pred).reshape(-1)
        g = np.asarray(gt).reshape(-1)
        if len(p) != len(g):
            raise ValueError(f"{len(p)} predictions vs {len(g)} ground-truth labels")
        keep = g != self.ignore_id
        p, g = p[keep], g[keep]
        for name, a in (("gt", g), ("pred", p)):
            bad = (a < 0) | (a >= self.num_classes)
            if bad.any():
                i = int(np.flatnonzero(bad)[0])
                raise ValueError(f"{name} id {a[i]} out of range at evaluated index {i}")
        if len(g):
            flat = np.bincount(g * self.num_classes + p, minlength=self.num_classes**2)
            self.counts += flat.reshape(self.num_classes, self.num_classes)
        return self

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.num_classes != self.num_classes or other.ignore_id != self.ignore_id:
            raise ValueError("cannot merge matrices over different taxonomies")
        self.counts += other.counts
        return self

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def miou(cm: ConfusionMatrix) -> tuple[np.ndarray, float]:
    """Per-class IoU (NaN where undefined) and the mean over defined classes.

    A class is undefined, and excluded from the mean, when it appears
    in neither the ground truth nor the predictions.
    """
    tp = np.diag(cm.counts).astype(np.float64)
    fp = cm.counts.sum(axis=0) - tp
    fn = cm.counts.sum(axis=1) - tp
    denom = tp + fp + fn
    defined = denom > 0
    if not defined.any():
        raise UndefinedMetricError("no class has any ground truth or prediction")
    iou = np.full(cm.num_classes, np.nan)
    iou[defined] = tp[defined] / denom[defined]
    return iou, float(iou[defined].mean())


def accuracy(cm: ConfusionMatrix) -> float:
    """Fraction of evaluated points predicted correctly (trace / total)."""
    if cm.total == 0:
        raise UndefinedMetricError("empty confusion matrix")
    return float(np.trace(cm.counts) / cm.total)


def fwiou(cm: ConfusionMatrix) -> float:
    """Per-class IoU weighted by ground-truth frequency."""
    if cm.total == 0:
        raise UndefinedMetricError("empty confusion matrix")
    iou, _ = miou(cm)
    freq = cm.counts.sum(axis=1) / cm.total
    defined = ~np.isnan(iou)
    return float((freq[defined] * iou[defined]).sum())
