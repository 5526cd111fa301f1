"""Confusion-matrix accumulation and intersection-over-union scoring.

counts[c, c'] is the number of pixels of true class c predicted as c'
(background is class 0 and participates in the mean).  Pixels labelled 255
in the ground truth are ignored.  Classes absent from both prediction and
ground truth (0/0 IoU) are excluded from the mean, matching the common
benchmark convention.
"""

from __future__ import annotations

import numpy as np

from .tensor import ShapeError

IGNORE_LABEL = 255


class ConfusionMatrix:
    def __init__(self, num_classes: int):
        """num_classes counts background, i.e. the matrix is K x K with K = |C| + 1."""
        self.num_classes = num_classes
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64)

    def accumulate(self, pred: np.ndarray, gt: np.ndarray) -> None:
        if pred.shape != gt.shape:
            raise ShapeError(f"pred shape {pred.shape} != gt shape {gt.shape}")
        pred = pred.reshape(-1).astype(np.int64)
        gt = gt.reshape(-1).astype(np.int64)
        keep = gt != IGNORE_LABEL
        pred, gt = pred[keep], gt[keep]
        k = self.num_classes
        if pred.size and (pred.min() < 0 or pred.max() >= k or gt.min() < 0 or gt.max() >= k):
            raise ValueError(f"class values out of range [0, {k - 1}]")
        self.counts += np.bincount(gt * k + pred, minlength=k * k).reshape(k, k)

    def merge(self, other: "ConfusionMatrix") -> None:
        if other.num_classes != self.num_classes:
            raise ShapeError("cannot merge confusion matrices of different sizes")
        self.counts += other.counts

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def per_class_iou(cm: ConfusionMatrix) -> np.ndarray:
    """IoU per class; NaN where the class occurs in neither prediction nor truth."""
    counts = cm.counts.astype(np.float64)
    tp = np.diag(counts)
    denom = counts.sum(axis=1) + counts.sum(axis=0) - tp
    with np.errstate(invalid="ignore"):
        return np.where(denom > 0, tp / np.where(denom > 0, denom, 1.0), np.nan)


def mean_iou(cm: ConfusionMatrix) -> float:
    iou = per_class_iou(cm)
    valid = ~np.isnan(iou)
    if not valid.any():
        return float("nan")
    return float(iou[valid].mean())


def pixel_accuracy(cm: ConfusionMatrix) -> float:
    total = cm.total
    if total == 0:
        raise ValueError("empty confusion matrix")
    return float(np.trace(cm.counts) / total)
