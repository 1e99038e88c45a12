"""Segmentation metrics: confusion counting and mean IoU."""

from __future__ import annotations

from typing import Sequence

import numpy as np

__all__ = ["ConfusionMatrix", "miou"]


class ConfusionMatrix:
    """K x K integer counts; rows are ground truth, columns prediction.

    Pixels whose ground truth equals ``ignore_label`` are never counted.
    """

    def __init__(self, num_classes: int, ignore_label: int = 255):
        if num_classes < 1:
            raise ValueError("need at least one class")
        self.num_classes = num_classes
        self.ignore_label = ignore_label
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64)

    def update(self, gt: np.ndarray, pred: np.ndarray) -> None:
        gt = np.asarray(gt)
        pred = np.asarray(pred)
        if gt.shape != pred.shape:
            raise ValueError(f"shape mismatch: gt {gt.shape} vs pred {pred.shape}")
        keep = gt != self.ignore_label
        g = gt[keep].astype(np.int64)
        p = pred[keep].astype(np.int64)
        k = self.num_classes
        if g.size and (g.min() < 0 or g.max() >= k):
            raise ValueError(f"ground-truth labels outside [0, {k})")
        if p.size and (p.min() < 0 or p.max() >= k):
            raise ValueError(f"predicted labels outside [0, {k})")
        self.counts += np.bincount(g * k + p, minlength=k * k).reshape(k, k)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def iou(self) -> np.ndarray:
        """Per-class IoU; NaN for classes absent from both gt and prediction."""
        tp = np.diag(self.counts).astype(np.float64)
        fp = self.counts.sum(axis=0) - tp
        fn = self.counts.sum(axis=1) - tp
        denom = tp + fp + fn
        out = np.full(self.num_classes, np.nan)
        present = denom > 0
        out[present] = tp[present] / denom[present]
        return out

    def mean_iou(self) -> float:
        ious = self.iou()
        if np.all(np.isnan(ious)):
            raise ValueError("no scored pixels: every class absent or ignored")
        return float(np.nanmean(ious))


def miou(
    preds: Sequence[np.ndarray],
    gts: Sequence[np.ndarray],
    num_classes: int,
    ignore_label: int = 255,
) -> tuple[np.ndarray, float]:
    """Per-class IoU vector and its mean over classes that occur at all.

    A class missing from both ground truth and prediction is excluded
    from the mean (NaN in the vector) rather than scored zero.
    """
    preds = list(preds)
    gts = list(gts)
    if len(preds) != len(gts):
        raise ValueError(f"{len(preds)} predictions vs {len(gts)} ground truths")
    if not preds:
        raise ValueError("empty evaluation set")
    cm = ConfusionMatrix(num_classes, ignore_label)
    for p, g in zip(preds, gts):
        cm.update(g, p)
    return cm.iou(), cm.mean_iou()
