"""Confusion-matrix segmentation metrics: OA, per-class IoU/F1, mIoU and AF."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from .tensor import IGNORE_INDEX


def confusion_matrix(pred, labels, classes: int) -> np.ndarray:
    """``classes x classes`` counts; rows are ground truth, columns predictions.

    Pixels whose label is ``IGNORE_INDEX`` are skipped.
    """
    pred = np.asarray(pred).astype(np.int64).reshape(-1)
    labels = np.asarray(labels).astype(np.int64).reshape(-1)
    if pred.shape != labels.shape:
        raise ValueError(f"prediction and label sizes differ: {pred.size} vs {labels.size}")
    keep = labels != IGNORE_INDEX
    pred, labels = pred[keep], labels[keep]
    for arr, what in ((pred, "prediction"), (labels, "label")):
        bad = (arr < 0) | (arr >= classes)
        if bad.any():
            raise ValueError(f"{what} value {int(arr[bad][0])} out of range for {classes} classes")
    return np.bincount(labels * classes + pred, minlength=classes * classes).reshape(classes, classes)


@dataclass(frozen=True)
class MetricReport:
    confusion: np.ndarray
    iou: np.ndarray
    f1: np.ndarray
    present: np.ndarray
    oa: float
    miou: float
    af: float

    @classmethod
    def from_confusion(cls, confusion) -> "MetricReport":
        cm = np.asarray(confusion, dtype=np.int64)
        tp = np.diag(cm).astype(np.float64)
        fp = cm.sum(axis=0) - tp
        fn = cm.sum(axis=1) - tp
        # classes absent from both predictions and labels are left out of the means
        present = (tp + fp + fn) > 0
        with np.errstate(invalid="ignore", divide="ignore"):
            iou = np.where(present, tp / (tp + fp + fn), np.nan)
            f1 = np.where(present, 2 * tp / (2 * tp + fp + fn), np.nan)
        total = cm.sum()
        oa = float(tp.sum() / total) if total else float("nan")
        miou = float(iou[present].mean()) if present.any() else float("nan")
        af = float(f1[present].mean()) if present.any() else float("nan")
        return cls(cm, iou, f1, present, oa, miou, af)

    def merge(self, other: "MetricReport") -> "MetricReport":
        return MetricReport.from_confusion(self.confusion + other.confusion)

    def to_text(self) -> str:
        lines = [f"{'class':>5} {'iou':>8} {'f1':>8}"]
        for k, (i, f) in enumerate(zip(self.iou, self.f1)):
            lines.append(f"{k:>5} {i:>8.4f} {f:>8.4f}" if self.present[k] else f"{k:>5} {'-':>8} {'-':>8}")
        lines += [f"OA={self.oa:.6f}", f"mIoU={self.miou:.6f}", f"AF={self.af:.6f}"]
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["class", "iou", "f1"])
        for k in range(len(self.iou)):
            w.writerow([k, repr(float(self.iou[k])), repr(float(self.f1[k]))])
        return buf.getvalue()


def metrics_compute(pred, labels, classes: int) -> MetricReport:
    return MetricReport.from_confusion(confusion_matrix(pred, labels, classes))
