"""Confusion-matrix accumulation and per-class IoU / mIoU reporting."""

from __future__ import annotations

import dataclasses
from typing import Optional

import numpy as np

from .data import CLASS_NAMES, IGNORE_ID


class MetricError(ValueError):
    pass


class ConfusionMatrix:
    """C x C pixel counts; entry [g][p] = pixels of truth g predicted p."""

    def __init__(self, num_classes: int):
        self.num_classes = num_classes
        self.matrix = np.zeros((num_classes, num_classes), dtype=np.int64)

    def update(self, predicted: np.ndarray, truth: np.ndarray) -> "ConfusionMatrix":
        if predicted.shape != truth.shape:
            raise MetricError(f"shape mismatch: predicted {predicted.shape} "
                              f"vs truth {truth.shape}")
        if (predicted == IGNORE_ID).any():
            raise MetricError("predictions must not contain the ignore id")
        if predicted.max(initial=0) >= self.num_classes:
            raise MetricError("prediction id outside class range")
        keep = truth != IGNORE_ID
        idx = truth[keep].astype(np.int64) * self.num_classes \
            + predicted[keep].astype(np.int64)
        self.matrix += np.bincount(idx, minlength=self.num_classes ** 2) \
            .reshape(self.num_classes, self.num_classes)
        return self

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        self.matrix += other.matrix
        return self


@dataclasses.dataclass
class IoUReport:
    per_class: list          # float IoU or None for absent classes
    miou: float

    def present(self):
        return [v is not None for v in self.per_class]


def iou_report(cm: ConfusionMatrix) -> IoUReport:
    """IoU_c = TP / (TP + FP + FN); zero-union classes are marked absent
    and excluded from the mean."""
    m = cm.matrix
    tp = np.diag(m).astype(np.float64)
    union = m.sum(axis=0) + m.sum(axis=1) - tp
    per_class = []
    ious = []
    for c in range(cm.num_classes):
        if union[c] == 0:
            per_class.append(None)
        else:
            v = float(tp[c] / union[c])
            per_class.append(v)
            ious.append(v)
    if not ious:
        raise MetricError("empty evaluation: every class has zero union")
    return IoUReport(per_class=per_class, miou=float(np.mean(ious)))


def format_report(report: IoUReport, class_names: Optional[list] = None) -> str:
    names = class_names or CLASS_NAMES[:len(report.per_class)]
    width = max(len(n) for n in names) + 2
    lines = [f"{'class':<{width}}IoU"]
    for name, iou in zip(names, report.per_class):
        val = "   -" if iou is None else f"{100 * iou:6.2f}"
        lines.append(f"{name:<{width}}{val}")
    lines.append(f"{'mIoU':<{width}}{100 * report.miou:6.2f}")
    return "\n".join(lines)


def report_csv(report: IoUReport, class_names: Optional[list] = None) -> str:
    names = class_names or CLASS_NAMES[:len(report.per_class)]
    head = ",".join(["mIoU"] + list(names))
    vals = [f"{100 * report.miou:.4f}"] + \
        ["-" if v is None else f"{100 * v:.4f}" for v in report.per_class]
    return head + "\n" + ",".join(vals)
