"""Confusion-matrix metrics with macro averaging."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class MetricsReport:
    confusion: np.ndarray  # rows: true class, columns: predicted class
    accuracy: float
    precision: float
    recall: float
    f1: float
    per_class_precision: np.ndarray
    per_class_recall: np.ndarray
    per_class_f1: np.ndarray

    def summary(self) -> str:
        return (
            f"accuracy={self.accuracy:.4f} precision={self.precision:.4f} "
            f"recall={self.recall:.4f} f1={self.f1:.4f}"
        )


def confusion_matrix(y_true, y_pred, num_classes: int) -> np.ndarray:
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(y_true, dtype=np.int64), np.asarray(y_pred, dtype=np.int64)), 1)
    return cm


def _safe_ratio(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    # zero denominator -> 0 by convention
    out = np.zeros_like(num, dtype=np.float64)
    np.divide(num, den, out=out, where=den > 0)
    return out


def compute_metrics(confusion) -> MetricsReport:
    cm = np.asarray(confusion)
    if cm.ndim != 2 or cm.shape[0] != cm.shape[1] or cm.shape[0] == 0:
        raise ValueError("confusion matrix must be square and non-empty")
    if np.any(cm < 0):
        raise ValueError("confusion matrix counts must be non-negative")
    total = cm.sum()
    if total < 1:
        raise ValueError("confusion matrix is empty (total count 0)")
    tp = np.diag(cm).astype(np.float64)
    precision = _safe_ratio(tp, cm.sum(axis=0).astype(np.float64))
    recall = _safe_ratio(tp, cm.sum(axis=1).astype(np.float64))
    f1 = _safe_ratio(2.0 * precision * recall, precision + recall)
    return MetricsReport(
        cm,
        float(tp.sum() / total),
        float(precision.mean()),
        float(recall.mean()),
        float(f1.mean()),
        precision,
        recall,
        f1,
    )
