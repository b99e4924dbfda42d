"""Class-balanced accuracy, confusion counts, ROC and AUC."""

from __future__ import annotations

import numpy as np


class MetricError(ValueError):
    pass


def _labels(labels) -> np.ndarray:
    y = np.asarray(labels).astype(np.int64).reshape(-1)
    if np.any((y != 0) & (y != 1)):
        raise MetricError("labels must be 0 or 1")
    return y


def confusion_counts(pred, labels) -> dict[str, int]:
    p = _labels(pred)
    y = _labels(labels)
    return {
        "tn": int(np.sum((p == 0) & (y == 0))),
        "fp": int(np.sum((p == 1) & (y == 0))),
        "fn": int(np.sum((p == 0) & (y == 1))),
        "tp": int(np.sum((p == 1) & (y == 1))),
    }


def per_class_accuracy(pred, labels) -> tuple[float, float]:
    c = confusion_counts(pred, labels)
    n0, n1 = c["tn"] + c["fp"], c["tp"] + c["fn"]
    if n0 == 0 or n1 == 0:
        raise MetricError("balanced accuracy needs both classes present")
    return c["tn"] / n0, c["tp"] / n1


def balanced_accuracy(pred, labels) -> float:
    a0, a1 = per_class_accuracy(pred, labels)
    return (a0 + a1) / 2.0


def argmax_predictions(scores_or_logits) -> np.ndarray:
    """Class 1 only when strictly preferred; ties go to class 0."""
    z = np.asarray(scores_or_logits)
    return (z[..., 1] > z[..., 0]).astype(np.int64)


def softmax_scores(logits) -> np.ndarray:
    """Probability of class 1 from [N, 2] logits."""
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e[..., 1] / e.sum(axis=-1)


def roc_curve(scores, labels) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """FPR, TPR and thresholds, sweeping every distinct score high to low.

    A sample is called positive when ``score >= threshold``. The curve starts
    at (0, 0) (threshold +inf) and ends at (1, 1).
    """
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = _labels(labels)
    if s.shape != y.shape:
        raise MetricError("scores and labels differ in length")
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricError("ROC needs both classes present")
    order = np.argsort(-s, kind="mergesort")
    s_sorted = s[order]
    y_sorted = y[order]
    tps = np.cumsum(y_sorted)
    fps = np.cumsum(1 - y_sorted)
    last_of_run = np.r_[np.diff(s_sorted) != 0, True]
    tpr = np.r_[0.0, tps[last_of_run] / n_pos]
    fpr = np.r_[0.0, fps[last_of_run] / n_neg]
    thresholds = np.r_[np.inf, s_sorted[last_of_run]]
    return fpr, tpr, thresholds


def auc(scores, labels) -> float:
    """Trapezoidal area under the ROC curve."""
    fpr, tpr, _ = roc_curve(scores, labels)
    return float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))
