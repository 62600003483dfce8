"""Per-class precision/recall/F1 and confusion matrices."""

from __future__ import annotations

import numpy as np

__all__ = ["confusion", "f1_scores", "accuracy"]


def _check(gold, pred, n_classes):
    gold = np.asarray(gold, dtype=np.int64)
    pred = np.asarray(pred, dtype=np.int64)
    if gold.shape != pred.shape or gold.ndim != 1:
        raise ValueError("gold and pred must be equal-length 1-D sequences")
    if gold.size == 0:
        raise ValueError("no labels to score")
    for name, arr in (("gold", gold), ("pred", pred)):
        if arr.min() < 0 or arr.max() >= n_classes:
            raise ValueError(f"{name} label outside [0, {n_classes})")
    return gold, pred


def confusion(gold, pred, n_classes: int, normalize: bool = False) -> np.ndarray:
    """Counts of (gold, pred) pairs; rows are gold. ``normalize`` gives row percentages."""
    gold, pred = _check(gold, pred, n_classes)
    cm = np.bincount(gold * n_classes + pred, minlength=n_classes * n_classes)
    cm = cm.reshape(n_classes, n_classes).astype(np.int64)
    if not normalize:
        return cm
    support = cm.sum(axis=1, keepdims=True)
    return np.divide(100.0 * cm, support, out=np.zeros(cm.shape), where=support > 0)


def f1_scores(gold, pred, n_classes: int):
    """Return ``(macro_f1, weighted_f1, per_class)``.

    ``per_class`` is a dict of arrays: precision, recall, f1, support. A class
    with P + R = 0 scores F1 = 0; classes absent from gold still count toward
    the macro mean.
    """
    cm = confusion(gold, pred, n_classes)
    tp = np.diag(cm).astype(np.float64)
    predicted = cm.sum(axis=0)
    support = cm.sum(axis=1)
    precision = np.divide(tp, predicted, out=np.zeros(n_classes), where=predicted > 0)
    recall = np.divide(tp, support, out=np.zeros(n_classes), where=support > 0)
    denom = precision + recall
    f1 = np.divide(2 * precision * recall, denom, out=np.zeros(n_classes), where=denom > 0)
    macro = float(f1.mean())
    weighted = float(np.dot(f1, support) / support.sum())
    return macro, weighted, {
        "precision": precision,
        "recall": recall,
        "f1": f1,
        "support": support,
    }


def accuracy(gold, pred) -> float:
    gold = np.asarray(gold)
    return float(np.mean(gold == np.asarray(pred)))
