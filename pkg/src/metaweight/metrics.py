"""Confusion matrices and balanced multi-class accuracy."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np


def confusion(preds, labels, k: int) -> np.ndarray:
    """``counts[true, pred]``."""
    preds = np.asarray(preds, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if preds.shape != labels.shape:
        raise ValueError(f"preds {preds.shape} and labels {labels.shape} differ")
    for name, v in (("prediction", preds), ("label", labels)):
        if v.size and (v.min() < 0 or v.max() >= k):
            raise ValueError(f"{name} outside [0, {k})")
    cm = np.zeros((k, k), dtype=np.int64)
    np.add.at(cm, (labels, preds), 1)
    return cm


def per_class_accuracy(cm) -> np.ndarray:
    cm = np.asarray(cm)
    support = cm.sum(axis=1)
    if np.any(support == 0):
        empty = np.flatnonzero(support == 0).tolist()
        raise ValueError(f"classes {empty} have no examples")
    return np.diag(cm) / support


def balanced_accuracy(cm) -> float:
    """Mean of per-class recall."""
    return float(per_class_accuracy(cm).mean())


@dataclass
class MetricsReport:
    per_class_accuracy: list[float]
    balanced_accuracy: float
    overall_accuracy: float
    confusion: list[list[int]]

    @classmethod
    def from_confusion(cls, cm) -> MetricsReport:
        cm = np.asarray(cm, dtype=np.int64)
        acc = per_class_accuracy(cm)
        return cls(
            per_class_accuracy=acc.tolist(),
            balanced_accuracy=float(acc.mean()),
            overall_accuracy=float(np.trace(cm) / cm.sum()),
            confusion=cm.tolist(),
        )

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def confusion_csv(cm) -> str:
    return "".join(",".join(str(int(v)) for v in row) + "\n" for row in np.asarray(cm))
