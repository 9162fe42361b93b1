"""Health-condition decisions and the accuracy / FDI metrics."""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Sequence

import numpy as np


class HealthClass(enum.IntEnum):
    HEALTHY = 0
    MINOR = 1
    MEDIUM = 2
    SEVERE = 3

    @property
    def label(self) -> str:
        return _LABELS[self]

    @property
    def interval(self) -> tuple[float, float]:
        """Half-open ``[lo, hi)`` range of the class on the real line."""
        return _OPEN_BOUNDS[self]

    @property
    def sampling_interval(self) -> tuple[float, float]:
        """Finite range degradation targets are drawn from."""
        return _TARGET_BOUNDS[self]


_LABELS = {
    HealthClass.HEALTHY: "Healthy",
    HealthClass.MINOR: "Minor Fault",
    HealthClass.MEDIUM: "Medium Fault",
    HealthClass.SEVERE: "Severe Fault",
}
_OPEN_BOUNDS = {
    HealthClass.HEALTHY: (0.98, np.inf),
    HealthClass.MINOR: (0.96, 0.98),
    HealthClass.MEDIUM: (0.94, 0.96),
    HealthClass.SEVERE: (-np.inf, 0.94),
}
_TARGET_BOUNDS = {
    HealthClass.HEALTHY: (0.98, 1.0),
    HealthClass.MINOR: (0.96, 0.98),
    HealthClass.MEDIUM: (0.94, 0.96),
    HealthClass.SEVERE: (0.92, 0.94),
}


def class_of(value: float) -> HealthClass:
    """Map a health-parameter value to its class (lower bounds inclusive)."""
    if value >= 0.98:
        return HealthClass.HEALTHY
    if value >= 0.96:
        return HealthClass.MINOR
    if value >= 0.94:
        return HealthClass.MEDIUM
    return HealthClass.SEVERE


def classify(theta: Sequence[float], window: slice | tuple[int, int] | None = None) -> HealthClass:
    """Classify one health-parameter trajectory by its mean over ``window``."""
    theta = np.asarray(theta, dtype=float)
    if isinstance(window, tuple):
        window = slice(*window)
    seg = theta if window is None else theta[window]
    if seg.size == 0:
        raise ValueError("classification window is empty")
    return class_of(float(np.mean(seg)))


def rmse(estimates, truth) -> float:
    estimates = np.asarray(estimates, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if estimates.shape != truth.shape:
        raise ValueError(f"length mismatch: {estimates.shape} vs {truth.shape}")
    if estimates.size == 0:
        raise ValueError("rmse of an empty sequence")
    return float(np.sqrt(np.mean((estimates - truth) ** 2)))


def improvement(rmse_pens: float, rmse_pes: float) -> float:
    """Percent RMSE reduction of PES relative to PENS."""
    if rmse_pens == 0:
        raise ZeroDivisionError("PENS RMSE is zero")
    return 100.0 * (rmse_pens - rmse_pes) / rmse_pens


@dataclass(frozen=True)
class ConfusionMatrix:
    """Counts indexed [actual, estimated] over the four health classes."""

    counts: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.counts, dtype=np.int64)
        if c.shape != (4, 4) or np.any(c < 0):
            raise ValueError("confusion matrix must be a non-negative 4x4 count array")
        object.__setattr__(self, "counts", c)

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.counts + other.counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def rates(self) -> np.ndarray:
        """Row-normalised rates; rows with no samples stay zero."""
        rows = self.counts.sum(axis=1, keepdims=True)
        with np.errstate(invalid="ignore", divide="ignore"):
            r = np.where(rows > 0, self.counts / np.maximum(rows, 1), 0.0)
        return r

    def true_positive_rate(self, cls: HealthClass) -> float:
        row = self.counts[cls].sum()
        return float(self.counts[cls, cls] / row) if row else 0.0

    def accuracy(self) -> float:
        return float(np.trace(self.counts) / self.total) if self.total else 0.0


def confusion(actual: Sequence[HealthClass], predicted: Sequence[HealthClass]) -> ConfusionMatrix:
    if len(actual) != len(predicted):
        raise ValueError(f"length mismatch: {len(actual)} actual vs {len(predicted)} predicted")
    counts = np.zeros((4, 4), dtype=np.int64)
    for a, p in zip(actual, predicted):
        counts[int(a), int(p)] += 1
    return ConfusionMatrix(counts)


def macro_metrics(cm: ConfusionMatrix) -> dict:
    """Macro precision, recall and F1 over the classes present in the actuals.

    0/0 ratios count as 0, and F1 is the per-class harmonic mean averaged
    without weights.
    """
    c = cm.counts.astype(float)
    tp = np.diag(c)
    actual = c.sum(axis=1)
    predicted = c.sum(axis=0)
    present = actual > 0
    if not present.any():
        raise ValueError("confusion matrix is empty")
    precision = np.divide(tp, predicted, out=np.zeros(4), where=predicted > 0)
    recall = np.divide(tp, actual, out=np.zeros(4), where=actual > 0)
    denom = precision + recall
    f1 = np.divide(2 * precision * recall, denom, out=np.zeros(4), where=denom > 0)
    return {
        "precision": float(precision[present].mean()),
        "recall": float(recall[present].mean()),
        "f1": float(f1[present].mean()),
        "accuracy": cm.accuracy(),
        "per_class": {
            HealthClass(i).label: {"precision": float(precision[i]), "recall": float(recall[i]),
                                   "f1": float(f1[i])}
            for i in range(4) if present[i]
        },
    }
