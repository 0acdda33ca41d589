"""Evaluation metrics: MAE, MAPE, accuracy, confusion matrices, repeat aggregation."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import LabelNotInClassSet, LengthMismatch, TooFewRepeats, ZeroTruthLabel

METRICS = ("mae", "mape", "accuracy")


@dataclass(frozen=True, eq=False)
class EvalResult:
    mae: float
    mape: float  # percent
    accuracy: float  # percent
    confusion: np.ndarray  # confusion[truth_index, pred_index]
    class_set: tuple[int, ...]
    n_samples: int

    def as_dict(self) -> dict:
        return {
            "mae": self.mae,
            "mape": self.mape,
            "accuracy": self.accuracy,
            "n_samples": self.n_samples,
            "class_set": list(self.class_set),
            "confusion": self.confusion.tolist(),
        }


@dataclass(frozen=True)
class AggregateResult:
    mean: dict[str, float]
    std: dict[str, float] | None  # sample std; None for a single repeat
    repeat_count: int

    def as_dict(self) -> dict:
        return {"repeat_count": self.repeat_count, "mean": self.mean, "std": self.std}


def evaluate(preds: Sequence[int], truths: Sequence[int], class_set: Sequence[int]) -> EvalResult:
    p = np.asarray(preds, dtype=np.int64)
    t = np.asarray(truths, dtype=np.int64)
    if p.shape != t.shape or p.ndim != 1:
        raise LengthMismatch(f"{p.size} predictions vs {t.size} truths")
    if p.size == 0:
        raise LengthMismatch("nothing to evaluate")
    if np.any(t <= 0):
        raise ZeroTruthLabel("truth labels must be positive for MAPE")
    classes = np.asarray(sorted(set(int(c) for c in class_set)), dtype=np.int64)
    for name, arr in (("prediction", p), ("truth", t)):
        outside = np.setdiff1d(arr, classes)
        if outside.size:
            raise LabelNotInClassSet(f"{name} labels {outside.tolist()} not in class set")

    err = np.abs(p - t).astype(np.float64)
    confusion = np.zeros((len(classes), len(classes)), dtype=np.int64)
    np.add.at(confusion, (np.searchsorted(classes, t), np.searchsorted(classes, p)), 1)
    return EvalResult(
        mae=float(err.mean()),
        mape=float(100.0 * np.mean(err / t)),
        accuracy=float(100.0 * np.mean(p == t)),
        confusion=confusion,
        class_set=tuple(int(c) for c in classes),
        n_samples=int(p.size),
    )


def aggregate(results: Sequence[EvalResult]) -> AggregateResult:
    """Mean and sample (n-1) standard deviation of each metric across repeats."""
    if len(results) < 2:
        raise TooFewRepeats(f"need at least 2 repeats, got {len(results)}")
    mean, std = {}, {}
    for name in METRICS:
        values = np.array([getattr(r, name) for r in results], dtype=np.float64)
        mean[name] = float(values.mean())
        std[name] = float(values.std(ddof=1))
    return AggregateResult(mean, std, len(results))


def summarize(results: Sequence[EvalResult]) -> AggregateResult:
    """aggregate(), but a single repeat yields its values with no std."""
    if len(results) == 1:
        r = results[0]
        return AggregateResult({name: float(getattr(r, name)) for name in METRICS}, None, 1)
    return aggregate(results)


def adjacent_error_fraction(confusion: np.ndarray, class_set: Sequence[int] | None = None) -> float:
    """Share of misclassifications whose prediction is a neighbor of the truth in the sorted class set.

    Rows and columns of ``confusion`` follow the sorted class set. Returns 1.0
    when there are no errors.
    """
    C = np.asarray(confusion)
    if class_set is not None and len(class_set) != C.shape[0]:
        raise LengthMismatch(f"confusion is {C.shape} but class set has {len(class_set)} classes")
    i, j = np.indices(C.shape)
    off = C[i != j].sum()
    if off == 0:
        return 1.0
    return float(C[np.abs(i - j) == 1].sum() / off)
