"""Confusion-matrix scoring: macro F1, balanced recall/precision, benign false-positive rate."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np


def confusion(y_true, y_pred, C: int) -> np.ndarray:
    """C x C counts, rows = true class, columns = predicted class."""
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    if y_true.shape != y_pred.shape:
        raise ValueError(f"length mismatch: {y_true.shape} vs {y_pred.shape}")
    if len(y_true) and (max(y_true.max(), y_pred.max()) >= C or min(y_true.min(), y_pred.min()) < 0):
        raise ValueError(f"labels must lie in [0, {C})")
    return np.bincount(y_true * C + y_pred, minlength=C * C).reshape(C, C)


@dataclass
class ScoreReport:
    macro_f1: float
    macro_recall: float
    macro_precision: float
    fp_rate: float
    per_class_f1: list[float]
    support: list[int]

    def to_dict(self) -> dict:
        return asdict(self)


def _safe_div(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    out = np.zeros_like(num, dtype=np.float64)
    np.divide(num, den, out=out, where=den > 0)
    return out


def score(cm) -> ScoreReport:
    """Macro scores over classes that are present or predicted; 0/0 counts as 0.

    ``fp_rate`` is the fraction of benign (class 0) rows predicted as any other class.
    """
    cm = np.asarray(cm, dtype=np.int64)
    total = cm.sum()
    if total == 0:
        raise ValueError("cannot score an empty confusion matrix")
    tp = np.diag(cm).astype(np.float64)
    support = cm.sum(axis=1)
    predicted = cm.sum(axis=0)
    recall = _safe_div(tp, support)
    precision = _safe_div(tp, predicted)
    f1 = _safe_div(2.0 * precision * recall, precision + recall)
    used = (support > 0) | (predicted > 0)
    benign = support[0]
    fp_rate = float((benign - cm[0, 0]) / benign) if benign else 0.0
    return ScoreReport(
        macro_f1=float(f1[used].mean()),
        macro_recall=float(recall[used].mean()),
        macro_precision=float(precision[used].mean()),
        fp_rate=fp_rate,
        per_class_f1=[float(v) for v in f1],
        support=[int(v) for v in support],
    )


def score_labels(y_true, y_pred, C: int) -> ScoreReport:
    return score(confusion(y_true, y_pred, C))


def generalization_gap(f1_train: float, f1_test: float) -> float:
    """Relative drop in macro F1 from train to test; negative when test is better."""
    if f1_train <= 0:
        raise ValueError("train F1 must be positive")
    return (f1_train - f1_test) / f1_train
