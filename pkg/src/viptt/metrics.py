"""Confusion matrix, Cohen's kappa, accuracy and per-class F1, plus report writers."""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateMarginals, LabelOutOfRange, LengthMismatch

__all__ = [
    "KappaResult",
    "confusion_matrix",
    "cohen_kappa",
    "accuracy",
    "per_class_f1",
    "format_report",
    "write_report_csv",
]


@dataclass(frozen=True)
class KappaResult:
    kappa: float
    p0: float
    pe: float


def confusion_matrix(y_true, y_pred, num_classes: int) -> np.ndarray:
    """``cm[i, j]`` counts samples of true class i predicted as j."""
    y_true = np.asarray(y_true, dtype=np.int64).ravel()
    y_pred = np.asarray(y_pred, dtype=np.int64).ravel()
    if y_true.size != y_pred.size:
        raise LengthMismatch(f"{y_true.size} true labels vs {y_pred.size} predictions")
    if y_true.size == 0:
        raise LengthMismatch("need at least one sample")
    for name, arr in (("y_true", y_true), ("y_pred", y_pred)):
        if arr.min() < 0 or arr.max() >= num_classes:
            raise LabelOutOfRange(f"{name} has ids outside [0, {num_classes - 1}]")
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (y_true, y_pred), 1)
    return cm


def _as_cm(cm):
    cm = np.asarray(cm)
    if cm.ndim != 2 or cm.shape[0] != cm.shape[1]:
        raise ValueError(f"confusion matrix must be square, got shape {cm.shape}")
    if cm.sum() <= 0:
        raise ValueError("confusion matrix is empty")
    return cm


def cohen_kappa(cm) -> KappaResult:
    """Chance-corrected agreement between true labels (rows) and predictions (columns)."""
    cm = _as_cm(cm)
    n = float(cm.sum())
    p0 = float(np.trace(cm)) / n
    pe = float(np.sum(cm.sum(axis=1) * cm.sum(axis=0))) / (n * n)
    if pe == 1.0:
        if p0 == 1.0:
            return KappaResult(1.0, p0, pe)
        raise DegenerateMarginals("chance agreement is 1 but observed agreement is not")
    return KappaResult((p0 - pe) / (1.0 - pe), p0, pe)


def accuracy(cm) -> float:
    cm = _as_cm(cm)
    return float(np.trace(cm)) / float(cm.sum())


def per_class_f1(cm) -> np.ndarray:
    """F1 per class; a class with no true and no predicted samples scores 0."""
    cm = _as_cm(cm).astype(np.float64)
    tp = np.diag(cm)
    predicted = cm.sum(axis=0)
    actual = cm.sum(axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        precision = np.where(predicted > 0, tp / predicted, 0.0)
        recall = np.where(actual > 0, tp / actual, 0.0)
        f1 = np.where(precision + recall > 0, 2 * precision * recall / (precision + recall), 0.0)
    return f1


def format_report(cm, names) -> str:
    k = cohen_kappa(cm)
    f1 = per_class_f1(cm)
    lines = [f"kappa     {k.kappa:.4f}  (p0 {k.p0:.4f}, pe {k.pe:.4f})",
             f"accuracy  {accuracy(cm):.4f}",
             f"samples   {int(np.sum(cm))}",
             "per-class F1:"]
    width = max(len(n) for n in names)
    lines += [f"  {n:<{width}}  {v:.4f}" for n, v in zip(names, f1)]
    return "\n".join(lines) + "\n"


def write_report_csv(path, cm, names) -> None:
    k = cohen_kappa(cm)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["metric", "value"])
        w.writerow(["kappa", repr(k.kappa)])
        w.writerow(["accuracy", repr(accuracy(cm))])
        for n, v in zip(names, per_class_f1(cm)):
            w.writerow([f"f1_{n}", repr(float(v))])
