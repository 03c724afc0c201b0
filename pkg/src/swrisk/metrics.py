"""Binary classification metrics: accuracy, F1, confusion and AUROC."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy.stats import rankdata

from .errors import DomainError, UndefinedMetricError


@dataclass
class Metrics:
    accuracy: float
    f1: float
    auroc: float | None
    precision: float
    recall: float
    confusion: list  # [[TN, FP], [FN, TP]], rows = true label
    n: int
    f1_average: str = "binary"

    def to_dict(self) -> dict:
        return asdict(self)


def _validate(scores, labels):
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    if scores.size == 0 or scores.size != labels.size:
        raise DomainError(f"need aligned non-empty inputs, got {scores.size} scores, {labels.size} labels")
    if not np.all(np.isin(labels, (0, 1))):
        raise DomainError("labels must be 0 or 1")
    if not np.all(np.isfinite(scores)):
        raise DomainError("scores must be finite")
    return scores, labels.astype(np.int64)


def roc_auc(scores, labels) -> float:
    """Mann-Whitney AUROC: P(score_pos > score_neg), ties counted half."""
    scores, labels = _validate(scores, labels)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUROC is undefined when only one class is present")
    ranks = rankdata(scores)  # mid-ranks for ties
    u = ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def confusion(pred, labels) -> np.ndarray:
    pred = np.asarray(pred, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((2, 2), dtype=np.int64)
    np.add.at(out, (labels, pred), 1)
    return out


def _f1(tp, fp, fn):
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    # 2PR/(P+R) rewritten as one integer division: correctly rounded
    f1 = 2 * tp / (2 * tp + fp + fn) if tp else 0.0
    return p, r, f1


def metrics_from_confusion(cm, f1_average: str = "binary") -> tuple[float, float, float, float]:
    """(accuracy, precision, recall, f1) for a [[TN, FP], [FN, TP]] table."""
    (tn, fp), (fn, tp) = np.asarray(cm).tolist()
    n = tn + fp + fn + tp
    acc = (tp + tn) / n
    p, r, f1 = _f1(tp, fp, fn)
    if f1_average == "macro":
        f1 = 0.5 * (f1 + _f1(tn, fn, fp)[2])
    elif f1_average != "binary":
        raise DomainError(f"f1_average must be 'binary' or 'macro', got {f1_average!r}")
    return acc, p, r, f1


def evaluate(scores, labels, f1_average: str = "binary") -> Metrics:
    """Threshold at 0.5 (ties go to class 0) and score against ``labels``.

    ``scores`` are probabilities of the at-risk class. Raises
    UndefinedMetricError for single-class labels, with the threshold
    metrics attached as ``.metrics``.
    """
    scores, labels = _validate(scores, labels)
    pred = (scores > 0.5).astype(np.int64)
    cm = confusion(pred, labels)
    acc, p, r, f1 = metrics_from_confusion(cm, f1_average)
    out = Metrics(acc, f1, None, p, r, cm.tolist(), int(labels.size), f1_average)
    try:
        out.auroc = roc_auc(scores, labels)
    except UndefinedMetricError as exc:
        raise UndefinedMetricError(str(exc), metrics=out) from None
    return out
