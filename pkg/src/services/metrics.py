"""
Evaluation metrics and the Wilcoxon signed-rank test.
"""

import logging
from typing import Optional, Sequence

import numpy as np
from scipy.stats import wilcoxon
from sklearn.metrics import confusion_matrix as sk_confusion_matrix
from sklearn.metrics import f1_score, roc_auc_score

from ..errors import DomainError, ShapeError, UndefinedMetricError

logger = logging.getLogger(__name__)

EXACT_AUROC_MAX_N = 10_000
EXACT_WILCOXON_MAX_N = 25
MIN_WILCOXON_N = 5


def _check_classes(values: Sequence, classes: Sequence, what: str) -> None:
    unknown = set(values) - set(classes)
    if unknown:
        raise DomainError(f"{what} outside class set: {sorted(map(str, unknown))}")


def macro_f1(preds: Sequence, labels: Sequence, classes: Sequence) -> float:
    """Unweighted mean of per-class F1; a class with no predictions and no
    positives contributes 0."""
    if len(classes) == 0:
        raise DomainError("macro_f1: empty class set")
    _check_classes(labels, classes, "label")
    _check_classes(preds, classes, "prediction")
    if len(labels) == 0:
        return 0.0
    return float(f1_score(list(labels), list(preds), labels=list(classes), average="macro", zero_division=0))


def per_class_f1(preds: Sequence, labels: Sequence, classes: Sequence) -> dict:
    _check_classes(labels, classes, "label")
    scores = f1_score(list(labels), list(preds), labels=list(classes), average=None, zero_division=0)
    return {c: float(s) for c, s in zip(classes, scores)}


def auroc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """P(score_pos > score_neg) + 1/2 P(tie)."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(int)
    if s.shape != y.shape:
        raise ShapeError(f"scores {s.shape} and labels {y.shape} differ")
    pos, neg = s[y == 1], s[y == 0]
    if len(pos) == 0 or len(neg) == 0:
        raise UndefinedMetricError("auroc needs both classes present")
    if len(s) <= EXACT_AUROC_MAX_N:
        diff = pos[:, None] - neg[None, :]
        return float(((diff > 0).sum() + 0.5 * (diff == 0).sum()) / diff.size)
    return float(roc_auc_score(y, s))


def dsc(pred: np.ndarray, true: np.ndarray) -> float:
    pred, true = np.asarray(pred).astype(bool), np.asarray(true).astype(bool)
    if pred.shape != true.shape:
        raise ShapeError(f"mask shapes differ: {pred.shape} vs {true.shape}")
    total = pred.sum() + true.sum()
    if total == 0:
        return 1.0
    return float(2.0 * np.logical_and(pred, true).sum() / total)


def confusion_matrix(preds: Sequence, labels: Sequence, classes: Sequence) -> np.ndarray:
    """Rows are true classes, columns predicted."""
    if len(classes) == 0:
        raise DomainError("confusion_matrix: empty class set")
    if len(labels) == 0:
        return np.zeros((len(classes), len(classes)), dtype=int)
    return sk_confusion_matrix(list(labels), list(preds), labels=list(classes))


# ==================== Wilcoxon ====================

def wilcoxon_signed_rank(deltas: Sequence[float], exact: Optional[bool] = None) -> float:
    """Two-sided p-value. Zero deltas are dropped; ties get average ranks and
    force the continuity-corrected normal approximation."""
    d = np.asarray(deltas, dtype=np.float64)
    d = d[d != 0]
    n = len(d)
    if n == 0:
        raise UndefinedMetricError("wilcoxon: all deltas are zero")
    if n < MIN_WILCOXON_N:
        raise DomainError(f"wilcoxon: need at least {MIN_WILCOXON_N} nonzero deltas, got {n}")

    use_exact = n <= EXACT_WILCOXON_MAX_N if exact is None else exact
    tied = len(np.unique(np.abs(d))) < n
    method = "exact" if use_exact and not tied else "approx"
    result = wilcoxon(d, zero_method="wilcox", correction=True, alternative="two-sided", method=method)
    return float(min(1.0, result.pvalue))
