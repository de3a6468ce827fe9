"""Classification metrics for the three-grade task and decision-curve analysis.

Conventions:

* A zero denominator in precision/recall/F1 yields 0 and sets a degenerate
  flag for that class, so macro averages stay defined.
* Multiclass accuracy is trace / total.
* One-vs-rest AUC is the Mann-Whitney statistic with ties counted 1/2; a
  class lacking positives or negatives is undefined and left out of the
  macro mean.
* Net benefit at threshold t: ``TP/n - FP/n * t / (1 - t)``, a case being
  called positive when its score is >= t.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from .errors import ConfigError, DegenerateInputError, FormatError, ShapeMismatchError

N_CLASSES = 3
SIMPLEX_TOL = 1e-9


@dataclass(frozen=True)
class ConfusionMatrix:
    counts: np.ndarray  # rows = true class, columns = predicted

    @property
    def total(self) -> int:
        return int(self.counts.sum())


@dataclass(frozen=True)
class ScoreSet:
    scores: np.ndarray  # (n, 3)
    labels: np.ndarray  # (n,)

    def __post_init__(self):
        scores = np.asarray(self.scores, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        if scores.ndim != 2 or scores.shape[0] != labels.shape[0]:
            raise ShapeMismatchError(f"scores {scores.shape} and labels {labels.shape} disagree")
        if labels.size and (labels.min() < 0 or labels.max() >= scores.shape[1]):
            raise ConfigError("labels outside the class range")
        if not np.all(np.isfinite(scores)) or np.any(np.abs(scores.sum(axis=1) - 1.0) > SIMPLEX_TOL):
            raise FormatError(f"score rows must be finite and sum to 1 within {SIMPLEX_TOL}")
        object.__setattr__(self, "scores", scores)
        object.__setattr__(self, "labels", labels)


@dataclass(frozen=True)
class ClassMetrics:
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    degenerate: np.ndarray  # bool per class


def confusion(labels, predictions, n_classes: int = N_CLASSES) -> ConfusionMatrix:
    labels = np.asarray(labels, dtype=np.int64).ravel()
    predictions = np.asarray(predictions, dtype=np.int64).ravel()
    if labels.shape != predictions.shape:
        raise ShapeMismatchError(f"{labels.size} labels vs {predictions.size} predictions")
    counts = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(counts, (labels, predictions), 1)
    return ConfusionMatrix(counts)


def _ratio(num, den):
    if den == 0:
        return 0.0, True
    return num / den, False


def per_class_prf1(cm: ConfusionMatrix) -> ClassMetrics:
    c = cm.counts
    n = c.shape[0]
    prec, rec, f1 = np.zeros(n), np.zeros(n), np.zeros(n)
    flag = np.zeros(n, dtype=bool)
    for k in range(n):
        tp = c[k, k]
        prec[k], d1 = _ratio(tp, c[:, k].sum())
        rec[k], d2 = _ratio(tp, c[k, :].sum())
        f1[k], d3 = _ratio(2.0 * prec[k] * rec[k], prec[k] + rec[k])
        flag[k] = d1 or d2 or d3
    return ClassMetrics(prec, rec, f1, flag)


def accuracy(cm: ConfusionMatrix) -> float:
    if cm.total == 0:
        raise DegenerateInputError("accuracy of an empty confusion matrix")
    return float(np.trace(cm.counts) / cm.total)


def macro_average(values) -> float:
    """Mean over defined entries; ``None`` or NaN marks an undefined class."""
    vals = [float(v) for v in values if v is not None and not np.isnan(v)]
    if not vals:
        raise DegenerateInputError("macro average over no defined classes")
    return float(np.mean(vals))


def binary_auc(scores, positive) -> float:
    """Mann-Whitney U / (n_pos * n_neg) via average ranks (ties get half credit)."""
    scores = np.asarray(scores, dtype=np.float64)
    positive = np.asarray(positive, dtype=bool)
    n_pos = int(positive.sum())
    n_neg = positive.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return float("nan")
    ranks = rankdata(scores, method="average")
    u = ranks[positive].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def roc_curve(scores, positive):
    """ROC points (fpr, tpr) over distinct thresholds, from (0, 0) to (1, 1)."""
    scores = np.asarray(scores, dtype=np.float64)
    positive = np.asarray(positive, dtype=bool)
    order = np.argsort(-scores, kind="mergesort")
    s, y = scores[order], positive[order]
    last_of_tie = np.r_[np.flatnonzero(np.diff(s) != 0), s.size - 1]
    tps = np.cumsum(y)[last_of_tie]
    fps = np.cumsum(~y)[last_of_tie]
    n_pos, n_neg = positive.sum(), (~positive).sum()
    tpr = np.r_[0.0, tps / n_pos] if n_pos else np.r_[0.0, np.zeros_like(tps, dtype=float)]
    fpr = np.r_[0.0, fps / n_neg] if n_neg else np.r_[0.0, np.zeros_like(fps, dtype=float)]
    thresholds = np.r_[np.inf, s[last_of_tie]]
    return fpr, tpr, thresholds


def trapezoid_auc(fpr, tpr) -> float:
    return float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))


def auc_ovr(s: ScoreSet):
    """Per-class one-vs-rest AUC (NaN where undefined) and their macro mean."""
    per_class = np.array([binary_auc(s.scores[:, k], s.labels == k) for k in range(s.scores.shape[1])])
    if np.all(np.isnan(per_class)):
        raise DegenerateInputError("AUC undefined for every class")
    return per_class, macro_average(per_class)


@dataclass(frozen=True)
class DecisionCurve:
    thresholds: np.ndarray
    model: np.ndarray
    treat_all: np.ndarray
    treat_none: np.ndarray
    prevalence: float


def _check_thresholds(thresholds):
    t = np.asarray(thresholds, dtype=np.float64).ravel()
    if np.any((t <= 0) | (t >= 1)):
        raise ConfigError("DCA thresholds must lie strictly inside (0, 1)")
    return t


def net_benefit(scores, positive, thresholds) -> np.ndarray:
    scores = np.asarray(scores, dtype=np.float64)
    positive = np.asarray(positive, dtype=bool)
    t = _check_thresholds(thresholds)
    n = scores.size
    called = scores[None, :] >= t[:, None]
    tp = (called & positive[None, :]).sum(axis=1)
    fp = (called & ~positive[None, :]).sum(axis=1)
    return tp / n - fp / n * (t / (1.0 - t))


def dca_net_benefit(s: ScoreSet, positive_class: int, thresholds) -> DecisionCurve:
    t = _check_thresholds(thresholds)
    positive = s.labels == positive_class
    prevalence = float(positive.mean()) if positive.size else 0.0
    model = net_benefit(s.scores[:, positive_class], positive, t)
    treat_all = prevalence - (1.0 - prevalence) * t / (1.0 - t)
    return DecisionCurve(t, model, treat_all, np.zeros_like(t), prevalence)


def macro_dca(s: ScoreSet, thresholds) -> DecisionCurve:
    """One-vs-rest decision curves averaged over classes."""
    curves = [dca_net_benefit(s, k, thresholds) for k in range(s.scores.shape[1])]
    return DecisionCurve(
        curves[0].thresholds,
        np.mean([c.model for c in curves], axis=0),
        np.mean([c.treat_all for c in curves], axis=0),
        np.zeros_like(curves[0].thresholds),
        float(np.mean([c.prevalence for c in curves])),
    )


def summarize(s: ScoreSet) -> dict:
    """Macro metrics plus per-class rows, as plain Python types."""
    predictions = np.argmax(s.scores, axis=1)
    cm = confusion(s.labels, predictions, s.scores.shape[1])
    cls = per_class_prf1(cm)
    per_auc, macro_auc = auc_ovr(s)
    return {
        "n_cases": int(s.labels.size),
        "accuracy": accuracy(cm),
        "macro_precision": macro_average(cls.precision),
        "macro_recall": macro_average(cls.recall),
        "macro_f1": macro_average(cls.f1),
        "macro_auc": macro_auc,
        "per_class": [
            {
                "class": k,
                "precision": float(cls.precision[k]),
                "recall": float(cls.recall[k]),
                "f1": float(cls.f1[k]),
                "auc": None if np.isnan(per_auc[k]) else float(per_auc[k]),
                "degenerate": bool(cls.degenerate[k]),
            }
            for k in range(s.scores.shape[1])
        ],
        "confusion": cm.counts.tolist(),
    }
