"""Classification and localisation metrics, ROC curves and AUC."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


class UndefinedAucError(ValueError):
    """Raised when the labels contain only one class."""


@dataclass(frozen=True)
class BinaryMetrics:
    tp: int
    fp: int
    tn: int
    fn: int
    auc: float = math.nan

    @property
    def counts(self) -> tuple[int, int, int, int]:
        return self.tp, self.fp, self.tn, self.fn

    @staticmethod
    def _ratio(a: int, b: int) -> float:
        return a / b if b else math.nan

    @property
    def accuracy(self) -> float:
        return self._ratio(self.tp + self.tn, self.tp + self.fp + self.tn + self.fn)

    @property
    def sensitivity(self) -> float:
        return self._ratio(self.tp, self.tp + self.fn)

    @property
    def specificity(self) -> float:
        return self._ratio(self.tn, self.tn + self.fp)

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "sensitivity": self.sensitivity,
            "specificity": self.specificity,
            "auc": self.auc,
            "tp": self.tp, "fp": self.fp, "tn": self.tn, "fn": self.fn,
        }


def _pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a).ravel()
    b = np.asarray(b).ravel()
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.size} vs {b.size}")
    if a.size == 0:
        raise ValueError("empty input")
    return a, b


def binary_metrics(predictions, labels) -> BinaryMetrics:
    p, y = _pair(predictions, labels)
    p = p.astype(bool)
    y = y.astype(bool)
    return BinaryMetrics(int(np.sum(p & y)), int(np.sum(p & ~y)), int(np.sum(~p & ~y)), int(np.sum(~p & y)))


@dataclass(frozen=True)
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray  # point i flags scores >= thresholds[i]; thresholds[0] = +inf


def roc_auc(scores, labels) -> tuple[RocCurve, float]:
    """ROC from a sweep over distinct scores and its exact trapezoidal area.

    Tied scores enter the curve as one diagonal step, which is the same as
    counting tied positive/negative pairs as one half.  The area is
    accumulated in integers, so it equals the pairwise concordance rate exactly.
    """
    s, y = _pair(scores, labels)
    s = s.astype(np.float64)
    y = y.astype(bool)
    if np.isnan(s).any():
        raise ValueError("scores contain NaN")
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedAucError("AUC needs both positive and negative labels")
    order = np.argsort(-s, kind="stable")
    s_sorted = s[order]
    y_sorted = y[order]
    cut = np.flatnonzero(np.diff(s_sorted)) + 1
    bounds = np.concatenate([cut, [s.size]])
    tp = np.concatenate([[0], np.cumsum(y_sorted)[bounds - 1]]).astype(np.int64)
    fp = np.concatenate([[0], np.cumsum(~y_sorted)[bounds - 1]]).astype(np.int64)
    twice_area = sum(int(d) * int(t) for d, t in zip(np.diff(fp), tp[1:] + tp[:-1]))
    auc = twice_area / (2 * n_pos * n_neg)
    thr = np.concatenate([[np.inf], s_sorted[bounds - 1]])
    return RocCurve(fp / n_neg, tp / n_pos, thr), auc


def concordance_auc(scores, labels) -> float:
    """O(n^2) pairwise concordance: P(score_pos > score_neg) + 0.5 P(tie)."""
    s, y = _pair(scores, labels)
    y = y.astype(bool)
    pos, neg = s[y], s[~y]
    if pos.size == 0 or neg.size == 0:
        raise UndefinedAucError("AUC needs both positive and negative labels")
    twice = 0
    for a in pos:
        for b in neg:
            twice += 2 if a > b else (1 if a == b else 0)
    return twice / (2 * pos.size * neg.size)


@dataclass(frozen=True)
class WithinSampleMetrics:
    mean_prop_correct: float
    mean_prop_artefact_correct: float
    mean_prop_nonartefact_correct: float
    prop_fully_correct: float

    def to_dict(self) -> dict:
        return {
            "mean_prop_correct": self.mean_prop_correct,
            "mean_prop_artefact_correct": self.mean_prop_artefact_correct,
            "mean_prop_nonartefact_correct": self.mean_prop_nonartefact_correct,
            "prop_fully_correct": self.prop_fully_correct,
        }


def within_sample_metrics(predicted_masks, truth_masks) -> WithinSampleMetrics:
    pred = np.asarray(predicted_masks, dtype=bool)
    truth = np.asarray(truth_masks, dtype=bool)
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {truth.shape}")
    if pred.ndim != 2 or pred.shape[0] == 0:
        raise ValueError("expected a non-empty [samples, length] mask stack")
    correct = pred == truth
    n_true = truth.sum(axis=1)
    n_false = truth.shape[1] - n_true
    has_art = n_true > 0
    has_clean = n_false > 0
    art = (pred & truth).sum(axis=1)[has_art] / n_true[has_art]
    clean = (~pred & ~truth).sum(axis=1)[has_clean] / n_false[has_clean]
    return WithinSampleMetrics(
        float(correct.mean(axis=1).mean()),
        float(art.mean()) if art.size else math.nan,
        float(clean.mean()) if clean.size else math.nan,
        float(correct.all(axis=1).mean()),
    )
