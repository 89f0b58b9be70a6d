"""Ranking and calibration metrics: ROC-AUC, PR-AUC (average precision), ECE, NCE."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

PROB_CLAMP = 1e-7


class UndefinedMetricError(ValueError):
    """The metric is undefined for the given labels (e.g. only one class present)."""


def _check(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1)
    if s.shape != y.shape:
        raise ValueError(f"scores and labels differ in length: {s.shape[0]} vs {y.shape[0]}")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be 0/1")
    return s, y.astype(np.int64)


def _midranks(s: np.ndarray) -> np.ndarray:
    order = np.argsort(s, kind="mergesort")
    sorted_s = s[order]
    boundaries = np.flatnonzero(np.diff(sorted_s)) + 1
    starts = np.concatenate([[0], boundaries])
    ends = np.concatenate([boundaries, [len(s)]])
    ranks = np.empty(len(s), dtype=np.float64)
    avg = (starts + ends + 1) / 2.0  # 1-based average rank of each tie group
    ranks[order] = np.repeat(avg, ends - starts)
    return ranks


def roc_auc(scores, labels) -> float:
    """P(score_pos > score_neg) + 0.5 P(tie), via the Mann-Whitney rank statistic."""
    s, y = _check(scores, labels)
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("ROC-AUC needs both positive and negative labels")
    rank_sum = float(_midranks(s)[y == 1].sum())
    return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def pr_auc(scores, labels) -> float:
    """Average precision: sum over distinct thresholds of recall gain times precision."""
    s, y = _check(scores, labels)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise UndefinedMetricError("PR-AUC needs at least one positive label")
    order = np.argsort(-s, kind="mergesort")
    s_sorted, y_sorted = s[order], y[order]
    last_of_group = np.concatenate([np.flatnonzero(np.diff(s_sorted)), [len(s) - 1]])
    tp = np.cumsum(y_sorted)[last_of_group]
    fp = (last_of_group + 1) - tp
    prev_tp = np.concatenate([[0], tp[:-1]])
    terms = [float(dtp) / n_pos * (float(t) / float(t + f))
             for dtp, t, f in zip(tp - prev_tp, tp, fp) if dtp]
    return math.fsum(terms)


def ece(probs, labels, n_bins: int = 10) -> float:
    """Expected calibration error over ``n_bins`` equal-width probability bins."""
    p, y = _check(probs, labels)
    if ((p < 0) | (p > 1)).any():
        raise ValueError("probabilities must lie in [0, 1]")
    bins = np.minimum((p * n_bins).astype(np.int64), n_bins - 1)
    total = 0.0
    for b in range(n_bins):
        sel = bins == b
        n_b = int(sel.sum())
        if n_b:
            total += n_b / len(p) * abs(y[sel].mean() - p[sel].mean())
    return float(total)


def _bce(p: np.ndarray, y: np.ndarray) -> float:
    p = np.clip(p, PROB_CLAMP, 1 - PROB_CLAMP)
    return float(-np.mean(y * np.log(p) + (1 - y) * np.log(1 - p)))


def nce(probs, labels) -> float:
    """Model cross-entropy divided by the cross-entropy of predicting the dataset base rate."""
    p, y = _check(probs, labels)
    base = float(y.mean())
    ref = _bce(np.full_like(p, base), y)
    if ref == 0.0:
        raise UndefinedMetricError("NCE is undefined when every label is identical")
    return _bce(p, y) / ref


@dataclass
class MetricReport:
    roc_auc: float
    pr_auc: float
    ece: float
    nce: float
    n_pos: int
    n_neg: int

    def as_dict(self) -> dict:
        return asdict(self)


def evaluate(probs, labels, n_bins: int = 10, scores=None) -> MetricReport:
    """Ranking metrics use ``scores`` when given (any order-preserving source of
    ``probs``, such as logits); calibration metrics always use ``probs``."""
    p, y = _check(probs, labels)
    r = p if scores is None else _check(scores, labels)[0]
    return MetricReport(roc_auc(r, y), pr_auc(r, y), ece(p, y, n_bins), nce(p, y),
                        int(y.sum()), int(len(y) - y.sum()))
