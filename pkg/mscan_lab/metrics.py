"""
Ranking metrics: AUC via the Mann-Whitney rank sum and relative AUC improvement.
"""

import math
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

from .errors import UndefinedMetricError


def _as_arrays(scores: Sequence[float], labels: Sequence[int]):
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise UndefinedMetricError(f"scores {scores.shape} and labels {labels.shape} must be equal-length vectors")
    if np.isnan(scores).any():
        raise UndefinedMetricError("scores contain NaN")
    if not np.isin(labels, (0, 1)).all():
        raise UndefinedMetricError("labels must be 0 or 1")
    positive = labels == 1
    n_pos = int(positive.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError(
            f"AUC needs at least one positive and one negative label (got {n_pos} / {n_neg})")
    return scores, positive, n_pos, n_neg


def auc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """
    Probability that a random positive outranks a random negative, ties at one half.

    Args:
        scores: Real-valued predictions
        labels: Binary labels

    Returns:
        AUC in [0, 1]
    """
    scores, positive, n_pos, n_neg = _as_arrays(scores, labels)
    # average ranks give ties half credit
    ranks = rankdata(scores, method='average')
    u_statistic = ranks[positive].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u_statistic / (n_pos * n_neg))


def auc_bruteforce(scores: Sequence[float], labels: Sequence[int]) -> float:
    """O(n^2) pair count; reference for auc()."""
    scores, positive, n_pos, n_neg = _as_arrays(scores, labels)
    pos, neg = scores[positive], scores[~positive]
    wins = 0
    ties = 0
    for p in pos:
        wins += int(np.sum(p > neg))
        ties += int(np.sum(p == neg))
    return float((wins + 0.5 * ties) / (n_pos * n_neg))


def rel_impr(auc_model: float, auc_base: float) -> float:
    """Relative AUC improvement in percent: 100 * (auc_model / auc_base - 1)."""
    if not auc_base > 0 or not math.isfinite(auc_base):
        raise UndefinedMetricError(f"baseline AUC must be positive, got {auc_base}")
    return 100.0 * (auc_model / auc_base - 1.0)
