"""Evaluation metrics."""

import numpy as np
from scipy.stats import rankdata


def roc_auc(scores, labels):
    """Area under the ROC curve via the Mann-Whitney statistic.

    Tied scores share their midrank, so each positive/negative tie counts 1/2.
    Returns NaN when either class is absent.
    """
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel().astype(bool)
    if scores.shape != labels.shape:
        raise ValueError("scores and labels must have the same length")
    n_pos, n_neg = int(labels.sum()), int((~labels).sum())
    if n_pos == 0 or n_neg == 0:
        return float("nan")
    ranks = rankdata(scores, method="average")
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2
    return float(u / (n_pos * n_neg))


def pairwise_auc(scores, labels):
    """Quadratic-time AUC by direct comparison of every positive/negative pair."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel().astype(bool)
    pos, neg = scores[labels], scores[~labels]
    if not len(pos) or not len(neg):
        return float("nan")
    # integer half-credits keep the result exact up to the final division
    half_credits = 2 * int((pos[:, None] > neg[None, :]).sum()) + int((pos[:, None] == neg[None, :]).sum())
    return half_credits / (2 * len(pos) * len(neg))


def false_positive_rate(z, labels):
    z = np.asarray(z).astype(bool)
    benign = ~np.asarray(labels).astype(bool)
    return float(z[benign].mean()) if benign.any() else float("nan")
