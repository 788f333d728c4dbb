"""Ranking metric and batched scoring."""
from __future__ import annotations

import numpy as np

from . import numerics as nx


class UndefinedMetricError(ValueError):
    pass


def auc(scores, labels) -> float:
    """P(random positive scores above random negative), ties count one half.

    Mann-Whitney rank-sum with mid-ranks for tied scores, O(n log n).
    """
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if s.shape != y.shape:
        raise ValueError(f"scores {s.shape} and labels {y.shape} differ in length")
    pos = y == 1
    n_pos = int(pos.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError(
            f"AUC undefined with {n_pos} positive and {n_neg} negative labels")
    order = np.argsort(s, kind="mergesort")
    sorted_s = s[order]
    # mid-rank of each tie group, ranks starting at 1
    starts = np.flatnonzero(np.r_[True, sorted_s[1:] != sorted_s[:-1]])
    ends = np.r_[starts[1:], s.size]
    group_rank = (starts + 1 + ends) / 2.0
    ranks = np.empty(s.size)
    ranks[order] = np.repeat(group_rank, ends - starts)
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def auc_pairwise(scores, labels) -> float:
    """O(n^2) pair count; reference for ``auc``."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    p, n = s[y == 1], s[y == 0]
    if p.size == 0 or n.size == 0:
        raise UndefinedMetricError("AUC undefined for a single class")
    wins = (p[:, None] > n[None, :]).sum() + 0.5 * (p[:, None] == n[None, :]).sum()
    return float(wins / (p.size * n.size))


def predict_logits(model, batch, domain="target", batch_size=8192) -> np.ndarray:
    n = len(batch)
    out = np.empty((n, 1))
    for lo in range(0, n, batch_size):
        idx = np.arange(lo, min(lo + batch_size, n))
        out[idx] = model.predict_logits(batch.take(idx), domain)
    return out


def predict_proba(model, batch, domain="target", batch_size=8192) -> np.ndarray:
    return nx.sigmoid(predict_logits(model, batch, domain, batch_size))
