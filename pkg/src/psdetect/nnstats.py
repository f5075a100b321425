"""K-nearest-neighbour clustering statistics and Spearman rank correlation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree
from scipy.stats import rankdata

__all__ = ["KnnSummary", "UndefinedStatisticError", "knn_mean_distances", "knn_table", "spearman_rho"]


class UndefinedStatisticError(ValueError):
    """Rank correlation with a constant argument."""


@dataclass(frozen=True, eq=False)
class KnnSummary:
    k: int
    mean_distances: np.ndarray
    indices: np.ndarray
    has_ties: bool = False


def _points(pattern):
    pts = getattr(pattern, "points", pattern)
    return np.asarray(pts, dtype=float).reshape(-1, 2)


def _sorted_neighbours(tree, pts, k):
    """Neighbour lists (self removed) sorted by (distance, index), length k."""
    n = pts.shape[0]
    q = min(n, k + 2)
    dist, idx = tree.query(pts, k=q)
    dist = np.atleast_2d(dist).reshape(n, q)
    idx = np.atleast_2d(idx).reshape(n, q)
    out_d = np.empty((n, k))
    out_i = np.empty((n, k), dtype=np.intp)
    rows = np.arange(n)
    for i in rows:
        d, j = dist[i], idx[i]
        mask = j != i
        d, j = d[mask], j[mask]
        # a tie straddling the cut-off needs the full candidate set
        if d.size > k and d[k - 1] == d[k] or d.size < k:
            d = np.hypot(*(pts - pts[i]).T)
            j = np.arange(n)
            d, j = d[j != i], j[j != i]
        order = np.lexsort((j, d))[:k]
        out_d[i] = d[order]
        out_i[i] = j[order]
    return out_d, out_i


def knn_mean_distances(pattern, k: int) -> KnnSummary:
    """Mean distance from every point to its k nearest other points (no edge correction)."""
    pts = _points(pattern)
    n = pts.shape[0]
    k = int(k)
    if not 1 <= k <= n - 1:
        raise ValueError(f"k must lie in [1, {n - 1}] for a pattern of {n} points, got {k}")
    tree = cKDTree(pts)
    d, idx = _sorted_neighbours(tree, pts, k)
    ties = bool(np.any(d[:, 0] == 0.0))
    return KnnSummary(k, d.mean(axis=1), idx, ties)


def knn_table(pattern, k_values):
    """``(n, len(k_values))`` matrix of K-NN mean distances from one tree query."""
    pts = _points(pattern)
    n = pts.shape[0]
    k_values = [int(k) for k in k_values]
    kmax = max(k_values)
    if min(k_values) < 1 or kmax > n - 1:
        raise ValueError(f"k values must lie in [1, {n - 1}] for a pattern of {n} points")
    dist, _ = cKDTree(pts).query(pts, k=kmax + 1)
    dist = np.asarray(dist).reshape(n, kmax + 1)[:, 1:]
    csum = np.cumsum(dist, axis=1)
    return np.column_stack([csum[:, k - 1] / k for k in k_values])


def spearman_rho(a, b) -> float:
    """Pearson correlation of mid-ranks."""
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    if a.size != b.size:
        raise ValueError("vectors must have equal length")
    if a.size < 3:
        raise ValueError("need at least 3 observations")
    ra = rankdata(a)
    rb = rankdata(b)
    ra -= ra.mean()
    rb -= rb.mean()
    saa = ra @ ra
    sbb = rb @ rb
    if saa == 0 or sbb == 0:
        raise UndefinedStatisticError("rank correlation undefined: an argument has zero rank variance")
    # one square root keeps identical rankings at exactly +-1
    return float(np.clip((ra @ rb) / np.sqrt(saa * sbb), -1.0, 1.0))
