"""Exact spatial index for k-NN and radius queries.

Backed by a balanced kd-tree (scipy's cKDTree, median-split) for candidate
generation; distances are recomputed with numpy and ties are broken by the
lower original index, so query results are exact and bit-reproducible
regardless of tree internals. Squared distances are used internally; the
interface reports true distances.

The index is immutable after build; concurrent queries are safe.
"""

from __future__ import annotations

import numpy as np
from numpy.typing import NDArray
from scipy.spatial import cKDTree

from .geom3d import PointCloud


class SpatialIndex:
    """kd-tree over a cloud's points; queries return original indices."""

    def __init__(self, points: NDArray[np.float64]):
        pts = np.ascontiguousarray(points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3 or pts.shape[0] == 0:
            raise ValueError(f"index requires a non-empty (N, 3) array, got {pts.shape}")
        self._points = pts
        self._tree = cKDTree(pts)

    def __len__(self) -> int:
        return self._points.shape[0]

    @property
    def points(self) -> NDArray[np.float64]:
        return self._points

    def _order_exact(self, query: NDArray, cand: NDArray[np.int64], k: int):
        """Sort candidate indices by (distance, index) using numpy distances."""
        d2 = np.sum((self._points[cand] - query) ** 2, axis=1)
        order = np.lexsort((cand, d2))
        return cand[order][:k], np.sqrt(d2[order][:k])

    def knn(self, query, k: int):
        """k nearest neighbors of a single point.

        Returns (indices, distances) sorted ascending by distance; exact
        ties are broken by the lower original index. Exactly
        min(k, len(index)) results.
        """
        if k < 1:
            raise ValueError(f"k must be >= 1, got {k}")
        q = np.asarray(query, dtype=np.float64).reshape(3)
        n = len(self)
        kk = min(k, n)
        if kk == n:
            return self._order_exact(q, np.arange(n, dtype=np.int64), kk)
        # probe one extra neighbor to detect a tie spanning the cut boundary
        _, idx = self._tree.query(q, k=kk + 1)
        cand = np.asarray(idx, dtype=np.int64)
        d2 = np.sum((self._points[cand] - q) ** 2, axis=1)
        d2s = np.sort(d2)
        if d2s[kk - 1] == d2s[kk]:
            # boundary tie: fall back to an exhaustive ordering
            return self._order_exact(q, np.arange(n, dtype=np.int64), kk)
        return self._order_exact(q, cand, kk)

    def knn_batch(self, queries: NDArray, k: int):
        """Vectorized knn for (Q, 3) queries.

        Returns (indices, distances) arrays of shape (Q, min(k, N)) with the
        same ordering contract as :meth:`knn`.
        """
        qs = np.ascontiguousarray(queries, dtype=np.float64)
        if qs.ndim != 2 or qs.shape[1] != 3:
            raise ValueError(f"queries must have shape (Q, 3), got {qs.shape}")
        n = len(self)
        kk = min(max(k, 1), n)
        if kk == n:
            cand = np.broadcast_to(np.arange(n, dtype=np.int64), (qs.shape[0], n))
        else:
            _, idx = self._tree.query(qs, k=kk + 1)
            cand = np.asarray(idx, dtype=np.int64).reshape(qs.shape[0], kk + 1)
        diff = self._points[cand] - qs[:, None, :]
        d2 = (diff * diff).sum(axis=2)  # same summation order as the 1-query path
        # per-row sort by (d2, index); lexsort over the last axis
        order = np.lexsort((cand, d2), axis=-1)
        rows = np.arange(qs.shape[0])[:, None]
        cand_sorted = cand[rows, order]
        d2_sorted = d2[rows, order]
        if kk < n:
            # rows with a tie across the cut boundary need the exact fallback
            bad = d2_sorted[:, kk - 1] == d2_sorted[:, kk]
            cand_sorted = cand_sorted[:, :kk]
            d2_sorted = d2_sorted[:, :kk]
            for r in np.flatnonzero(bad):
                ci, di = self._order_exact(qs[r], np.arange(n, dtype=np.int64), kk)
                cand_sorted[r] = ci
                d2_sorted[r] = di * di
        return cand_sorted, np.sqrt(d2_sorted)

    def radius_search(self, query, r: float):
        """All points with true distance <= r, sorted by (distance, index)."""
        if r <= 0.0:
            raise ValueError(f"radius must be positive, got {r}")
        q = np.asarray(query, dtype=np.float64).reshape(3)
        # slightly inflated tree query, then exact numpy filtering
        cand = np.asarray(self._tree.query_ball_point(q, r * (1.0 + 1e-12) + 1e-300),
                          dtype=np.int64)
        if cand.size == 0:
            return cand, np.empty(0)
        d2 = np.sum((self._points[cand] - q) ** 2, axis=1)
        keep = d2 <= r * r
        cand, d2 = cand[keep], d2[keep]
        order = np.lexsort((cand, d2))
        return cand[order], np.sqrt(d2[order])


def build(cloud: PointCloud) -> SpatialIndex:
    """Build an index over all points of a non-empty cloud."""
    if len(cloud) == 0:
        raise ValueError("cannot build a spatial index over an empty cloud")
    return SpatialIndex(cloud.points)
