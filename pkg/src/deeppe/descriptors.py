"""Handcrafted local descriptors and correspondence extraction.

Normals come from the smallest-eigenvalue eigenvector of the k-NN
covariance, oriented toward a fixed viewpoint (origin by default). FPFH is
the standard two-pass construction: per-point Darboux-angle histograms
(alpha, phi, theta; 11 bins each), then distance-weighted neighbor
accumulation, each sub-histogram normalized to percentages (sums to 100).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray
from scipy.spatial.distance import cdist

from . import spatial
from .geom3d import CorrespondenceSet, PointCloud, RigidTransform, apply_to_points

FPFH_BINS = 11
FPFH_DIM = 3 * FPFH_BINS


@dataclass(frozen=True)
class FeatureCloud:
    """A cloud with one fixed-length descriptor per point.

    ``flags`` marks points whose descriptor could not be computed
    (no neighbors in radius); their feature rows are zero.
    """

    cloud: PointCloud
    features: NDArray[np.float64]
    flags: NDArray[np.bool_]

    def __post_init__(self):
        if self.features.shape[0] != len(self.cloud):
            raise ValueError("feature count must equal point count")
        if not np.isfinite(self.features).all():
            raise ValueError("features contain non-finite entries")


def estimate_normals(cloud: PointCloud, k: int,
                     viewpoint=(0.0, 0.0, 0.0)) -> tuple[PointCloud, NDArray[np.bool_]]:
    """Per-point normals from k-NN covariance, oriented toward ``viewpoint``.

    Points with fewer than 3 distinct neighbors get the +z normal and a
    degenerate flag. Returns (cloud with normals, degenerate flags).
    """
    if len(cloud) < 3:
        # every neighborhood is degenerate
        nrm = np.tile([0.0, 0.0, 1.0], (len(cloud), 1))
        return PointCloud(cloud.points, nrm), np.ones(len(cloud), dtype=bool)
    if k < 3:
        raise ValueError(f"k must be >= 3, got {k}")
    index = spatial.build(cloud)
    idx, _ = index.knn_batch(cloud.points, min(k, len(cloud)))
    vp = np.asarray(viewpoint, dtype=np.float64).reshape(3)
    normals = np.empty_like(cloud.points)
    degenerate = np.zeros(len(cloud), dtype=bool)
    for i in range(len(cloud)):
        nbrs = cloud.points[idx[i]]
        if np.unique(nbrs, axis=0).shape[0] < 3:
            normals[i] = (0.0, 0.0, 1.0)
            degenerate[i] = True
            continue
        centered = nbrs - nbrs.mean(axis=0)
        cov = centered.T @ centered
        _, vecs = np.linalg.eigh(cov)
        n = vecs[:, 0]  # smallest eigenvalue
        if n @ (vp - cloud.points[i]) < 0.0:
            n = -n
        normals[i] = n / np.linalg.norm(n)
    return PointCloud(cloud.points, normals), degenerate


def _pair_features(p, n_p, q, n_q):
    """Darboux-frame angles (alpha, phi, theta) for one ordered point pair.

    Returns None for degenerate pairs (coincident points or direction
    parallel to the source normal).
    """
    d_vec = q - p
    d = np.linalg.norm(d_vec)
    if d < 1e-12:
        return None
    u = n_p
    v = np.cross(d_vec / d, u)
    v_norm = np.linalg.norm(v)
    if v_norm < 1e-12:
        return None
    v = v / v_norm
    w = np.cross(u, v)
    alpha = float(v @ n_q)
    phi = float(u @ d_vec) / d
    theta = float(np.arctan2(w @ n_q, u @ n_q))
    return alpha, phi, theta


def _bin3(alpha: float, phi: float, theta: float) -> tuple[int, int, int]:
    b_a = min(int((alpha + 1.0) / 2.0 * FPFH_BINS), FPFH_BINS - 1)
    b_p = min(int((phi + 1.0) / 2.0 * FPFH_BINS), FPFH_BINS - 1)
    b_t = min(int((theta + np.pi) / (2.0 * np.pi) * FPFH_BINS), FPFH_BINS - 1)
    return max(b_a, 0), max(b_p, 0), max(b_t, 0)


def fpfh(cloud: PointCloud, radius: float, bins: int = FPFH_BINS) -> FeatureCloud:
    """FPFH descriptors for a cloud with normals.

    Neighborhoods are radius-limited; accumulation weight is 1/distance;
    each of the three sub-histograms is normalized to sum to 100.
    """
    if cloud.normals is None:
        raise ValueError("fpfh requires normals; run estimate_normals first")
    if radius <= 0.0:
        raise ValueError(f"radius must be positive, got {radius}")
    if bins != FPFH_BINS:
        raise ValueError("descriptor layout is fixed at 11 bins per angle")
    n = len(cloud)
    index = spatial.build(cloud)
    neighbors: list[NDArray[np.int64]] = []
    neighbor_dists: list[NDArray[np.float64]] = []
    for i in range(n):
        idx, dist = index.radius_search(cloud.points[i], radius)
        keep = idx != i
        neighbors.append(idx[keep])
        neighbor_dists.append(dist[keep])

    spfh = np.zeros((n, FPFH_DIM))
    for i in range(n):
        for j in neighbors[i]:
            feats = _pair_features(cloud.points[i], cloud.normals[i],
                                   cloud.points[j], cloud.normals[j])
            if feats is None:
                continue
            b_a, b_p, b_t = _bin3(*feats)
            spfh[i, b_a] += 1.0
            spfh[i, FPFH_BINS + b_p] += 1.0
            spfh[i, 2 * FPFH_BINS + b_t] += 1.0

    out = np.zeros((n, FPFH_DIM))
    flags = np.zeros(n, dtype=bool)
    for i in range(n):
        if neighbors[i].size == 0:
            flags[i] = True
            continue
        acc = spfh[i].copy()
        weights = 1.0 / np.maximum(neighbor_dists[i], 1e-12)
        acc += (weights[:, None] * spfh[neighbors[i]]).sum(axis=0) / neighbors[i].size
        for b in range(3):
            block = acc[b * FPFH_BINS:(b + 1) * FPFH_BINS]
            total = block.sum()
            if total > 0.0:
                block *= 100.0 / total
        out[i] = acc
    return FeatureCloud(cloud, out, flags)


def match_features(a: FeatureCloud, b: FeatureCloud,
                   mutual: bool = False) -> CorrespondenceSet:
    """Nearest-neighbor matching in feature space (exact, exhaustive).

    Non-mutual (the default) keeps one pair per source point, emulating the
    low-inlier regime; ``mutual`` keeps only mutually-nearest pairs. Ties
    resolve to the lower index.
    """
    if len(a.cloud) == 0 or len(b.cloud) == 0:
        raise ValueError("match_features requires non-empty feature clouds")
    d = cdist(a.features, b.features)
    nn_ab = np.argmin(d, axis=1)
    if not mutual:
        pairs = np.stack([np.arange(len(a.cloud)), nn_ab], axis=1)
        return CorrespondenceSet(pairs.astype(np.int64))
    nn_ba = np.argmin(d, axis=0)
    src = np.flatnonzero(nn_ba[nn_ab] == np.arange(len(a.cloud)))
    pairs = np.stack([src, nn_ab[src]], axis=1)
    return CorrespondenceSet(pairs.astype(np.int64))


def inlier_ratio(corrs: CorrespondenceSet, T_gt: RigidTransform,
                 src: PointCloud, tgt: PointCloud, tau1: float = 0.1) -> float:
    """Fraction of pairs with residual under T_gt strictly below tau1."""
    if len(corrs) == 0:
        raise ValueError("inlier_ratio requires a non-empty correspondence set")
    p = apply_to_points(T_gt, src.points[corrs.pairs[:, 0]])
    q = tgt.points[corrs.pairs[:, 1]]
    r = np.linalg.norm(p - q, axis=1)
    return float(np.mean(r < tau1))
