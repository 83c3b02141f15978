"""Candidate-pose generation from correspondences.

Pose selection is deliberately *not* done here: estimators emit the full
hypothesis set and the evaluators choose among them. All estimators are
seeded and emit poses in a fixed order, so runs are reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray

from .geom3d import (CorrespondenceSet, PointCloud, RigidTransform,
                     apply_to_points, compose)


class DegenerateConfigurationError(ValueError):
    """Raised when correspondences cannot constrain a rigid transform."""


@dataclass(frozen=True)
class CandidatePoseSet:
    """Candidate rigid transforms plus a provenance tag per pose."""

    poses: tuple[RigidTransform, ...]
    provenance: tuple[str, ...]

    def __post_init__(self):
        if len(self.poses) != len(self.provenance):
            raise ValueError("one provenance tag per pose required")
        if len(self.poses) == 0:
            raise ValueError("candidate pose set must be non-empty")

    def __len__(self) -> int:
        return len(self.poses)


def merge(*sets: CandidatePoseSet) -> CandidatePoseSet:
    poses: list[RigidTransform] = []
    prov: list[str] = []
    for s in sets:
        poses.extend(s.poses)
        prov.extend(s.provenance)
    return CandidatePoseSet(tuple(poses), tuple(prov))


def kabsch(corrs: CorrespondenceSet, src: PointCloud, tgt: PointCloud,
           weights: NDArray | None = None) -> RigidTransform:
    """Weighted least-squares rigid alignment of corresponding pairs.

    Minimizes sum_i w_i ||R p_i + t - q_i||^2; the rotation's determinant is
    corrected to +1 by flipping the smallest singular direction.
    """
    corrs.validate_against(src, tgt)
    p = src.points[corrs.pairs[:, 0]]
    q = tgt.points[corrs.pairs[:, 1]]
    if weights is None:
        w = np.ones(len(corrs))
    else:
        w = np.asarray(weights, dtype=np.float64).reshape(-1)
        if w.shape[0] != len(corrs):
            raise ValueError("one weight per correspondence required")
        if (w < 0).any():
            raise ValueError("weights must be non-negative")
    total = w.sum()
    if np.count_nonzero(w) < 3 or total <= 0.0:
        raise DegenerateConfigurationError("need >= 3 pairs with positive weight")
    wn = w / total
    p_bar = wn @ p
    q_bar = wn @ q
    H = (wn[:, None] * (p - p_bar)).T @ (q - q_bar)
    U, S, Vt = np.linalg.svd(H)
    if S[1] <= 1e-12 * max(S[0], 1e-300):
        raise DegenerateConfigurationError(
            "rank-deficient cross-covariance (collinear or coincident pairs)")
    D = np.eye(3)
    D[2, 2] = np.sign(np.linalg.det(Vt.T @ U.T))
    R = Vt.T @ D @ U.T
    t = q_bar - R @ p_bar
    return RigidTransform(R, t)


def alignment_error(T: RigidTransform, corrs: CorrespondenceSet,
                    src: PointCloud, tgt: PointCloud,
                    weights: NDArray | None = None) -> float:
    """The weighted Kabsch objective value at a given pose."""
    p = apply_to_points(T, src.points[corrs.pairs[:, 0]])
    q = tgt.points[corrs.pairs[:, 1]]
    w = np.ones(len(corrs)) if weights is None else np.asarray(weights, dtype=np.float64)
    return float(np.sum(w * np.sum((p - q) ** 2, axis=1)))


def _count_consistent(T: RigidTransform, p: NDArray, q: NDArray, eps: float) -> int:
    r = np.linalg.norm(p @ T.rotation.T + T.translation - q, axis=1)
    return int(np.sum(r < eps))


def ransac(corrs: CorrespondenceSet, src: PointCloud, tgt: PointCloud,
           iterations: int, inlier_eps: float, seed: int,
           max_retries: int = 50) -> CandidatePoseSet:
    """Minimal-sample hypotheses: 3 random pairs per iteration, Kabsch-solved.

    Returns *all* hypotheses (one per iteration); each provenance tag
    records the iteration and the pose's consistent-correspondence count at
    ``inlier_eps``. Degenerate samples are re-drawn up to ``max_retries``.
    """
    if len(corrs) < 3:
        raise DegenerateConfigurationError("ransac needs >= 3 correspondences")
    rng = np.random.default_rng(seed)
    p_all = src.points[corrs.pairs[:, 0]]
    q_all = tgt.points[corrs.pairs[:, 1]]
    poses: list[RigidTransform] = []
    prov: list[str] = []
    for it in range(iterations):
        pose = None
        for _ in range(max_retries):
            pick = rng.choice(len(corrs), size=3, replace=False)
            sub = CorrespondenceSet(corrs.pairs[np.sort(pick)])
            try:
                pose = kabsch(sub, src, tgt)
                break
            except DegenerateConfigurationError:
                continue
        if pose is None:
            continue
        cc = _count_consistent(pose, p_all, q_all, inlier_eps)
        poses.append(pose)
        prov.append(f"ransac-iter-{it}:cc={cc}")
    if not poses:
        raise DegenerateConfigurationError("all ransac samples were degenerate")
    return CandidatePoseSet(tuple(poses), tuple(prov))


@dataclass(frozen=True)
class Sc2Params:
    """Knobs for the compatibility-graph estimator."""

    dist_sigma: float = 0.1
    seed_count: int = 20
    local_k: int = 20
    power_iters: int = 30
    seed: int = 0
    # used only when the compatibility matrix is all-zero
    fallback_iterations: int = 50
    fallback_inlier_eps: float = 0.1


def compatibility_matrix(corrs: CorrespondenceSet, src: PointCloud,
                         tgt: PointCloud, dist_sigma: float) -> NDArray[np.float64]:
    """First-order length-consistency matrix M1 in [0, 1], unit diagonal."""
    p = src.points[corrs.pairs[:, 0]]
    q = tgt.points[corrs.pairs[:, 1]]
    dp = np.linalg.norm(p[:, None, :] - p[None, :, :], axis=2)
    dq = np.linalg.norm(q[:, None, :] - q[None, :, :], axis=2)
    delta = np.abs(dp - dq)
    return np.maximum(0.0, 1.0 - (delta / dist_sigma) ** 2)


def power_iteration(M: NDArray[np.float64], iters: int) -> NDArray[np.float64]:
    """Leading eigenvector of a symmetric non-negative matrix, unit norm."""
    v = np.ones(M.shape[0]) / np.sqrt(M.shape[0])
    for _ in range(iters):
        v = M @ v
        n = np.linalg.norm(v)
        if n == 0.0:
            return np.ones(M.shape[0]) / np.sqrt(M.shape[0])
        v = v / n
    return v


def sc2_estimate(corrs: CorrespondenceSet, src: PointCloud, tgt: PointCloud,
                 params: Sc2Params = Sc2Params()) -> CandidatePoseSet:
    """Second-order spatial-compatibility candidate poses.

    Pipeline: soft length-consistency M1; hard graph M1 > 0.5; second-order
    measure M2 = M1 * (common compatible neighbor counts); leading
    eigenvector by power iteration; the top-weighted correspondences seed
    local weighted Kabsch solves (one candidate pose per seed).
    """
    if len(corrs) < 3:
        raise DegenerateConfigurationError("sc2 needs >= 3 correspondences")
    m1 = compatibility_matrix(corrs, src, tgt, params.dist_sigma)
    hard = (m1 > 0.5).astype(np.float64)
    # the diagonal of hard is structurally 1; "no compatibility" means the
    # graph has no edges at all
    if not (hard - np.diag(np.diag(hard))).any():
        fb = ransac(corrs, src, tgt, params.fallback_iterations,
                    params.fallback_inlier_eps, params.seed)
        prov = tuple(f"sc2-fallback:{p}" for p in fb.provenance)
        return CandidatePoseSet(fb.poses, prov)
    m2 = m1 * (hard @ hard)
    lead = power_iteration(m2, params.power_iters)
    order = np.lexsort((np.arange(len(corrs)), -lead))
    seeds = order[:min(params.seed_count, len(corrs))]
    poses: list[RigidTransform] = []
    prov: list[str] = []
    for rank, s in enumerate(seeds):
        row = m2[s]
        local = np.lexsort((np.arange(len(corrs)), -row))[:min(params.local_k, len(corrs))]
        local = np.sort(local)
        sub = CorrespondenceSet(corrs.pairs[local])
        try:
            pose = kabsch(sub, src, tgt, weights=lead[local])
        except DegenerateConfigurationError:
            continue
        poses.append(pose)
        prov.append(f"sc2-seed-{rank}")
    if not poses:
        fb = ransac(corrs, src, tgt, params.fallback_iterations,
                    params.fallback_inlier_eps, params.seed)
        prov2 = tuple(f"sc2-fallback:{p}" for p in fb.provenance)
        return CandidatePoseSet(fb.poses, prov2)
    return CandidatePoseSet(tuple(poses), tuple(prov))


def _random_unit(rng: np.random.Generator) -> NDArray[np.float64]:
    v = rng.normal(size=3)
    return v / np.linalg.norm(v)


def perturb_gt_poses(T_gt: RigidTransform, n_small: int, n_large: int,
                     small_range_deg=(0.0, 15.0), large_range_deg=(15.0, 60.0),
                     trans_scale: float = 0.5, seed: int = 0) -> CandidatePoseSet:
    """Poses dT o T_gt with random-axis rotations in the given angle ranges.

    Translations are uniform in a ball of radius ``trans_scale``. The
    provenance records the range bucket of each pose.
    """
    for lo, hi in (small_range_deg, large_range_deg):
        if lo < 0 or hi < lo:
            raise ValueError("angle ranges must be ordered and non-negative")
    if n_small < 0 or n_large < 0 or n_small + n_large == 0:
        raise ValueError("need a non-negative, non-empty perturbation count")
    rng = np.random.default_rng(seed)
    poses: list[RigidTransform] = []
    prov: list[str] = []
    for bucket, count, (lo, hi) in (("small", n_small, small_range_deg),
                                    ("large", n_large, large_range_deg)):
        for i in range(count):
            angle = np.radians(rng.uniform(lo, hi))
            axis = _random_unit(rng)
            radius = trans_scale * rng.uniform(0.0, 1.0) ** (1.0 / 3.0)
            dt = _random_unit(rng) * radius if trans_scale > 0 else np.zeros(3)
            delta = RigidTransform.from_axis_angle(axis, angle, dt)
            poses.append(compose(delta, T_gt))
            prov.append(f"perturb-{bucket}-{i}")
    return CandidatePoseSet(tuple(poses), tuple(prov))
