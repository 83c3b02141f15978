"""Statistics-based pose evaluators and deterministic best-pose selection.

Every evaluator maps (context, pose) to a real score where higher is
better; MAE/MSE are truncated, normalized, *summed* scores rather than raw
error means, so a pose is never rewarded for having one lucky inlier.
Scoring is stateless over an immutable context.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Protocol

import numpy as np
from numpy.typing import NDArray

from . import spatial
from .estimators import CandidatePoseSet
from .geom3d import CorrespondenceSet, PointCloud, RigidTransform, apply_to_points, invert


@dataclass
class EvaluationContext:
    """Shared inputs for scoring candidate poses on one cloud pair."""

    src: PointCloud
    tgt: PointCloud
    corrs: CorrespondenceSet
    inlier_eps: float = 0.1
    tgt_index: spatial.SpatialIndex = None  # built over tgt if omitted
    _src_index: spatial.SpatialIndex = field(default=None, repr=False)

    def __post_init__(self):
        if self.tgt_index is None:
            self.tgt_index = spatial.build(self.tgt)
        elif self.tgt_index.points.shape != self.tgt.points.shape or \
                not np.array_equal(self.tgt_index.points, self.tgt.points):
            raise ValueError("tgt_index must be built over exactly tgt")
        self.corrs.validate_against(self.src, self.tgt)

    @property
    def src_index(self) -> spatial.SpatialIndex:
        if self._src_index is None:
            self._src_index = spatial.build(self.src)
        return self._src_index

    def corr_residuals(self, T: RigidTransform) -> NDArray[np.float64]:
        p = apply_to_points(T, self.src.points[self.corrs.pairs[:, 0]])
        q = self.tgt.points[self.corrs.pairs[:, 1]]
        return np.linalg.norm(p - q, axis=1)


def cc_score(ctx: EvaluationContext, T: RigidTransform) -> float:
    """Consistent-correspondence count: pairs with residual < inlier_eps."""
    if len(ctx.corrs) == 0:
        raise ValueError("cc_score requires putative correspondences")
    return float(np.sum(ctx.corr_residuals(T) < ctx.inlier_eps))


def mae_score(ctx: EvaluationContext, T: RigidTransform) -> float:
    """Truncated linear score: sum over inliers of (eps - r) / eps."""
    if len(ctx.corrs) == 0:
        raise ValueError("mae_score requires putative correspondences")
    r = ctx.corr_residuals(T)
    inl = r < ctx.inlier_eps
    return float(np.sum((ctx.inlier_eps - r[inl]) / ctx.inlier_eps))


def mse_score(ctx: EvaluationContext, T: RigidTransform) -> float:
    """Truncated quadratic score: sum over inliers of ((eps - r) / eps)^2."""
    if len(ctx.corrs) == 0:
        raise ValueError("mse_score requires putative correspondences")
    r = ctx.corr_residuals(T)
    inl = r < ctx.inlier_eps
    return float(np.sum(((ctx.inlier_eps - r[inl]) / ctx.inlier_eps) ** 2))


def tcd_score(ctx: EvaluationContext, T: RigidTransform,
              trunc: float = 0.3) -> float:
    """Negated symmetric truncated chamfer distance (higher is better).

    Forward: source points under T against the target cloud; reverse:
    target points under T^-1 against the source cloud; both means are
    truncated at ``trunc`` and averaged.
    """
    fwd_pts = apply_to_points(T, ctx.src.points)
    _, d_fwd = ctx.tgt_index.knn_batch(fwd_pts, 1)
    rev_pts = apply_to_points(invert(T), ctx.tgt.points)
    _, d_rev = ctx.src_index.knn_batch(rev_pts, 1)
    fwd = np.minimum(d_fwd[:, 0], trunc).mean()
    rev = np.minimum(d_rev[:, 0], trunc).mean()
    return float(-(fwd + rev) / 2.0)


def select_best(scores) -> int:
    """Index of the maximum score; exact ties resolve to the lowest index."""
    s = np.asarray(scores, dtype=np.float64)
    if s.size == 0:
        raise ValueError("select_best requires at least one score")
    return int(np.argmax(s))


@dataclass(frozen=True)
class ScoredPoses:
    """Candidate poses with one score each and the winning index."""

    poses: CandidatePoseSet
    scores: tuple[float, ...]
    best_index: int

    def __post_init__(self):
        if len(self.scores) != len(self.poses):
            raise ValueError("one score per pose required")
        finite = [s for s in self.scores if np.isfinite(s)]
        if not finite:
            raise ValueError("at least one finite score required")
        if self.best_index != select_best(self.scores):
            raise ValueError("best_index must be the argmax of scores")

    @property
    def best_pose(self) -> RigidTransform:
        return self.poses.poses[self.best_index]

    @staticmethod
    def from_scores(poses: CandidatePoseSet, scores) -> "ScoredPoses":
        scores = tuple(float(s) for s in scores)
        return ScoredPoses(poses, scores, select_best(scores))


class PoseEvaluator(Protocol):
    """Common scoring interface for statistics-based and learned evaluators."""

    name: str

    def score_candidates(self, ctx: EvaluationContext,
                         poses: CandidatePoseSet) -> ScoredPoses: ...


@dataclass
class StatisticEvaluator:
    """Wraps one of the per-pose scoring functions above."""

    name: str
    _fn: callable

    def score_candidates(self, ctx: EvaluationContext,
                         poses: CandidatePoseSet) -> ScoredPoses:
        return ScoredPoses.from_scores(poses, [self._fn(ctx, T) for T in poses.poses])


def make_evaluator(name: str, tcd_trunc: float = 0.3) -> StatisticEvaluator:
    """Evaluator factory for the classic scorers: cc, mae, mse, tcd."""
    table = {
        "cc": cc_score,
        "mae": mae_score,
        "mse": mse_score,
        "tcd": lambda ctx, T: tcd_score(ctx, T, tcd_trunc),
    }
    if name not in table:
        raise ValueError(f"unknown evaluator {name!r}; choose from {sorted(table)}")
    return StatisticEvaluator(name, table[name])
