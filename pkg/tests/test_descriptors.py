import numpy as np
import pytest

from deeppe.descriptors import (FPFH_BINS, FPFH_DIM, estimate_normals, fpfh,
                                inlier_ratio, match_features, _bin3,
                                _pair_features)
from deeppe.geom3d import (CorrespondenceSet, PointCloud, RigidTransform,
                           apply_transform, random_rotation)


def fpfh_oracle(points, normals, radius):
    """Direct, unoptimized double-loop SPFH/FPFH computation."""
    n = len(points)
    spfh = np.zeros((n, FPFH_DIM))
    nbrs = [[] for _ in range(n)]
    dists = [[] for _ in range(n)]
    for i in range(n):
        for j in range(n):
            if i == j:
                continue
            d = np.linalg.norm(points[j] - points[i])
            if d <= radius:
                nbrs[i].append(j)
                dists[i].append(d)
                feats = _pair_features(points[i], normals[i], points[j], normals[j])
                if feats is None:
                    continue
                ba, bp, bt = _bin3(*feats)
                spfh[i, ba] += 1
                spfh[i, FPFH_BINS + bp] += 1
                spfh[i, 2 * FPFH_BINS + bt] += 1
    out = np.zeros((n, FPFH_DIM))
    for i in range(n):
        if not nbrs[i]:
            continue
        acc = spfh[i].copy()
        for j, d in zip(nbrs[i], dists[i]):
            acc += spfh[j] / max(d, 1e-12) / len(nbrs[i])
        for b in range(3):
            block = acc[b * FPFH_BINS:(b + 1) * FPFH_BINS]
            s = block.sum()
            if s > 0:
                block *= 100.0 / s
        out[i] = acc
    return out


def sphere_cloud(rng, n=300, radius=1.0):
    v = rng.normal(size=(n, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return PointCloud(v * radius)


class TestNormals:
    def test_planar_grid(self):
        xs, ys = np.meshgrid(np.linspace(0, 1, 8), np.linspace(0, 1, 8))
        pts = np.stack([xs.ravel(), ys.ravel(), np.zeros(64)], axis=1)
        c, flags = estimate_normals(PointCloud(pts), k=8, viewpoint=(0.5, 0.5, 5.0))
        assert not flags.any()
        np.testing.assert_allclose(np.abs(c.normals[:, 2]), 1.0, atol=1e-6)
        np.testing.assert_allclose(c.normals[:, :2], 0.0, atol=1e-6)

    def test_sphere_inward_radial(self):
        rng = np.random.default_rng(0)
        c = sphere_cloud(rng)
        with_n, flags = estimate_normals(c, k=12)  # viewpoint at origin
        inward = -c.points / np.linalg.norm(c.points, axis=1, keepdims=True)
        cosang = np.sum(with_n.normals * inward, axis=1).clip(-1, 1)
        ang = np.degrees(np.arccos(cosang))
        assert np.mean(ang < 5.0) >= 0.95

    def test_two_point_cloud_degenerate(self):
        c = PointCloud([[0.0, 0, 0], [1.0, 0, 0]])
        out, flags = estimate_normals(c, k=3)
        assert flags.all()
        np.testing.assert_array_equal(out.normals, [[0, 0, 1], [0, 0, 1]])

    def test_unit_norm(self):
        rng = np.random.default_rng(1)
        c = PointCloud(rng.uniform(-1, 1, (50, 3)))
        out, _ = estimate_normals(c, k=6)
        np.testing.assert_allclose(np.linalg.norm(out.normals, axis=1), 1.0, atol=1e-9)


class TestFpfh:
    def test_single_point_flagged_zero(self):
        c = PointCloud([[0.0, 0, 0]], normals=[[0.0, 0, 1]])
        fc = fpfh(c, radius=0.5)
        assert fc.flags[0]
        assert not fc.features.any()

    def test_deterministic(self):
        rng = np.random.default_rng(2)
        c, _ = estimate_normals(PointCloud(rng.uniform(0, 1, (60, 3))), k=8)
        a = fpfh(c, radius=0.4)
        b = fpfh(c, radius=0.4)
        np.testing.assert_array_equal(a.features, b.features)

    def test_matches_double_loop_oracle(self):
        rng = np.random.default_rng(3)
        c, _ = estimate_normals(PointCloud(rng.uniform(0, 1, (100, 3))), k=8)
        fc = fpfh(c, radius=0.35)
        expect = fpfh_oracle(c.points, c.normals, 0.35)
        np.testing.assert_allclose(fc.features, expect, atol=1e-9)

    def test_percentage_normalization(self):
        rng = np.random.default_rng(4)
        c, _ = estimate_normals(PointCloud(rng.uniform(0, 1, (80, 3))), k=8)
        fc = fpfh(c, radius=0.4)
        for b in range(3):
            block = fc.features[~fc.flags, b * FPFH_BINS:(b + 1) * FPFH_BINS]
            np.testing.assert_allclose(block.sum(axis=1), 100.0, atol=1e-6)

    def test_rigid_invariance_with_tracked_viewpoint(self):
        rng = np.random.default_rng(5)
        pts = rng.uniform(-0.5, 0.5, (70, 3))
        T = RigidTransform(random_rotation(rng), rng.uniform(-1, 1, 3))
        base_c, _ = estimate_normals(PointCloud(pts), k=8, viewpoint=(0, 0, 0))
        base = fpfh(base_c, radius=0.4)
        moved = apply_transform(T, PointCloud(pts))
        vp = T.rotation @ np.zeros(3) + T.translation
        moved_c, _ = estimate_normals(moved, k=8, viewpoint=vp)
        got = fpfh(moved_c, radius=0.4)
        np.testing.assert_allclose(got.features, base.features, atol=1e-6)

    def test_requires_normals(self):
        with pytest.raises(ValueError, match="normals"):
            fpfh(PointCloud([[0.0, 0, 0]]), radius=0.5)


class TestMatching:
    def _fc(self, feats):
        n = len(feats)
        cloud = PointCloud(np.zeros((n, 3)) + np.arange(n)[:, None])
        return_feats = np.asarray(feats, dtype=float)
        from deeppe.descriptors import FeatureCloud
        return FeatureCloud(cloud, return_feats, np.zeros(n, dtype=bool))

    def test_identical_features_identity_matching(self):
        rng = np.random.default_rng(6)
        feats = rng.uniform(0, 1, (20, 5))
        a, b = self._fc(feats), self._fc(feats)
        m = match_features(a, b)
        np.testing.assert_array_equal(m.pairs[:, 0], m.pairs[:, 1])

    def test_mutual_keeps_only_mutually_nearest(self):
        # construction: only the (0, 0) pair is mutually nearest
        a = self._fc([[0.0], [10.0], [20.0], [30.0], [40.0]])
        b = self._fc([[0.1], [12.0], [12.1], [12.2], [12.3]])
        m = match_features(a, b, mutual=True)
        # oracle: exhaustive mutual check
        da = np.abs(a.features - b.features.T)
        ab = np.argmin(da, axis=1)
        ba = np.argmin(da, axis=0)
        expect = [(i, ab[i]) for i in range(5) if ba[ab[i]] == i]
        assert [tuple(p) for p in m.pairs] == expect

    def test_non_mutual_cardinality(self):
        rng = np.random.default_rng(7)
        a = self._fc(rng.uniform(0, 1, (15, 4)))
        b = self._fc(rng.uniform(5, 6, (9, 4)))
        assert len(match_features(a, b)) == 15

    def test_mutual_subset_of_non_mutual(self):
        rng = np.random.default_rng(8)
        a = self._fc(rng.uniform(0, 1, (25, 4)))
        b = self._fc(rng.uniform(0, 1, (25, 4)))
        loose = {tuple(p) for p in match_features(a, b).pairs}
        tight = {tuple(p) for p in match_features(a, b, mutual=True).pairs}
        assert tight <= loose


class TestInlierRatio:
    def _setup(self, rng, n=10):
        src = PointCloud(rng.uniform(-1, 1, (n, 3)))
        T = RigidTransform(random_rotation(rng), rng.uniform(-1, 1, 3))
        tgt = apply_transform(T, src)
        corrs = CorrespondenceSet(np.stack([np.arange(n)] * 2, axis=1))
        return src, tgt, T, corrs

    def test_all_exact(self):
        rng = np.random.default_rng(9)
        src, tgt, T, corrs = self._setup(rng)
        assert inlier_ratio(corrs, T, src, tgt, tau1=0.1) == 1.0

    def test_all_outliers(self):
        rng = np.random.default_rng(10)
        src, tgt, T, corrs = self._setup(rng)
        far = RigidTransform(T.rotation, T.translation + np.array([10.0, 0, 0]))
        assert inlier_ratio(corrs, far, src, tgt, tau1=0.1) == 0.0

    def test_constructed_three_of_ten(self):
        src = PointCloud(np.arange(30, dtype=float).reshape(10, 3))
        shift = np.zeros((10, 3))
        shift[3:] = [0.5, 0, 0]  # 7 pairs displaced beyond tau
        tgt = PointCloud(src.points + shift)
        corrs = CorrespondenceSet(np.stack([np.arange(10)] * 2, axis=1))
        got = inlier_ratio(corrs, RigidTransform.identity(), src, tgt, tau1=0.1)
        assert got == pytest.approx(0.3)

    def test_monotone_in_tau(self):
        rng = np.random.default_rng(11)
        src, tgt, T, corrs = self._setup(rng, n=40)
        noisy = PointCloud(tgt.points + rng.normal(0, 0.08, tgt.points.shape))
        taus = np.linspace(0.01, 0.5, 12)
        vals = [inlier_ratio(corrs, T, src, noisy, t) for t in taus]
        assert all(b >= a for a, b in zip(vals, vals[1:]))

    def test_empty_rejected(self):
        empty = CorrespondenceSet(np.empty((0, 2), dtype=np.int64))
        c = PointCloud([[0.0, 0, 0]])
        with pytest.raises(ValueError):
            inlier_ratio(empty, RigidTransform.identity(), c, c)
