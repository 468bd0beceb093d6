import numpy as np
import pytest

from distreg import geometry as g
from distreg.errors import DegenerateGeometry, EmptyCloud


def identity_corr(n):
    return g.Correspondences(np.stack([np.arange(n)] * 2, axis=1))


class TestRigidTransform:
    def test_validation_rejects_non_orthonormal(self):
        bad = np.eye(3)
        bad[0, 0] = 1.001
        with pytest.raises(ValueError):
            g.RigidTransform(bad, np.zeros(3))

    def test_validation_rejects_reflection(self):
        refl = np.diag([1.0, 1.0, -1.0])
        with pytest.raises(ValueError):
            g.RigidTransform(refl, np.zeros(3))

    def test_compose_inverse(self, rng):
        a = g.random_transform(rng, 3.0)
        b = g.random_transform(rng, 3.0)
        pts = rng.uniform(-5, 5, (40, 3))
        via_compose = a.compose(b).apply(pts)
        sequential = a.apply(b.apply(pts))
        np.testing.assert_allclose(via_compose, sequential, atol=1e-9)
        round_trip = a.inverse().apply(a.apply(pts))
        np.testing.assert_allclose(round_trip, pts, atol=1e-9)


class TestApplyTransform:
    def test_identity(self, rng):
        pts = rng.uniform(-10, 10, (25, 3))
        out = g.apply_transform(pts, g.RigidTransform.identity())
        np.testing.assert_array_equal(out, pts)

    def test_analytic_rotation_90deg(self):
        rot = g.rotation_about_axis([0, 0, 1], np.pi / 2)
        out = g.apply_transform(np.array([[1.0, 0.0, 0.0]]), g.RigidTransform(rot, np.zeros(3)))
        np.testing.assert_allclose(out, [[0.0, 1.0, 0.0]], atol=1e-12)

    def test_composition_group_law(self, rng):
        pts = rng.uniform(-10, 10, (30, 3))
        t1 = g.random_transform(rng, 2.0)
        t2 = g.random_transform(rng, 2.0)
        lhs = g.apply_transform(g.apply_transform(pts, t1), t2)
        rhs = g.apply_transform(pts, t2.compose(t1))
        np.testing.assert_allclose(lhs, rhs, atol=1e-9)

    def test_preserves_pairwise_distances(self, rng):
        pts = rng.uniform(-10, 10, (50, 3))
        moved = g.apply_transform(pts, g.random_transform(rng, 5.0))
        d0 = np.linalg.norm(pts[:, None] - pts[None, :], axis=2)
        d1 = np.linalg.norm(moved[:, None] - moved[None, :], axis=2)
        np.testing.assert_allclose(d1, d0, rtol=1e-9, atol=1e-9)

    def test_input_unmodified(self, rng):
        pts = rng.uniform(-1, 1, (10, 3))
        before = pts.copy()
        g.apply_transform(pts, g.random_transform(rng, 1.0))
        np.testing.assert_array_equal(pts, before)

    def test_rejects_nan(self):
        with pytest.raises(ValueError):
            g.apply_transform(np.array([[np.nan, 0, 0]]), g.RigidTransform.identity())


class TestKabsch:
    def test_identity_pairing(self, rng):
        pts = rng.uniform(-5, 5, (20, 3))
        t = g.kabsch(identity_corr(20), pts, pts)
        np.testing.assert_allclose(t.rotation, np.eye(3), atol=1e-9)
        np.testing.assert_allclose(t.translation, np.zeros(3), atol=1e-9)

    def test_pure_translation(self, rng):
        pts = rng.uniform(-5, 5, (20, 3))
        t = g.kabsch(identity_corr(20), pts, pts + np.array([1.0, 2.0, 3.0]))
        np.testing.assert_allclose(t.rotation, np.eye(3), atol=1e-9)
        np.testing.assert_allclose(t.translation, [1.0, 2.0, 3.0], atol=1e-9)

    def test_exact_recovery_100_random_transforms(self, rng):
        pts = rng.uniform(-10, 10, (50, 3))
        for _ in range(100):
            t_gt = g.random_transform(rng, 5.0)
            moved = g.apply_transform(pts, t_gt)
            t_est = g.kabsch(identity_corr(50), pts, moved)
            assert g.relative_rotation_angle_deg(t_est.rotation, t_gt.rotation) < 1e-6
            assert g.rte(t_est.translation, t_gt.translation) < 1e-9

    def test_weighted_fit_ignores_zero_weight_outlier(self, rng):
        pts = rng.uniform(-5, 5, (10, 3))
        t_gt = g.random_transform(rng, 1.0)
        moved = g.apply_transform(pts, t_gt)
        moved[0] += 100.0  # corrupted, but weighted out
        w = np.ones(10)
        w[0] = 0.0
        t = g.kabsch(g.Correspondences(identity_corr(10).pairs, w), pts, moved)
        assert g.relative_rotation_angle_deg(t.rotation, t_gt.rotation) < 1e-6

    def test_collinear_raises(self):
        line = np.array([[0.0, 0, 0], [1.0, 0, 0], [2.0, 0, 0], [3.0, 0, 0]])
        with pytest.raises(DegenerateGeometry):
            g.kabsch(identity_corr(4), line, line + 1.0)

    def test_coincident_raises(self):
        same = np.zeros((5, 3))
        with pytest.raises(DegenerateGeometry):
            g.kabsch(identity_corr(5), same, same)


class TestNeighborIndex:
    def test_single_point(self):
        idx = g.build_index([[1.0, 2.0, 3.0]])
        d, i = idx.nearest([[0.0, 0.0, 0.0]])
        assert i[0] == 0
        np.testing.assert_allclose(d[0], np.sqrt(14.0))

    def test_query_at_indexed_point(self, rng):
        pts = rng.uniform(-5, 5, (30, 3))
        d, i = g.build_index(pts).nearest(pts[7:8])
        assert d[0] == 0.0 and i[0] == 7

    def test_empty_raises(self):
        with pytest.raises(EmptyCloud):
            g.build_index(np.zeros((0, 3)))

    def test_matches_brute_force(self, rng):
        pts = rng.uniform(-10, 10, (1000, 3))
        queries = rng.uniform(-10, 10, (100, 3))
        d, i = g.build_index(pts).nearest(queries)
        d2 = np.linalg.norm(queries[:, None, :] - pts[None, :, :], axis=2)
        np.testing.assert_array_equal(i, np.argmin(d2, axis=1))
        np.testing.assert_allclose(d, d2.min(axis=1), rtol=1e-12)

    def test_knearest_matches_brute_force(self, rng):
        pts = rng.uniform(-10, 10, (300, 3))
        queries = rng.uniform(-10, 10, (40, 3))
        d, i = g.build_index(pts).knearest(queries, 5)
        d2 = np.linalg.norm(queries[:, None, :] - pts[None, :, :], axis=2)
        expect = np.argsort(d2, axis=1)[:, :5]
        np.testing.assert_array_equal(i, expect)
        assert (np.diff(d, axis=1) >= 0).all()


class TestVoxelDownsample:
    def test_two_points_one_cell(self):
        out = g.voxel_downsample([[0.1, 0.1, 0.1], [0.2, 0.2, 0.2]], 1.0)
        np.testing.assert_allclose(out, [[0.15, 0.15, 0.15]])

    def test_distinct_cells_is_permutation(self, rng):
        pts = rng.uniform(0, 10, (50, 3))
        pts = np.unique(np.floor(pts), axis=0) + 0.5  # one point per integer cell
        out = g.voxel_downsample(pts, 1.0)
        np.testing.assert_allclose(np.sort(out, axis=0), np.sort(pts, axis=0), atol=1e-12)

    def test_occupancy_matches_hash_oracle(self, rng):
        pts = rng.uniform(0, 10, (10_000, 3))
        out = g.voxel_downsample(pts, 0.5)
        cells = {tuple(c) for c in np.floor(pts / 0.5).astype(int)}
        assert out.shape[0] == len(cells)

    def test_negative_coordinates_cell_convention(self):
        # floor(-0.1/1) = -1: the two points land in different cells
        out = g.voxel_downsample([[-0.1, 0.0, 0.0], [0.1, 0.0, 0.0]], 1.0)
        assert out.shape[0] == 2

    def test_second_pass_keeps_single_occupancy(self, rng):
        pts = rng.uniform(-5, 5, (5000, 3))
        once = g.voxel_downsample(pts, 0.4)
        twice = g.voxel_downsample(once, 0.4)
        assert twice.shape[0] <= once.shape[0]
        cells = np.floor(twice / 0.4).astype(int)
        assert np.unique(cells, axis=0).shape[0] == cells.shape[0]

    def test_order_independent(self, rng):
        pts = rng.uniform(-5, 5, (2000, 3))
        perm = rng.permutation(2000)
        a = g.voxel_downsample(pts, 0.7)
        b = g.voxel_downsample(pts[perm], 0.7)
        np.testing.assert_allclose(a, b, atol=1e-12)

    def test_empty_input(self):
        assert g.voxel_downsample(np.zeros((0, 3)), 0.5).shape == (0, 3)

    def test_rejects_bad_voxel_size(self):
        with pytest.raises(ValueError):
            g.voxel_downsample(np.zeros((1, 3)), 0.0)


class TestOverlapRatio:
    def test_self_overlap_is_one(self, rng):
        pts = rng.uniform(0, 10, (100, 3))
        for tau in (0.01, 0.5, 3.0):
            assert g.overlap_ratio(pts, pts, g.RigidTransform.identity(), tau) == 1.0

    def test_disjoint_clouds(self, rng):
        a = rng.uniform(0, 1, (50, 3))
        b = a + 100.0
        assert g.overlap_ratio(a, b, g.RigidTransform.identity(), 0.5) == 0.0

    def test_constructed_30_percent(self, rng):
        shared = rng.uniform(0, 10, (30, 3))
        only_a = rng.uniform(0, 10, (70, 3)) + np.array([1000.0, 0, 0])
        only_b = rng.uniform(0, 10, (70, 3)) - np.array([1000.0, 0, 0])
        a = np.vstack([shared, only_a])
        b = np.vstack([shared, only_b])
        ov = g.overlap_ratio(a, b, g.RigidTransform.identity(), 0.5)
        assert ov == pytest.approx(0.30)

    def test_symmetric_minimum(self, rng):
        # B contains all of A plus far extras: o_AB=1 but o_BA=0.5
        a = rng.uniform(0, 10, (50, 3))
        b = np.vstack([a, a + 500.0])
        assert g.overlap_ratio(a, b, g.RigidTransform.identity(), 0.5) == pytest.approx(0.5)

    def test_empty_raises(self):
        with pytest.raises(EmptyCloud):
            g.overlap_ratio(np.zeros((0, 3)), np.zeros((1, 3)), g.RigidTransform.identity(), 0.5)


class TestErrorMetrics:
    def test_rre_zero_for_equal(self, rng):
        r = g.random_rotation(rng)
        assert g.rre(r, r) < 3e-6  # arccos conditioning floor

    def test_rre_constructed_angle(self, rng):
        r = g.random_rotation(rng)
        for axis in ([1, 0, 0], [0, 1, 0], [0.3, -0.5, 0.81]):
            delta = g.rotation_about_axis(axis, np.radians(1.5))
            assert g.rre(delta @ r, r) == pytest.approx(1.5, abs=1e-9)

    def test_rre_matches_quaternion_oracle(self, rng):
        def quat_angle_deg(r1, r2):
            m = r1.T @ r2
            w = np.sqrt(max(0.0, 1.0 + np.trace(m))) / 2.0
            return np.degrees(2.0 * np.arccos(np.clip(w, -1.0, 1.0)))

        for _ in range(100):
            r1, r2 = g.random_rotation(rng), g.random_rotation(rng)
            assert g.rre(r1, r2) == pytest.approx(quat_angle_deg(r2, r1), abs=1e-7)

    def test_rre_symmetric(self, rng):
        for _ in range(20):
            r1, r2 = g.random_rotation(rng), g.random_rotation(rng)
            assert g.rre(r1, r2) == pytest.approx(g.rre(r2, r1), abs=1e-9)

    def test_rre_range(self, rng):
        r = g.rotation_about_axis([0, 0, 1], np.pi)
        assert g.rre(r, np.eye(3)) == pytest.approx(180.0)

    def test_rte(self, rng):
        assert g.rte([1, 2, 3], [1, 2, 3]) == 0.0
        assert g.rte([1.6, 0, 0], [1.0, 0, 0]) == pytest.approx(0.6)
        for _ in range(20):
            a, b = rng.normal(size=3), rng.normal(size=3)
            assert g.rte(a, b) == pytest.approx(np.sqrt(((a - b) ** 2).sum()))
