import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from fracflow.geometry import (
    GeometryError,
    MetricsReport,
    NormalizationRecord,
    PointCloud,
    RigidPose,
    apply_pose,
    chamfer_distance,
    evaluate,
    nearest_neighbor,
    nearest_neighbors,
    normalize_cloud,
    precision_recall,
    rotation_about_axis,
)

from oracles import brute_chamfer, brute_nn, brute_precision_recall


def random_pose(rng):
    axis = rng.standard_normal(3)
    return RigidPose(rotation_about_axis(axis, rng.uniform(0, 2 * np.pi)), rng.standard_normal(3))


class TestPointCloud:
    def test_rejects_bad_shapes_and_values(self):
        with pytest.raises(GeometryError):
            PointCloud(np.zeros((4, 2)))
        with pytest.raises(GeometryError, match="non-finite"):
            PointCloud([[0, 0, np.nan]])
        with pytest.raises(GeometryError):
            PointCloud(np.zeros((3, 3)), colors=np.zeros((2, 3)))
        with pytest.raises(GeometryError):
            PointCloud(np.zeros((1, 3)), colors=[[0, 0, 1.5]])

    def test_concat_keeps_colors_only_when_all_have_them(self):
        a = PointCloud(np.zeros((2, 3)), np.full((2, 3), 0.5))
        b = PointCloud(np.ones((3, 3)), np.full((3, 3), 0.25))
        assert PointCloud.concat([a, b]).colors.shape == (5, 3)
        assert len(PointCloud.concat([a, PointCloud(np.ones((1, 3)))])) == 3


class TestRigidPose:
    def test_rejects_non_rotations(self):
        with pytest.raises(GeometryError):
            RigidPose(np.diag([1.0, 1.0, -1.0]), np.zeros(3))
        with pytest.raises(GeometryError):
            RigidPose(np.eye(3) * 1.001, np.zeros(3))

    def test_identity_leaves_cloud(self):
        pts = np.random.default_rng(0).random((50, 3))
        assert np.array_equal(apply_pose(PointCloud(pts), RigidPose.identity()).points, pts)

    def test_half_turn_about_z(self):
        pose = RigidPose(rotation_about_axis([0, 0, 1], np.pi), np.zeros(3))
        np.testing.assert_allclose(apply_pose(PointCloud([[1, 0, 0]]), pose).points, [[-1, 0, 0]], atol=1e-15)

    def test_composition_matches_sequential_application(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            a, b = random_pose(rng), random_pose(rng)
            cloud = PointCloud(rng.standard_normal((40, 3)))
            seq = apply_pose(apply_pose(cloud, a), b).points
            np.testing.assert_allclose(seq, apply_pose(cloud, b.compose(a)).points, atol=1e-9)

    def test_inverse(self):
        rng = np.random.default_rng(2)
        pose = random_pose(rng)
        pts = rng.standard_normal((10, 3))
        np.testing.assert_allclose(pose.inverse().transform(pose.transform(pts)), pts, atol=1e-12)

    def test_colors_survive(self):
        cloud = PointCloud(np.zeros((2, 3)), np.full((2, 3), 0.3))
        assert np.array_equal(apply_pose(cloud, random_pose(np.random.default_rng(3))).colors, cloud.colors)


class TestNormalize:
    def test_unit_cube_corners_untouched(self):
        out, rec = normalize_cloud(PointCloud([[0, 0, 0], [1, 1, 1]]))
        assert rec.scale == 1.0 and np.array_equal(rec.offset, np.zeros(3))
        assert np.array_equal(out.points, [[0, 0, 0], [1, 1, 1]])

    def test_symmetric_cube(self):
        out, rec = normalize_cloud(PointCloud([[-1, -1, -1], [1, 1, 1]]))
        assert rec.scale == 0.5
        np.testing.assert_array_equal(rec.offset, [1, 1, 1])
        np.testing.assert_array_equal(out.points, [[0, 0, 0], [1, 1, 1]])

    def test_short_axes_are_centred(self):
        out, _ = normalize_cloud(PointCloud([[0, 0, 0], [2, 0, 0]]))
        np.testing.assert_array_equal(out.points, [[0, 0.5, 0.5], [1, 0.5, 0.5]])

    def test_errors(self):
        with pytest.raises(GeometryError, match="empty input"):
            normalize_cloud(PointCloud.empty())
        with pytest.raises(GeometryError, match="degenerate extent"):
            normalize_cloud(PointCloud([[1, 2, 3], [1, 2, 3]]))

    @settings(max_examples=60, deadline=None)
    @given(arrays(np.float64, st.tuples(st.integers(2, 40), st.just(3)),
                  elements=st.floats(-1e3, 1e3, allow_nan=False)))
    def test_round_trip_and_bounds(self, pts):
        if np.ptp(pts, axis=0).max() < 1e-6:
            return
        out, rec = normalize_cloud(PointCloud(pts))
        assert out.points.min() >= 0.0 and out.points.max() <= 1.0
        assert np.isclose(np.ptp(out.points, axis=0).max(), 1.0)
        scale = max(1.0, np.abs(pts).max())
        assert np.abs(rec.invert(rec.apply(pts)) - pts).max() < 1e-12 * scale

    def test_record_validates_scale(self):
        with pytest.raises(GeometryError):
            NormalizationRecord(0.0, np.zeros(3))


class TestNearestNeighbor:
    def test_examples(self):
        cloud = PointCloud([[1, 0, 0], [0, 2, 0]])
        assert nearest_neighbor([0, 0, 0], cloud) == (0, 1.0)
        assert nearest_neighbor([0, 2, 0], cloud) == (1, 0.0)

    def test_tie_goes_to_lowest_index(self):
        cloud = PointCloud([[0, 1, 0], [1, 0, 0], [0, 0, 1], [-1, 0, 0]])
        assert nearest_neighbor([0, 0, 0], cloud) == (0, 1.0)

    def test_many_ties_beyond_candidate_set(self):
        # 12 exactly equidistant targets, more than the kd-tree candidate count
        unit = np.eye(3)
        target = np.concatenate([unit, -unit, unit, -unit])[np.random.default_rng(0).permutation(12)]
        idx, d2 = nearest_neighbors(np.zeros((1, 3)), target)
        assert idx[0] == 0 and d2[0] == 1.0

    def test_matches_exhaustive_scan(self):
        rng = np.random.default_rng(42)
        for _ in range(100):
            target = rng.random((int(rng.integers(1, 512)), 3))
            queries = rng.random((8, 3))
            idx, d2 = nearest_neighbors(queries, target)
            for q, i, d in zip(queries, idx, d2):
                bi, bd = brute_nn(q, target)
                assert i == bi and d == pytest.approx(bd, abs=1e-15)

    def test_grid_targets_with_exact_ties(self):
        g = np.arange(4.0)
        target = np.stack(np.meshgrid(g, g, g, indexing="ij"), -1).reshape(-1, 3)
        queries = target[::5] + 0.5
        idx, _ = nearest_neighbors(queries, target)
        assert [int(i) for i in idx] == [brute_nn(q, target)[0] for q in queries]

    def test_empty_target(self):
        with pytest.raises(GeometryError):
            nearest_neighbor([0, 0, 0], PointCloud.empty())


class TestChamfer:
    def test_examples(self):
        assert chamfer_distance(PointCloud([[0, 0, 0]]), PointCloud([[1, 0, 0]])) == 2.0
        s = PointCloud(np.random.default_rng(0).random((100, 3)))
        assert chamfer_distance(s, s) == 0.0

    def test_matches_oracle_and_is_symmetric(self):
        rng = np.random.default_rng(7)
        for _ in range(25):
            a = rng.random((int(rng.integers(1, 120)), 3))
            b = rng.random((int(rng.integers(1, 120)), 3))
            cd = chamfer_distance(a, b)
            assert cd == pytest.approx(brute_chamfer(a, b), rel=1e-12)
            assert abs(cd - chamfer_distance(b, a)) < 1e-12

    def test_rigid_invariance(self):
        rng = np.random.default_rng(8)
        a, b = rng.random((200, 3)), rng.random((150, 3))
        pose = random_pose(rng)
        assert chamfer_distance(pose.transform(a), pose.transform(b)) == pytest.approx(chamfer_distance(a, b), abs=1e-9)

    def test_multiset_zero(self):
        a = np.random.default_rng(9).random((30, 3))
        assert chamfer_distance(a, a[::-1]) == 0.0
        assert chamfer_distance(a, a + 1e-4) > 0.0

    def test_empty(self):
        with pytest.raises(GeometryError):
            chamfer_distance(PointCloud.empty(), PointCloud([[0, 0, 0]]))


class TestPrecisionRecall:
    def test_examples(self):
        gt, s = PointCloud([[0, 0, 0]]), PointCloud([[1, 0, 0]])
        assert precision_recall(gt, s, 0.5) == (0.0, 0.0)
        assert precision_recall(gt, s, 1.5) == (1.0, 1.0)
        a = PointCloud(np.random.default_rng(0).random((64, 3)))
        assert precision_recall(a, a, 1e-6) == (1.0, 1.0)

    def test_direction_convention(self):
        # one gt point far from everything: hurts precision (gt side), not recall
        gt = PointCloud([[0, 0, 0], [5, 5, 5]])
        s = PointCloud([[0, 0, 0.01]])
        assert precision_recall(gt, s, 0.1) == (0.5, 1.0)

    def test_matches_oracle(self):
        rng = np.random.default_rng(11)
        for _ in range(20):
            a = rng.random((int(rng.integers(1, 100)), 3))
            b = rng.random((int(rng.integers(1, 100)), 3))
            eta = float(rng.uniform(0.01, 0.3))
            assert precision_recall(a, b, eta) == brute_precision_recall(a, b, eta)

    def test_monotone_in_eta(self):
        rng = np.random.default_rng(12)
        a, b = rng.random((80, 3)), rng.random((90, 3))
        vals = [precision_recall(a, b, e) for e in np.linspace(0.01, 0.5, 15)]
        for (p0, r0), (p1, r1) in zip(vals, vals[1:]):
            assert p1 >= p0 and r1 >= r0

    def test_bad_eta(self):
        with pytest.raises(GeometryError):
            precision_recall([[0, 0, 0]], [[0, 0, 0]], 0.0)


def test_evaluate_agrees_with_parts():
    rng = np.random.default_rng(13)
    a, b = rng.random((300, 3)), rng.random((250, 3))
    rep = evaluate(a, b, 0.05)
    assert rep.cd == chamfer_distance(a, b)
    assert (rep.precision, rep.recall) == precision_recall(a, b, 0.05)
    assert rep.as_dict()["eta"] == 0.05


def test_metrics_report_validation():
    with pytest.raises(GeometryError):
        MetricsReport(cd=-1.0, precision=0.5, recall=0.5, eta=0.02)
    with pytest.raises(GeometryError):
        MetricsReport(cd=0.1, precision=1.5, recall=0.5, eta=0.02)
