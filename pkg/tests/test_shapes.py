import numpy as np
import pytest
from scipy.spatial import cKDTree

from fracflow.bench.shapes import (
    CATEGORIES,
    AssemblyInstance,
    PerturbationSpec,
    ShapeError,
    ShapeSpec,
    assemble,
    fracture,
    gen_shape,
    make_instance,
    perturb_assembly,
)
from fracflow.geometry import PointCloud, chamfer_distance, nearest_neighbors, rotation_about_axis


def mean_spacing(pts):
    d, _ = cKDTree(pts).query(pts, k=2)
    return d[:, 1].mean()


def pose_array(pose):
    return np.column_stack([pose.rotation, pose.translation])


class TestGenShape:
    @pytest.mark.parametrize("cat", CATEGORIES)
    def test_normalized_and_deterministic(self, cat):
        a = gen_shape(ShapeSpec(cat, n_pts=1024, seed=3))
        b = gen_shape(ShapeSpec(cat, n_pts=1024, seed=3))
        assert np.array_equal(a.points, b.points) and len(a) == 1024
        assert a.points.min() >= 0.0 and a.points.max() <= 1.0
        assert np.isclose(np.ptp(a.points, axis=0).max(), 1.0)

    def test_seeds_differ(self):
        a = gen_shape(ShapeSpec("box", seed=0))
        b = gen_shape(ShapeSpec("box", seed=1))
        assert not np.array_equal(a.points, b.points)

    def test_flat_plate_is_thin(self):
        cloud = gen_shape(ShapeSpec("plate", seed=1, params={"depth": 0.02, "wobble": 0.0}))
        assert np.ptp(cloud.points[:, 2]) < 0.1

    def test_revolution_is_rotationally_symmetric(self):
        cloud = gen_shape(ShapeSpec("revolution", n_pts=4096, seed=2))
        pts = cloud.points - np.array([0.5, 0.5, 0.0])
        turned = pts @ rotation_about_axis([0, 0, 1], np.pi / 2).T
        assert chamfer_distance(pts, turned) < (2 * mean_spacing(pts)) ** 2

    def test_validation(self):
        with pytest.raises(ShapeError):
            ShapeSpec("torus")
        with pytest.raises(ShapeError):
            ShapeSpec("box", n_pts=10)
        with pytest.raises(ShapeError, match="outside"):
            gen_shape(ShapeSpec("box", params={"sx": 5.0}))


class TestFracture:
    def test_partition_property(self):
        complete = gen_shape(ShapeSpec("box", seed=4))
        pieces, poses = fracture(complete, 4, seed=1)
        assert all(len(p) > 0 for p in pieces)
        union = np.concatenate([pose.transform(p.points) for p, pose in zip(pieces, poses)])
        assert len(union) == len(complete)
        idx, d2 = nearest_neighbors(union, complete.points)
        assert len(np.unique(idx)) == len(complete) and d2.max() < 1e-24

    def test_pieces_are_centred(self):
        pieces, _ = fracture(gen_shape(ShapeSpec("revolution", seed=5)), 3, seed=2)
        for p in pieces:
            np.testing.assert_allclose(p.points.mean(axis=0), 0.0, atol=1e-12)

    def test_one_plane_splits_a_sphere_evenly(self):
        u = np.random.default_rng(0).standard_normal((4000, 3))
        sphere = PointCloud(u / np.linalg.norm(u, axis=1, keepdims=True))
        pieces, _ = fracture(sphere, 2, seed=3)
        share = len(pieces[0]) / 4000
        assert 0.4 <= share <= 0.6

    def test_errors(self):
        with pytest.raises(ShapeError):
            fracture(PointCloud(np.zeros((5, 3))), 1)
        with pytest.raises(ShapeError):
            fracture(PointCloud.empty(), 3)
        with pytest.raises(ShapeError, match="20 attempts"):
            fracture(PointCloud(np.zeros((5, 3))), 3)


class TestPerturb:
    def instance(self, seed=0, n=4):
        return make_instance(gen_shape(ShapeSpec("box", seed=seed)), n, seed=seed)

    def test_zero_perturbation(self):
        inst = self.instance()
        out = perturb_assembly(inst, PerturbationSpec(0.0, 0.0, 0.0))
        assert all(out.present)
        for a, b in zip(out.pred_poses, inst.gt_poses):
            np.testing.assert_allclose(pose_array(a), pose_array(b), atol=1e-15)
        assert chamfer_distance(assemble(out), inst.complete) < 1e-24  # centring round-off only

    def test_drop_rate(self):
        # n-1 planes cut up to 2^(n-1) cells; the all-dropped redraw is negligible at this size
        inst = self.instance(n=4)
        draws = -(-10_000 // inst.n_pieces)
        dropped = sum(perturb_assembly(inst, PerturbationSpec(0.0, 0.0, 0.2, seed=s)).present.count(False)
                      for s in range(draws))
        assert abs(dropped / (draws * inst.n_pieces) - 0.2) < 0.01

    def test_drop_leaves_poses_alone(self):
        inst = self.instance(1)
        a = perturb_assembly(inst, PerturbationSpec(30, 0.05, 0.0, seed=4))
        b = perturb_assembly(inst, PerturbationSpec(30, 0.05, 0.5, seed=4))
        assert all(np.array_equal(pose_array(x), pose_array(y)) for x, y in zip(a.pred_poses, b.pred_poses))

    def test_error_grows_with_rotation(self):
        cds = []
        for sigma in (5.0, 15.0, 30.0):
            vals = [chamfer_distance(assemble(perturb_assembly(self.instance(s), PerturbationSpec(sigma, 0.0, 0.0, s))),
                                     self.instance(s).complete) for s in range(12)]
            cds.append(np.mean(vals))
        assert cds[0] <= cds[1] <= cds[2]

    def test_dropping_only_removes_points(self):
        inst = self.instance(2)
        full = assemble(perturb_assembly(inst, PerturbationSpec(20, 0.05, 0.0, seed=9)))
        part = assemble(perturb_assembly(inst, PerturbationSpec(20, 0.05, 0.5, seed=9)))
        assert len(part) < len(full)
        full_rows = {tuple(r) for r in full.points}
        assert all(tuple(r) in full_rows for r in part.points)
        assert chamfer_distance(part, inst.complete) > 0

    def test_spec_validation(self):
        with pytest.raises(ShapeError):
            PerturbationSpec(drop_prob=1.0)
        with pytest.raises(ShapeError):
            PerturbationSpec(rot_sigma_deg=-1)

    def test_instance_validation(self):
        inst = self.instance()
        with pytest.raises(ShapeError):
            AssemblyInstance(inst.complete, inst.pieces, inst.gt_poses, inst.pred_poses, (False,) * inst.n_pieces)
        with pytest.raises(ShapeError):
            AssemblyInstance(inst.complete, inst.pieces[:1], inst.gt_poses, inst.pred_poses, inst.present)
