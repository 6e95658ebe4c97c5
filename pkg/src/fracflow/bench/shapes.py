"""Synthetic object surfaces and the planar fracture/perturbation pipeline built on them."""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from ..geometry import PointCloud, RigidPose, normalize_cloud, rotation_about_axis

CATEGORIES = ("revolution", "plate", "box", "superellipsoid")


class ShapeError(ValueError):
    pass


@dataclass(frozen=True)
class ShapeSpec:
    """``params`` keys by category (missing keys are drawn from ``seed``):

    revolution: height [1.2, 3], radius [0.3, 0.8], bulge [0, 0.5], neck [0, 0.6],
        neck_start [0.5, 0.85]
    plate: depth [0.02, 0.09] (rim height / diameter), ellipticity [0.8, 1],
        wobble [0, 0.03]
    box: sx, sy, sz each [0.3, 1]
    superellipsoid: a, b, c [0.4, 1]; e1, e2 [0.3, 1.8]
    """

    category: str
    n_pts: int = 2048
    seed: int = 0
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.category not in CATEGORIES:
            raise ShapeError(f"unknown category {self.category!r}")
        if self.n_pts < 256:
            raise ShapeError("n_pts must be >= 256")


def _param(spec: ShapeSpec, rng, name, lo, hi):
    if name in spec.params:
        v = float(spec.params[name])
        if not lo <= v <= hi:
            raise ShapeError(f"{spec.category}.{name}={v} outside [{lo}, {hi}]")
        return v
    return float(rng.uniform(lo, hi))


def _sample_profile(rng, n, radius_fn, z_lo, z_hi, grid=512):
    """Area-weighted samples on the surface of revolution r(z) about the z axis."""
    zs = np.linspace(z_lo, z_hi, grid)
    r = radius_fn(zs)
    dr = np.gradient(r, zs)
    density = r * np.sqrt(1.0 + dr ** 2)
    cdf = np.concatenate([[0.0], np.cumsum(0.5 * (density[1:] + density[:-1]) * np.diff(zs))])
    z = np.interp(rng.random(n) * cdf[-1], cdf, zs)
    theta = rng.uniform(0.0, 2.0 * np.pi, n)
    rad = radius_fn(z)
    return np.stack([rad * np.cos(theta), rad * np.sin(theta), z], axis=1)


def _disk(rng, n, radius, z):
    rho = radius * np.sqrt(rng.random(n))
    theta = rng.uniform(0.0, 2.0 * np.pi, n)
    return np.stack([rho * np.cos(theta), rho * np.sin(theta), np.full(n, z)], axis=1)


def _revolution(spec, rng):
    h = _param(spec, rng, "height", 1.2, 3.0)
    r0 = _param(spec, rng, "radius", 0.3, 0.8)
    bulge = _param(spec, rng, "bulge", 0.0, 0.5)
    neck = _param(spec, rng, "neck", 0.0, 0.6)
    neck_start = _param(spec, rng, "neck_start", 0.5, 0.85)

    def radius(z):
        u = np.clip(z / h, 0.0, 1.0)
        body = r0 * (1.0 + bulge * np.sin(np.pi * np.clip(u / neck_start, 0.0, 1.0)))
        s = np.clip((u - neck_start) / (1.0 - neck_start), 0.0, 1.0)
        smooth = s * s * (3.0 - 2.0 * s)
        return body * (1.0 - neck * smooth)

    zs = np.linspace(0.0, h, 256)
    rs = radius(zs)
    side_area = 2.0 * np.pi * float(np.sum(0.5 * (rs[1:] + rs[:-1]) * np.diff(zs)))
    base_area = np.pi * r0 ** 2
    n_base = int(round(spec.n_pts * base_area / (side_area + base_area)))
    side = _sample_profile(rng, spec.n_pts - n_base, radius, 0.0, h)
    return np.concatenate([side, _disk(rng, n_base, r0, 0.0)])


def _plate(spec, rng):
    depth = _param(spec, rng, "depth", 0.02, 0.09)
    ell = _param(spec, rng, "ellipticity", 0.8, 1.0)
    wobble = _param(spec, rng, "wobble", 0.0, 0.03)
    n = spec.n_pts
    rho = np.sqrt(rng.random(n))
    theta = rng.uniform(0.0, 2.0 * np.pi, n)
    # shallow bowl of diameter 2: flat floor out to 0.6, rim rising to ``depth * 2``
    rim = np.clip((rho - 0.6) / 0.4, 0.0, 1.0)
    z = 2.0 * depth * rim ** 2 + wobble * np.cos(3.0 * theta) * rho ** 2
    return np.stack([rho * np.cos(theta), ell * rho * np.sin(theta), z], axis=1)


def _box(spec, rng):
    dims = np.array([_param(spec, rng, k, 0.3, 1.0) for k in ("sx", "sy", "sz")])
    areas = np.array([dims[1] * dims[2], dims[0] * dims[2], dims[0] * dims[1]])
    face_axis = rng.choice(3, size=spec.n_pts, p=areas / areas.sum())
    pts = (rng.random((spec.n_pts, 3)) - 0.5) * dims
    side = np.where(rng.random(spec.n_pts) < 0.5, -0.5, 0.5)
    rows = np.arange(spec.n_pts)
    pts[rows, face_axis] = side * dims[face_axis]
    return pts


def _superellipsoid(spec, rng):
    a, b, c = (_param(spec, rng, k, 0.4, 1.0) for k in ("a", "b", "c"))
    e1 = _param(spec, rng, "e1", 0.3, 1.8)
    e2 = _param(spec, rng, "e2", 0.3, 1.8)
    u = rng.standard_normal((spec.n_pts, 3))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    x, y, z = np.abs(u[:, 0]) / a, np.abs(u[:, 1]) / b, np.abs(u[:, 2]) / c
    f = (x ** (2 / e2) + y ** (2 / e2)) ** (e2 / e1) + z ** (2 / e1)
    return u * f[:, None] ** (-e1 / 2.0)


_BUILDERS = {"revolution": _revolution, "plate": _plate, "box": _box, "superellipsoid": _superellipsoid}


def gen_shape(spec: ShapeSpec) -> PointCloud:
    """Surface samples of one synthetic object, normalized into the unit cube."""
    rng = np.random.default_rng([spec.seed, CATEGORIES.index(spec.category)])
    pts = _BUILDERS[spec.category](spec, rng)
    extent = pts.max(axis=0) - pts.min(axis=0)
    if not np.all(np.isfinite(pts)) or np.sort(extent)[1] <= 1e-6:
        raise ShapeError(f"degenerate {spec.category} surface")
    cloud, _ = normalize_cloud(PointCloud(pts))
    return cloud


# --------------------------------------------------------------------------
# fracture and assembly

@dataclass(frozen=True)
class AssemblyInstance:
    complete: PointCloud
    pieces: tuple
    gt_poses: tuple
    pred_poses: tuple
    present: tuple
    instance_id: str = ""
    category: str = ""

    def __post_init__(self):
        n = len(self.pieces)
        if n < 1 or not (len(self.gt_poses) == len(self.pred_poses) == len(self.present) == n):
            raise ShapeError("per-piece lists must share one non-zero length")
        if not any(self.present):
            raise ShapeError("at least one piece must be present")

    @property
    def n_pieces(self) -> int:
        return len(self.pieces)


@dataclass(frozen=True)
class PerturbationSpec:
    rot_sigma_deg: float = 30.0
    trans_sigma: float = 0.05
    drop_prob: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if self.rot_sigma_deg < 0 or self.trans_sigma < 0:
            raise ShapeError("perturbation scales must be non-negative")
        if not 0.0 <= self.drop_prob < 1.0:
            raise ShapeError("drop_prob must lie in [0, 1)")


def fracture(complete: PointCloud, n_pieces: int, seed=0, max_attempts: int = 20):
    """Cut with ``n_pieces - 1`` random planes through points near the centroid.

    Returns canonical (centroid-at-origin) pieces and the poses that put them
    back. Every input point lands in exactly one piece.
    """
    if n_pieces < 2:
        raise ShapeError("n_pieces must be >= 2")
    pts = complete.points
    if len(pts) == 0:
        raise ShapeError("cannot fracture an empty cloud")
    rng = np.random.default_rng(seed)
    centroid = pts.mean(axis=0)
    spread = pts.std(axis=0).mean()
    for _ in range(max_attempts):
        normals = rng.standard_normal((n_pieces - 1, 3))
        normals /= np.linalg.norm(normals, axis=1, keepdims=True)
        anchors = centroid + 0.25 * spread * rng.standard_normal((n_pieces - 1, 3))
        signs = ((pts[:, None, :] - anchors[None]) * normals[None]).sum(axis=2) > 0
        code = signs.astype(np.int64) @ (1 << np.arange(n_pieces - 1))
        labels = np.unique(code)
        if len(labels) >= 2:
            break
    else:
        raise ShapeError(f"could not produce two non-empty pieces in {max_attempts} attempts")
    pieces, poses = [], []
    for lab in labels:
        sel = code == lab
        piece = pts[sel]
        c = piece.mean(axis=0)
        pieces.append(PointCloud(piece - c))
        poses.append(RigidPose(np.eye(3), c))
    return pieces, poses


def make_instance(complete: PointCloud, n_pieces: int, seed=0, instance_id: str = "",
                  category: str = "") -> AssemblyInstance:
    pieces, poses = fracture(complete, n_pieces, seed)
    return AssemblyInstance(complete, tuple(pieces), tuple(poses), tuple(poses),
                            (True,) * len(pieces), instance_id, category)


def random_rotation(rng, sigma_deg: float) -> np.ndarray:
    axis = rng.standard_normal(3)
    axis /= np.linalg.norm(axis)
    angle = abs(rng.normal(0.0, np.radians(sigma_deg))) if sigma_deg > 0 else 0.0
    return rotation_about_axis(axis, angle)


def perturb_assembly(instance: AssemblyInstance, spec: PerturbationSpec) -> AssemblyInstance:
    """Jitter every piece about its own centroid and drop pieces at random.

    Pose noise and drop decisions come from separate streams, so changing
    ``drop_prob`` leaves the poses unchanged.
    """
    pose_rng = np.random.default_rng([spec.seed, 0])
    drop_rng = np.random.default_rng([spec.seed, 1])
    pred = []
    for gt in instance.gt_poses:
        rot = random_rotation(pose_rng, spec.rot_sigma_deg)
        shift = pose_rng.normal(0.0, spec.trans_sigma, 3) if spec.trans_sigma > 0 else np.zeros(3)
        pred.append(RigidPose(gt.rotation @ rot, gt.translation + shift))
    n = instance.n_pieces
    while True:
        present = drop_rng.random(n) >= spec.drop_prob
        if present.any():
            break
    return replace(instance, pred_poses=tuple(pred), present=tuple(bool(p) for p in present))


def assemble(instance: AssemblyInstance, use_pred: bool = True) -> PointCloud:
    """Union of the present pieces under predicted (or ground-truth) poses."""
    poses = instance.pred_poses if use_pred else instance.gt_poses
    parts = [PointCloud(pose.transform(piece.points))
             for piece, pose, keep in zip(instance.pieces, poses, instance.present) if keep]
    if not parts:
        raise ShapeError("no present pieces to assemble")
    return PointCloud.concat(parts)
