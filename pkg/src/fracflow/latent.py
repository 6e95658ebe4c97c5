"""Multi-view renders -> (global descriptor, voxel occupancy) latents and back.

Flat layout of a latent vector: ``[g (d_g entries), r (R^3 entries)]`` with
``r`` flattened x-major, then y, then z (``r[ix, iy, iz]`` sits at
``d_g + ix*R*R + iy*R + iz``).
"""
from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .geometry import PointCloud, _nonempty
from .views import CameraModel, RenderedView, make_camera_ring, render_views, unproject_views

LATENT_MAGIC = b"JGLT"
LATENT_VERSION = 1
_RADIAL_BINS = 22
_DESCRIPTOR_LEN = 32


class LatentError(ValueError):
    pass


@dataclass(frozen=True)
class LatentConfig:
    R: int = 8
    d_g: int = 32
    n_sat: int = 4

    def __post_init__(self):
        if self.R < 4:
            raise LatentError("R must be >= 4")
        if self.d_g < 8:
            raise LatentError("d_g must be >= 8")
        if self.n_sat < 1:
            raise LatentError("n_sat must be >= 1")

    @property
    def dim(self) -> int:
        return self.d_g + self.R ** 3


@dataclass(frozen=True)
class LatentPair:
    g: np.ndarray
    r: np.ndarray

    def __post_init__(self):
        g = np.asarray(self.g, dtype=np.float32).reshape(-1)
        r = np.asarray(self.r, dtype=np.float32)
        if r.ndim != 3 or len(set(r.shape)) != 1:
            raise LatentError(f"r must be a cubic grid, got shape {r.shape}")
        if not (np.all(np.isfinite(g)) and np.all(np.isfinite(r))):
            raise LatentError("non-finite latent entry")
        object.__setattr__(self, "g", g)
        object.__setattr__(self, "r", r)

    @property
    def R(self) -> int:
        return self.r.shape[0]

    def flatten(self) -> np.ndarray:
        return np.concatenate([self.g, self.r.reshape(-1)])

    @classmethod
    def from_flat(cls, x: np.ndarray, cfg: LatentConfig) -> "LatentPair":
        x = np.asarray(x, dtype=np.float32).reshape(-1)
        if x.size != cfg.dim:
            raise LatentError(f"latent vector has {x.size} entries, expected {cfg.dim}")
        return cls(x[:cfg.d_g], x[cfg.d_g:].reshape(cfg.R, cfg.R, cfg.R))


def voxel_indices(points: np.ndarray, R: int) -> np.ndarray:
    return np.clip(np.floor(points * R).astype(np.int64), 0, R - 1)


def voxelize(cloud: PointCloud, cfg: LatentConfig = LatentConfig()) -> np.ndarray:
    """Soft occupancy ``min(count, n_sat) / n_sat`` on an R^3 grid."""
    pts = _nonempty(cloud)
    R = cfg.R
    ijk = voxel_indices(pts, R)
    flat = (ijk[:, 0] * R + ijk[:, 1]) * R + ijk[:, 2]
    counts = np.bincount(flat, minlength=R ** 3).reshape(R, R, R)
    return np.minimum(counts, cfg.n_sat).astype(np.float64) / cfg.n_sat


def global_descriptor(cloud: PointCloud, d_g: int = 32) -> np.ndarray:
    """Pooled shape statistics (32 values, zero-padded or truncated to ``d_g``).

    Layout: centroid (3), per-axis std (3), covariance eigenvalues in
    descending order (3), fraction of occupied cells on an 8^3 grid (1),
    22-bin histogram of distances to the centroid over [0, sqrt(3)].
    """
    pts = _nonempty(cloud)
    # canonical order makes the floating-point reductions order-independent
    pts = pts[np.lexsort((pts[:, 2], pts[:, 1], pts[:, 0]))]
    centroid = pts.mean(axis=0)
    centred = pts - centroid
    std = np.sqrt((centred ** 2).mean(axis=0))
    cov = centred.T @ centred / len(pts)
    eig = np.sort(np.linalg.eigvalsh(cov))[::-1]
    occ = voxelize(PointCloud(pts), LatentConfig(R=8, d_g=max(8, d_g), n_sat=1))
    occupied = occ.sum() / occ.size
    radial = np.linalg.norm(centred, axis=1)
    hist, _ = np.histogram(np.minimum(radial, np.sqrt(3.0)), bins=_RADIAL_BINS, range=(0.0, np.sqrt(3.0)))
    hist = hist / hist.sum()
    desc = np.concatenate([centroid, std, eig, [occupied], hist])
    assert desc.size == _DESCRIPTOR_LEN
    out = np.zeros(d_g)
    n = min(d_g, _DESCRIPTOR_LEN)
    out[:n] = desc[:n]
    return out


def latent_from_cloud(cloud: PointCloud, cfg: LatentConfig = LatentConfig()) -> LatentPair:
    return LatentPair(global_descriptor(cloud, cfg.d_g), voxelize(cloud, cfg))


def encode_views(views: Sequence[RenderedView], cameras: Sequence[CameraModel],
                 cfg: LatentConfig = LatentConfig()) -> LatentPair:
    if len(views) != len(cameras) or not views:
        raise LatentError(f"need matching non-empty views/cameras, got {len(views)}/{len(cameras)}")
    union = unproject_views(views, cameras)
    if union.is_empty:
        raise LatentError("no visible geometry in any view")
    return latent_from_cloud(union, cfg)


def _local_planes(cells: np.ndarray, weights: np.ndarray, R: int, bandwidth: float):
    """Weighted PCA plane through the occupied cell centres around each cell."""
    from scipy.spatial import cKDTree

    centers = (cells + 0.5) / R
    h = bandwidth / R
    neighbours = cKDTree(centers).query_ball_point(centers, 2.0 * h)
    mus = centers.copy()
    normals = np.zeros_like(centers)
    ok = np.zeros(len(cells), dtype=bool)
    for i, nb in enumerate(neighbours):
        if len(nb) < 3:
            continue
        nb = np.sort(nb)
        c = centers[nb]
        w = weights[nb] * np.exp(-((c - centers[i]) ** 2).sum(axis=1) / h ** 2)
        mu = (w[:, None] * c).sum(axis=0) / w.sum()
        x = c - mu
        _, vecs = np.linalg.eigh((w[:, None] * x).T @ x)
        mus[i], normals[i], ok[i] = mu, vecs[:, 0], True
    return mus, normals, ok


def decode_latent(latent: LatentPair, tau: float = 0.5, pts_per_voxel: int = 16, seed=0,
                  surface_fit: bool = False, bandwidth: float = 1.3) -> PointCloud:
    """Scatter ``round(pts_per_voxel * occupancy)`` uniform points into every
    voxel whose occupancy reaches ``tau``.

    With ``surface_fit`` each voxel's points are then projected onto a plane
    fitted through the neighbouring occupied voxel centres, and planes lying
    in a boundary layer parallel to a cube face are snapped onto that face
    (normalized shapes always touch the cube along their longest axis).
    """
    if not 0.0 < tau < 1.0:
        raise LatentError("tau must lie in (0, 1)")
    if pts_per_voxel < 1:
        raise LatentError("pts_per_voxel must be >= 1")
    r = np.asarray(latent.r, dtype=np.float64)
    R = r.shape[0]
    cells = np.argwhere(r >= tau)
    occ = np.clip(r[tuple(cells.T)], 0.0, 1.0)
    counts = np.rint(pts_per_voxel * occ).astype(np.int64)
    if counts.sum() == 0:
        raise LatentError("empty decode: no voxel reaches the occupancy threshold")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    owner = np.repeat(np.arange(len(cells)), counts)
    pts = (cells[owner] + rng.random((len(owner), 3))) / R
    if not surface_fit:
        return PointCloud(pts)

    mus, normals, ok = _local_planes(cells, occ, R, bandwidth)
    mu, n, fitted = mus[owner], normals[owner], ok[owner]
    proj = pts - ((pts - mu) * n).sum(axis=1, keepdims=True) * n
    pts = np.where(fitted[:, None], proj, pts)
    rows = np.arange(len(pts))
    axis = np.argmax(np.abs(n), axis=1)
    flat = fitted & (np.abs(n[rows, axis]) > 0.9)
    mu_ax = mu[rows, axis]
    lo = flat & (mu_ax < 1.0 / R)
    hi = flat & (mu_ax > 1.0 - 1.0 / R)
    pts[lo, axis[lo]] = 0.0
    pts[hi, axis[hi]] = 1.0
    return PointCloud(np.clip(pts, 0.0, 1.0))


@dataclass(frozen=True)
class ShapeCodec:
    """Bundles everything needed to go from a normalized cloud to a latent vector."""

    latent: LatentConfig = field(default_factory=LatentConfig)
    cameras: tuple = field(default_factory=lambda: tuple(make_camera_ring()))
    splat_px: int = 1
    tau: float = 0.5
    pts_per_voxel: int = 32
    surface_fit: bool = True

    @property
    def dim(self) -> int:
        return self.latent.dim

    def encode(self, cloud: PointCloud) -> LatentPair:
        views = render_views(cloud, self.cameras, self.splat_px)
        return encode_views(views, self.cameras, self.latent)

    def encode_flat(self, cloud: PointCloud) -> np.ndarray:
        return self.encode(cloud).flatten()

    def decode_flat(self, x: np.ndarray, seed=0) -> PointCloud:
        return decode_latent(LatentPair.from_flat(x, self.latent), self.tau, self.pts_per_voxel, seed,
                             surface_fit=self.surface_fit)


# --------------------------------------------------------------------------
# files

_LATENT_HEADER = struct.Struct("<4sHHHH")


def latent_to_bytes(latent: LatentPair, cfg: LatentConfig) -> bytes:
    if latent.R != cfg.R or latent.g.size != cfg.d_g:
        raise LatentError("latent shape does not match config")
    head = _LATENT_HEADER.pack(LATENT_MAGIC, LATENT_VERSION, cfg.d_g, cfg.R, cfg.n_sat)
    payload = latent.flatten().astype("<f4").tobytes()
    body = head + payload
    return body + struct.pack("<I", zlib.crc32(body))


def latent_from_bytes(data: bytes) -> tuple[LatentPair, LatentConfig]:
    if len(data) < _LATENT_HEADER.size + 4:
        raise LatentError("truncated latent file")
    magic, version, d_g, R, n_sat = _LATENT_HEADER.unpack_from(data)
    if magic != LATENT_MAGIC:
        raise LatentError(f"bad magic {magic!r}, expected {LATENT_MAGIC!r}")
    if version != LATENT_VERSION:
        raise LatentError(f"unsupported version {version} (this build reads {LATENT_VERSION})")
    cfg = LatentConfig(R=R, d_g=d_g, n_sat=n_sat)
    need = _LATENT_HEADER.size + 4 * cfg.dim + 4
    if len(data) != need:
        raise LatentError(f"latent file has {len(data)} bytes, expected {need} (truncated or padded)")
    (crc,) = struct.unpack_from("<I", data, need - 4)
    if crc != zlib.crc32(data[:need - 4]):
        raise LatentError("latent file checksum mismatch")
    x = np.frombuffer(data, dtype="<f4", count=cfg.dim, offset=_LATENT_HEADER.size)
    return LatentPair.from_flat(x.astype(np.float32), cfg), cfg


def save_latent(path, latent: LatentPair, cfg: LatentConfig) -> None:
    with open(path, "wb") as fh:
        fh.write(latent_to_bytes(latent, cfg))


def load_latent(path) -> tuple[LatentPair, LatentConfig]:
    with open(path, "rb") as fh:
        return latent_from_bytes(fh.read())
