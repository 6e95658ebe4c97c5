"""Point cloud <-> image mapping.

Positions in the unit cube are written into pixel colors, the cloud is
splatted into a handful of pinhole views, and masked pixels are lifted back
to 3D by decoding their color and snapping the result onto the pixel ray.

Pixel ``(row=v, col=u)`` has its centre at image coordinates ``(u, v)``;
arrays are stored row-major with shape ``(H, W, ...)``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .geometry import PointCloud

CUBE_CENTER = np.array([0.5, 0.5, 0.5])
_CUBE_CORNERS = np.array([[x, y, z] for x in (0.0, 1.0) for y in (0.0, 1.0) for z in (0.0, 1.0)])


class CodecError(ValueError):
    pass


class ColorCode(NamedTuple):
    value: np.ndarray
    quantized: bool


def pos_to_color(o, quantize: bool = False) -> ColorCode:
    o = np.asarray(o, dtype=np.float64)
    if not np.all(np.isfinite(o)) or np.any(o < 0.0) or np.any(o > 1.0):
        raise CodecError("unnormalized input: positions must lie in [0, 1]^3")
    if not quantize:
        return ColorCode(o.copy(), False)
    c = np.minimum(np.floor(255.0 * o), 255.0).astype(np.uint8)
    return ColorCode(c, True)


def color_to_pos(code: ColorCode) -> np.ndarray:
    if code.quantized:
        return np.asarray(code.value, dtype=np.float64) / 255.0
    return np.asarray(code.value, dtype=np.float64).copy()


# --------------------------------------------------------------------------
# cameras

@dataclass(frozen=True)
class CameraModel:
    """Pinhole camera. ``rotation`` maps world directions to camera axes
    (x right, y down, z forward); ``center`` is the optical centre."""

    resolution: tuple[int, int]
    focal: float
    principal_point: tuple[float, float]
    rotation: np.ndarray
    center: np.ndarray

    def __post_init__(self):
        w, h = (int(v) for v in self.resolution)
        if w < 16 or h < 16:
            raise CodecError("resolution must be at least 16x16")
        if not self.focal > 0:
            raise CodecError("focal length must be positive")
        rot = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        if np.max(np.abs(rot @ rot.T - np.eye(3))) >= 1e-9:
            raise CodecError("camera rotation is not orthonormal")
        object.__setattr__(self, "resolution", (w, h))
        object.__setattr__(self, "principal_point", tuple(float(v) for v in self.principal_point))
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "center", np.asarray(self.center, dtype=np.float64).reshape(3))

    @property
    def width(self) -> int:
        return self.resolution[0]

    @property
    def height(self) -> int:
        return self.resolution[1]

    def to_camera(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points, dtype=np.float64) - self.center) @ self.rotation.T

    def project(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Image coordinates ``(u, v)`` and camera depth for each point."""
        pc = self.to_camera(points)
        z = pc[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            u = self.focal * pc[:, 0] / z + self.principal_point[0]
            v = self.focal * pc[:, 1] / z + self.principal_point[1]
        return np.stack([u, v], axis=1), z

    def pixel_rays(self, cols: np.ndarray, rows: np.ndarray) -> np.ndarray:
        """Unit world-space directions through the given pixel centres."""
        cx, cy = self.principal_point
        d_cam = np.stack([(cols - cx) / self.focal, (rows - cy) / self.focal,
                          np.ones(len(cols))], axis=1)
        d = d_cam @ self.rotation
        return d / np.linalg.norm(d, axis=1, keepdims=True)


def look_at(center, target=CUBE_CENTER, up=(0.0, 0.0, 1.0)) -> np.ndarray:
    center = np.asarray(center, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - center
    fwd /= np.linalg.norm(fwd)
    right = np.cross(fwd, np.asarray(up, dtype=np.float64))
    if np.linalg.norm(right) < 1e-12:
        raise CodecError("camera up vector is parallel to the viewing direction")
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    return np.stack([right, down, fwd])


def make_camera_ring(m: int = 5, radius: float = 2.5, elevation_deg: float = 30.0,
                     resolution: tuple[int, int] = (128, 128), fov_deg: float = 45.0) -> list[CameraModel]:
    """``m`` cameras evenly spaced in azimuth, all aimed at the cube centre."""
    if m < 1:
        raise CodecError("need at least one camera")
    if not radius > np.sqrt(3.0) / 2.0:
        raise CodecError("cube not in frustum: radius must exceed half the cube diagonal")
    if not 0.0 < fov_deg < 180.0:
        raise CodecError("fov must lie in (0, 180) degrees")
    w, h = resolution
    focal = (w / 2.0) / np.tan(np.radians(fov_deg) / 2.0)
    el = np.radians(elevation_deg)
    cams = []
    for i in range(m):
        az = 2.0 * np.pi * i / m
        c = CUBE_CENTER + radius * np.array([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)])
        cam = CameraModel((w, h), focal, (w / 2.0, h / 2.0), look_at(c), c)
        uv, z = cam.project(_CUBE_CORNERS)
        inside = (z > 0) & (uv[:, 0] >= -0.5) & (uv[:, 0] < w - 0.5) & (uv[:, 1] >= -0.5) & (uv[:, 1] < h - 0.5)
        if not np.all(inside):
            raise CodecError(f"cube not in frustum for camera {i} (radius={radius}, fov={fov_deg})")
        cams.append(cam)
    return cams


# --------------------------------------------------------------------------
# rendering

@dataclass(frozen=True)
class RenderedView:
    """``color`` is (H, W, 3) float in [0,1] or uint8 when quantized;
    ``depth`` is +inf where ``mask`` is false."""

    color: np.ndarray
    depth: np.ndarray
    mask: np.ndarray

    @property
    def quantized(self) -> bool:
        return self.color.dtype == np.uint8


def rasterize(cloud: PointCloud, camera: CameraModel, splat_px: int = 1) -> RenderedView:
    """Z-buffered splatting. Each point covers a (2s+1)^2 pixel block at its
    own depth; the nearest point wins and equal depths go to the lower index."""
    if splat_px < 0:
        raise CodecError("splat_px must be >= 0")
    pts = cloud.points
    colors = cloud.colors if cloud.colors is not None else pos_to_color(pts).value
    w, h = camera.resolution
    uv, z = camera.project(pts)
    front = z > 0
    if not np.any(front):
        raise CodecError("nothing visible: every point is behind the camera")
    idx = np.nonzero(front)[0]
    col = np.floor(uv[idx, 0] + 0.5).astype(np.int64)
    row = np.floor(uv[idx, 1] + 0.5).astype(np.int64)
    offs = np.arange(-splat_px, splat_px + 1)
    du, dv = np.meshgrid(offs, offs, indexing="xy")
    du, dv = du.ravel(), dv.ravel()
    cc = (col[:, None] + du[None, :]).ravel()
    rr = (row[:, None] + dv[None, :]).ravel()
    pid = np.repeat(idx, len(du))
    ok = (cc >= 0) & (cc < w) & (rr >= 0) & (rr < h)
    cc, rr, pid = cc[ok], rr[ok], pid[ok]

    color = np.zeros((h, w, 3))
    depth = np.full((h, w), np.inf)
    mask = np.zeros((h, w), dtype=bool)
    if len(pid):
        pix = rr * w + cc
        order = np.lexsort((pid, z[pid], pix))
        pix, pid = pix[order], pid[order]
        first = np.ones(len(pix), dtype=bool)
        first[1:] = pix[1:] != pix[:-1]
        pix, pid = pix[first], pid[first]
        fr, fc = pix // w, pix % w
        color[fr, fc] = colors[pid]
        depth[fr, fc] = z[pid]
        mask[fr, fc] = True
    return RenderedView(color, depth, mask)


def render_views(cloud: PointCloud, cameras: Sequence[CameraModel], splat_px: int = 1) -> list[RenderedView]:
    return [rasterize(cloud, cam, splat_px) for cam in cameras]


def unproject(view: RenderedView, camera: CameraModel) -> PointCloud:
    """Decode masked pixels and project each decoded point onto its pixel ray."""
    rows, cols = np.nonzero(view.mask)
    if len(rows) == 0:
        raise CodecError("empty view: no masked pixels")
    o = color_to_pos(ColorCode(view.color[rows, cols], view.quantized))
    d = camera.pixel_rays(cols.astype(np.float64), rows.astype(np.float64))
    rel = o - camera.center
    along = np.einsum("ij,ij->i", rel, d)
    snapped = camera.center + along[:, None] * d
    # points already on their ray keep their exact coordinates
    resid = np.linalg.norm(np.cross(rel, d), axis=1)
    on_ray = resid <= 1e-12 * np.maximum(1.0, np.linalg.norm(rel, axis=1))
    snapped[on_ray] = o[on_ray]
    return PointCloud(snapped)


def unproject_views(views: Sequence[RenderedView], cameras: Sequence[CameraModel]) -> PointCloud:
    if len(views) != len(cameras):
        raise CodecError(f"{len(views)} views for {len(cameras)} cameras")
    parts = [unproject(v, c) for v, c in zip(views, cameras) if v.mask.any()]
    return PointCloud.concat(parts)


# --------------------------------------------------------------------------
# PNG export

def save_view_png(path, view: RenderedView) -> None:
    from PIL import Image

    if view.quantized:
        rgb = view.color
    else:
        rgb = pos_to_color(np.clip(view.color, 0.0, 1.0), quantize=True).value
    alpha = np.where(view.mask, 255, 0).astype(np.uint8)
    rgba = np.concatenate([rgb.astype(np.uint8), alpha[..., None]], axis=2)
    Image.fromarray(rgba).save(path)


def load_view_png(path, camera: CameraModel) -> RenderedView:
    """Read an exported view; depth is recomputed from the decoded colors."""
    from PIL import Image

    rgba = np.asarray(Image.open(path).convert("RGBA"))
    if rgba.shape[:2] != (camera.height, camera.width):
        raise CodecError(f"image size {rgba.shape[1]}x{rgba.shape[0]} does not match camera")
    mask = rgba[..., 3] > 127
    color = np.where(mask[..., None], rgba[..., :3], 0).astype(np.uint8)
    depth = np.full(mask.shape, np.inf)
    if mask.any():
        pos = color[mask].astype(np.float64) / 255.0
        depth[mask] = np.maximum(camera.to_camera(pos)[:, 2], 1e-9)
    return RenderedView(color, depth, mask)
