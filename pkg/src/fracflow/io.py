"""Point-cloud files: ASCII XYZ and little-endian binary PLY."""
from __future__ import annotations

import os
from pathlib import Path

import numpy as np

from .geometry import PointCloud


class CloudFormatError(ValueError):
    pass


def read_xyz(path) -> PointCloud:
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.replace(",", " ").split()
            if len(parts) not in (3, 6):
                raise CloudFormatError(f"{path}:{lineno}: expected 3 or 6 values, got {len(parts)}")
            try:
                rows.append([float(v) for v in parts])
            except ValueError as exc:
                raise CloudFormatError(f"{path}:{lineno}: {exc}") from None
    if not rows:
        return PointCloud.empty()
    widths = {len(r) for r in rows}
    if len(widths) != 1:
        raise CloudFormatError(f"{path}: mixed rows with and without colors")
    arr = np.array(rows, dtype=np.float64)
    if arr.shape[1] == 6:
        cols = arr[:, 3:]
        if cols.max(initial=0.0) > 1.0:
            cols = cols / 255.0
        return PointCloud(arr[:, :3], cols)
    return PointCloud(arr)


def write_xyz(path, cloud: PointCloud) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# {len(cloud)} points\n")
        if cloud.colors is None:
            for p in cloud.points:
                fh.write(f"{p[0]:.9g} {p[1]:.9g} {p[2]:.9g}\n")
        else:
            for p, c in zip(cloud.points, cloud.colors):
                fh.write(f"{p[0]:.9g} {p[1]:.9g} {p[2]:.9g} {c[0]:.6g} {c[1]:.6g} {c[2]:.6g}\n")


_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


def read_ply(path) -> PointCloud:
    data = Path(path).read_bytes()
    end = data.find(b"end_header")
    if not data.startswith(b"ply") or end < 0:
        raise CloudFormatError(f"{path}: not a PLY file")
    nl = data.index(b"\n", end)
    header = data[:nl].decode("ascii").splitlines()
    body = data[nl + 1:]
    fmt = None
    n_vertex = None
    props: list[tuple[str, str]] = []
    in_vertex = False
    for line in header:
        tok = line.split()
        if not tok:
            continue
        if tok[0] == "format":
            fmt = tok[1]
        elif tok[0] == "element":
            in_vertex = tok[1] == "vertex"
            if in_vertex:
                n_vertex = int(tok[2])
        elif tok[0] == "property" and in_vertex:
            if tok[1] == "list":
                raise CloudFormatError(f"{path}: list properties on vertices unsupported")
            if tok[1] not in _PLY_TYPES:
                raise CloudFormatError(f"{path}: unknown property type {tok[1]}")
            props.append((tok[2], "<" + _PLY_TYPES[tok[1]]))
    if fmt != "binary_little_endian":
        raise CloudFormatError(f"{path}: only binary_little_endian PLY is supported (got {fmt})")
    if n_vertex is None:
        raise CloudFormatError(f"{path}: no vertex element")
    dtype = np.dtype(props)
    need = dtype.itemsize * n_vertex
    if len(body) < need:
        raise CloudFormatError(f"{path}: truncated vertex data ({len(body)} < {need} bytes)")
    verts = np.frombuffer(body[:need], dtype=dtype, count=n_vertex)
    names = set(dtype.names)
    if not {"x", "y", "z"} <= names:
        raise CloudFormatError(f"{path}: missing x/y/z properties")
    pts = np.stack([verts["x"], verts["y"], verts["z"]], axis=1).astype(np.float64)
    if {"red", "green", "blue"} <= names:
        cols = np.stack([verts["red"], verts["green"], verts["blue"]], axis=1).astype(np.float64) / 255.0
        return PointCloud(pts, cols)
    return PointCloud(pts)


def write_ply(path, cloud: PointCloud) -> None:
    fields = [("x", "<f4"), ("y", "<f4"), ("z", "<f4")]
    if cloud.colors is not None:
        fields += [("red", "u1"), ("green", "u1"), ("blue", "u1")]
    arr = np.zeros(len(cloud), dtype=fields)
    arr["x"], arr["y"], arr["z"] = cloud.points.T.astype(np.float32)
    lines = ["ply", "format binary_little_endian 1.0", f"element vertex {len(cloud)}",
             "property float x", "property float y", "property float z"]
    if cloud.colors is not None:
        rgb = np.clip(np.floor(cloud.colors * 255.0), 0, 255).astype(np.uint8)
        arr["red"], arr["green"], arr["blue"] = rgb.T
        lines += ["property uchar red", "property uchar green", "property uchar blue"]
    lines.append("end_header")
    with open(path, "wb") as fh:
        fh.write(("\n".join(lines) + "\n").encode("ascii"))
        fh.write(arr.tobytes())


def load_cloud(path) -> PointCloud:
    ext = os.path.splitext(str(path))[1].lower()
    if ext == ".ply":
        return read_ply(path)
    if ext in (".xyz", ".txt", ".pts"):
        return read_xyz(path)
    raise CloudFormatError(f"unrecognised point-cloud extension {ext!r}")


def save_cloud(path, cloud: PointCloud) -> None:
    ext = os.path.splitext(str(path))[1].lower()
    if ext == ".ply":
        write_ply(path, cloud)
    elif ext in (".xyz", ".txt", ".pts"):
        write_xyz(path, cloud)
    else:
        raise CloudFormatError(f"unrecognised point-cloud extension {ext!r}")
