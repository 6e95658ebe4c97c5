import numpy as np
import pytest

from fracflow.geometry import PointCloud
from fracflow.io import CloudFormatError, load_cloud, read_ply, read_xyz, save_cloud


def test_xyz_round_trip(tmp_path):
    pts = np.random.default_rng(0).standard_normal((50, 3))
    save_cloud(tmp_path / "a.xyz", PointCloud(pts))
    np.testing.assert_allclose(load_cloud(tmp_path / "a.xyz").points, pts, rtol=1e-8)


def test_xyz_with_colors_and_comments(tmp_path):
    p = tmp_path / "c.xyz"
    p.write_text("# header\n0 0 0 255 0 0\n\n1 2 3 0 128 255  # trailing\n")
    cloud = read_xyz(p)
    assert len(cloud) == 2
    np.testing.assert_allclose(cloud.colors[1], [0, 128 / 255, 1.0])


def test_xyz_unit_colors_kept(tmp_path):
    p = tmp_path / "c.xyz"
    p.write_text("0 0 0 0.5 0.25 1\n")
    np.testing.assert_allclose(read_xyz(p).colors, [[0.5, 0.25, 1.0]])


@pytest.mark.parametrize("body,msg", [("1 2\n", "expected 3 or 6"), ("1 2 x\n", "could not convert"),
                                      ("0 0 0\n0 0 0 1 1 1\n", "mixed rows")])
def test_xyz_errors(tmp_path, body, msg):
    p = tmp_path / "bad.xyz"
    p.write_text(body)
    with pytest.raises(CloudFormatError, match=msg):
        read_xyz(p)


def test_ply_round_trip(tmp_path):
    rng = np.random.default_rng(1)
    pts = rng.random((40, 3)).astype(np.float32).astype(np.float64)
    cols = rng.integers(0, 256, (40, 3)) / 255.0
    save_cloud(tmp_path / "a.ply", PointCloud(pts, cols))
    back = load_cloud(tmp_path / "a.ply")
    assert np.array_equal(back.points, pts)
    np.testing.assert_allclose(back.colors, cols, atol=1e-12)


def test_ply_header(tmp_path):
    save_cloud(tmp_path / "a.ply", PointCloud(np.zeros((3, 3))))
    head = (tmp_path / "a.ply").read_bytes().split(b"end_header")[0].decode()
    assert "binary_little_endian" in head and "element vertex 3" in head and "property float x" in head


def test_ply_extra_properties(tmp_path):
    dt = np.dtype([("x", "<f4"), ("nx", "<f4"), ("y", "<f4"), ("z", "<f4")])
    arr = np.zeros(2, dtype=dt)
    arr["x"], arr["y"], arr["z"] = [1, 2], [3, 4], [5, 6]
    header = ("ply\nformat binary_little_endian 1.0\nelement vertex 2\nproperty float x\n"
              "property float nx\nproperty float y\nproperty float z\nend_header\n")
    (tmp_path / "e.ply").write_bytes(header.encode() + arr.tobytes())
    np.testing.assert_array_equal(read_ply(tmp_path / "e.ply").points, [[1, 3, 5], [2, 4, 6]])


def test_ply_errors(tmp_path):
    save_cloud(tmp_path / "a.ply", PointCloud(np.zeros((10, 3))))
    data = (tmp_path / "a.ply").read_bytes()
    (tmp_path / "t.ply").write_bytes(data[:-7])
    with pytest.raises(CloudFormatError, match="truncated"):
        read_ply(tmp_path / "t.ply")
    (tmp_path / "ascii.ply").write_bytes(data.replace(b"binary_little_endian", b"ascii"))
    with pytest.raises(CloudFormatError, match="binary_little_endian"):
        read_ply(tmp_path / "ascii.ply")
    (tmp_path / "junk.ply").write_bytes(b"hello")
    with pytest.raises(CloudFormatError):
        read_ply(tmp_path / "junk.ply")


def test_unknown_extension(tmp_path):
    with pytest.raises(CloudFormatError):
        save_cloud(tmp_path / "a.obj", PointCloud(np.zeros((1, 3))))
    with pytest.raises(CloudFormatError):
        load_cloud(tmp_path / "a.obj")
