import struct

import numpy as np
import pytest

from pointnerf.core import CameraModel
from pointnerf.field import NeuralPointCloud
from pointnerf.pointgen import (DepthViewInput, FeatureInitStrategy, PlyError, confidence_from_volume, init_cloud,
                                cloud_from_depth_views, load_cloud_ply, load_ply, merge_clouds, read_pfm, read_probvol, save_cloud_ply,
                                save_ply, unproject_depth, write_pfm, write_probvol)
from conftest import random_pose


def test_unproject_principal_pixel():
    cam = CameraModel(10.0, 10.0, 2.5, 2.5, 5, 5)
    depth = np.zeros((5, 5))
    depth[2, 2] = 2.0
    np.testing.assert_allclose(unproject_depth(DepthViewInput(cam, depth)), [[0, 0, 2.0]], atol=1e-15)


def test_unproject_skips_invalid_and_all_invalid(rng):
    cam = CameraModel(10.0, 10.0, 3, 3, 6, 6)
    depth = rng.uniform(1, 2, (6, 6)) * (rng.uniform(size=(6, 6)) > 0.4)
    assert len(unproject_depth(DepthViewInput(cam, depth))) == (depth > 0).sum()
    assert len(unproject_depth(DepthViewInput(cam, depth), stride=2)) == (depth[::2, ::2] > 0).sum()
    assert unproject_depth(DepthViewInput(cam, np.zeros((6, 6)))).shape == (0, 3)
    with pytest.raises(ValueError):
        unproject_depth(DepthViewInput(cam, depth), stride=0)


def test_unproject_reproject_round_trip(rng):
    cam = CameraModel(30.0, 28.0, 10.3, 8.1, 20, 16, random_pose(rng))
    depth = rng.uniform(1, 5, (16, 20))
    pts = unproject_depth(DepthViewInput(cam, depth))
    pc = cam.to_camera(pts)
    py, px = np.mgrid[0:16, 0:20]
    np.testing.assert_allclose(pc[:, 2], depth.ravel(), rtol=1e-9)
    np.testing.assert_allclose(cam.fx * pc[:, 0] / pc[:, 2] + cam.cx - 0.5, px.ravel(), atol=1e-9)
    np.testing.assert_allclose(cam.fy * pc[:, 1] / pc[:, 2] + cam.cy - 0.5, py.ravel(), atol=1e-9)


def test_depth_cloud_direction_channels(rng):
    views = []
    for k in range(2):
        cam = CameraModel(30.0, 28.0, 10.3, 8.1, 20, 16, random_pose(rng))
        depth = rng.uniform(1, 5, (16, 20)) * (rng.uniform(size=(16, 20)) > 0.3)
        views.append(DepthViewInput(cam, depth))
    cloud = cloud_from_depth_views(views, stride=3, D=8)
    n0 = len(unproject_depth(views[0], 3))
    assert len(cloud) == n0 + len(unproject_depth(views[1], 3))
    for view, rows in ((views[0], slice(0, n0)), (views[1], slice(n0, None))):
        rel = cloud.positions[rows] - view.camera.center
        np.testing.assert_allclose(cloud.features[rows, -3:], rel / np.linalg.norm(rel, axis=1)[:, None],
                                   atol=1e-12)
    np.testing.assert_allclose(cloud.gammas, 0.3)


def volume_view(rng, h=6, w=7, P=5, pose=None):
    cam = CameraModel(12.0, 12.0, w / 2, h / 2, w, h, pose if pose is not None else np.eye(4)[:3])
    planes = np.cumsum(rng.uniform(0.2, 0.5, P)) + 1.0
    return DepthViewInput(cam, np.zeros((h, w)), rng.uniform(0, 1, (h, w, P)), planes)


def pixel_point(view, px, py, z):
    cam = view.camera
    return cam.to_world(np.array([(px + 0.5 - cam.cx) / cam.fx * z, (py + 0.5 - cam.cy) / cam.fy * z, z]))


def test_confidence_at_node_and_between_planes(rng):
    v = volume_view(rng)
    g, _ = confidence_from_volume(v, pixel_point(v, 3, 2, v.planes[1])[None])
    assert g[0] == v.prob[2, 3, 1]
    z = 0.5 * (v.planes[2] + v.planes[3])
    g, _ = confidence_from_volume(v, pixel_point(v, 4, 1, z)[None])
    assert g[0] == pytest.approx(0.5 * (v.prob[1, 4, 2] + v.prob[1, 4, 3]), abs=1e-12)


def trilinear_oracle(v, p):
    cam = v.camera
    x, y, z = cam.to_camera(p)
    fx, fy = cam.fx * x / z + cam.cx - 0.5, cam.fy * y / z + cam.cy - 0.5
    h, w, P = v.prob.shape
    fx, fy = min(max(fx, 0), w - 1), min(max(fy, 0), h - 1)
    i0, j0 = min(int(np.floor(fx)), w - 2), min(int(np.floor(fy)), h - 2)
    k0 = max(k for k in range(P - 1) if v.planes[k] <= z)
    tx, ty = fx - i0, fy - j0
    tz = (z - v.planes[k0]) / (v.planes[k0 + 1] - v.planes[k0])
    total = 0.0
    for dj in (0, 1):
        for di in (0, 1):
            for dk in (0, 1):
                wgt = (ty if dj else 1 - ty) * (tx if di else 1 - tx) * (tz if dk else 1 - tz)
                total += wgt * v.prob[j0 + dj, i0 + di, k0 + dk]
    return total


def test_confidence_matches_trilinear_oracle(rng):
    v = volume_view(rng, pose=random_pose(rng))
    pts = np.array([pixel_point(v, rng.uniform(-0.5, 6.5), rng.uniform(-0.5, 5.5),
                                rng.uniform(v.planes[0], v.planes[-1])) for _ in range(200)])
    g, n_out = confidence_from_volume(v, pts)
    assert n_out == 0
    for p, gi in zip(pts, g):
        assert gi == pytest.approx(trilinear_oracle(v, p), abs=1e-12)
    assert np.all((g >= 0) & (g <= 1))


def test_confidence_outside_gets_floor(rng):
    v = volume_view(rng)
    pts = np.array([pixel_point(v, 20, 2, v.planes[1]), pixel_point(v, 2, 2, v.planes[-1] + 1),
                    [0, 0, -3.0], pixel_point(v, 2, 2, v.planes[1])])
    g, n_out = confidence_from_volume(v, pts)
    assert n_out == 3
    np.testing.assert_array_equal(g[:3], 1e-4)


def test_volume_validation(rng):
    cam = CameraModel(1, 1, 1, 1, 2, 2)
    with pytest.raises(ValueError):
        DepthViewInput(cam, np.zeros((2, 2)), np.zeros((2, 2, 2)), [1.0, 1.0])
    with pytest.raises(ValueError):
        DepthViewInput(cam, np.zeros((2, 2)), np.full((2, 2, 2), np.nan), [1.0, 2.0])


def test_init_cloud_defaults_and_strategies(rng):
    pos = rng.normal(size=(100, 3))
    c = init_cloud(pos)
    np.testing.assert_allclose(c.gammas, 0.3, rtol=1e-12)
    assert c.feature_dim == 59
    assert abs(c.features.std() - np.sqrt(2 / 59)) < 0.01
    assert np.all(init_cloud(pos, strategy=FeatureInitStrategy("zeros")).features == 0)
    a, b = init_cloud(pos, D=8), init_cloud(pos, D=8)
    np.testing.assert_array_equal(a.features, b.features)
    cols = rng.uniform(size=(100, 3))
    cc = init_cloud(pos, strategy=FeatureInitStrategy("from_point_colors"), D=8, colors=cols)
    np.testing.assert_array_equal(cc.features[:, :3], cols)
    with pytest.raises(ValueError):
        init_cloud(pos, strategy=FeatureInitStrategy("from_point_colors"))
    with pytest.raises(ValueError):
        FeatureInitStrategy("pretrained")
    with pytest.raises(ValueError):
        init_cloud(pos, D=0)


def test_merge(rng):
    a = init_cloud(rng.normal(size=(3, 3)), D=4)
    b = init_cloud(rng.normal(size=(5, 3)), D=4, strategy=FeatureInitStrategy(seed=9))
    m = merge_clouds([a, b])
    assert len(m) == 8
    np.testing.assert_array_equal(m.positions, np.concatenate([a.positions, b.positions]))
    np.testing.assert_array_equal(m.features[3:], b.features)
    one = merge_clouds([a])
    np.testing.assert_array_equal(one.features, a.features)
    with pytest.raises(ValueError):
        merge_clouds([a, init_cloud(np.zeros((1, 3)), D=5)])


def test_ply_minimal_ascii(tmp_path):
    p = tmp_path / "m.ply"
    p.write_text("ply\nformat ascii 1.0\ncomment hi\nelement vertex 2\nproperty float x\nproperty float y\n"
                 "property float z\nproperty float nx\nend_header\n0 1 2 9\n3 4 5 9\n")
    d = load_ply(p)
    np.testing.assert_array_equal(d.positions, [[0, 1, 2], [3, 4, 5]])
    assert d.colors is None and d.confidence is None and d.features is None


def independent_binary_ply(path, rows):
    """Hand-packed binary PLY: double xyz, uchar rgb, a skipped int, then a face list element."""
    header = ("ply\nformat binary_little_endian 1.0\nelement vertex %d\n"
              "property double x\nproperty double y\nproperty double z\n"
              "property uchar red\nproperty uchar green\nproperty uchar blue\nproperty int flags\n"
              "element face 1\nproperty list uchar int vertex_indices\nend_header\n" % len(rows))
    body = b"".join(struct.pack("<dddBBBi", *r) for r in rows) + struct.pack("<Biii", 3, 0, 1, 2)
    path.write_bytes(header.encode() + body)


def test_ply_binary_fixture(tmp_path):
    rows = [(0.5, -1.25, 3.0, 255, 0, 17, 7), (1e-3, 2.0, -4.5, 1, 2, 3, -1), (9.0, 8.0, 7.0, 10, 20, 30, 0)]
    p = tmp_path / "b.ply"
    independent_binary_ply(p, rows)
    d = load_ply(p)
    np.testing.assert_array_equal(d.positions, [r[:3] for r in rows])
    np.testing.assert_array_equal(d.colors, [r[3:6] for r in rows])
    assert d.colors.dtype == np.uint8


@pytest.mark.parametrize("ascii", [False, True])
def test_ply_round_trip(tmp_path, rng, ascii):
    pos, col = rng.normal(size=(20, 3)), rng.integers(0, 256, (20, 3))
    conf, feat = rng.uniform(size=20), rng.normal(size=(20, 12))
    p = tmp_path / "r.ply"
    save_ply(p, pos, col, conf, feat, ascii=ascii)
    d = load_ply(p)
    np.testing.assert_array_equal(d.positions, pos.astype(np.float32))
    np.testing.assert_array_equal(d.colors, col)
    np.testing.assert_array_equal(d.confidence, conf.astype(np.float32))
    np.testing.assert_array_equal(d.features, feat.astype(np.float32))


def test_cloud_ply_round_trip(tmp_path, rng):
    c = NeuralPointCloud(rng.normal(size=(10, 3)), rng.normal(size=(10, 5)), rng.normal(size=10))
    save_cloud_ply(tmp_path / "c.ply", c)
    back = load_cloud_ply(tmp_path / "c.ply")
    np.testing.assert_allclose(back.positions, c.positions, rtol=1e-6)
    np.testing.assert_allclose(back.gammas, c.gammas, rtol=1e-6)
    np.testing.assert_allclose(back.features, c.features, rtol=1e-6, atol=1e-7)


@pytest.mark.parametrize("text,where", [
    ("plx\n", "line 1"),
    ("ply\nformat binary_big_endian 1.0\nend_header\n", "line 2"),
    ("ply\nformat ascii 1.0\nelement vertex two\nend_header\n", "line 3"),
    ("ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nproperty bogus y\nend_header\n", "line 5"),
])
def test_ply_header_errors(tmp_path, text, where):
    p = tmp_path / "e.ply"
    p.write_bytes(text.encode())
    with pytest.raises(PlyError, match=where):
        load_ply(p)


def test_ply_truncated_data(tmp_path):
    p = tmp_path / "t.ply"
    save_ply(p, np.zeros((4, 3)))
    p.write_bytes(p.read_bytes()[:-5])
    with pytest.raises(PlyError, match="offset"):
        load_ply(p)
    q = tmp_path / "ta.ply"
    q.write_text("ply\nformat ascii 1.0\nelement vertex 3\nproperty float x\nproperty float y\n"
                 "property float z\nend_header\n0 0 0\n1 1 1\n")
    with pytest.raises(PlyError, match="expected 3 rows"):
        load_ply(q)


def test_ply_missing_xyz_and_features(tmp_path):
    p = tmp_path / "n.ply"
    p.write_text("ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nproperty float y\nend_header\n0 0\n")
    with pytest.raises(PlyError):
        load_ply(p)
    save_ply(tmp_path / "nf.ply", np.zeros((1, 3)))
    with pytest.raises(PlyError):
        load_cloud_ply(tmp_path / "nf.ply")


def test_pfm_round_trip_and_layout(tmp_path, rng):
    d = rng.uniform(0, 5, (4, 6)).astype(np.float32).astype(np.float64)
    write_pfm(tmp_path / "d.pfm", d)
    raw = (tmp_path / "d.pfm").read_bytes()
    assert raw.startswith(b"Pf\n6 4\n-1.0\n")
    # first stored row is the bottom image row
    assert np.frombuffer(raw[len(b"Pf\n6 4\n-1.0\n"):], "<f4", count=6).tolist() == d[-1].tolist()
    np.testing.assert_array_equal(read_pfm(tmp_path / "d.pfm"), d)


def test_probvol_round_trip(tmp_path, rng):
    prob = rng.uniform(size=(3, 4, 5)).astype(np.float32).astype(np.float64)
    planes = np.array([1.0, 1.5, 2.0, 2.5, 3.0])
    write_probvol(tmp_path / "v.bin", prob, planes)
    assert (tmp_path / "v.bin").read_bytes().startswith(b"3 4 5\n")
    p2, pl2 = read_probvol(tmp_path / "v.bin")
    np.testing.assert_array_equal(p2, prob)
    np.testing.assert_array_equal(pl2, planes)
