import math

import numpy as np
import pytest

from lbc.features import (
    FeatureVector,
    azimuth_slice,
    azimuth_slice_feature,
    compute_features,
    normal_sum_feature,
    read_feature_csv,
    write_feature_csv,
)
from lbc.keypoints import KeypointSet
from lbc.pointcloud import PointFrame, SurfaceStats, compute_surface_stats


def frame_with_normals(points, normals):
    n = len(points)
    st = SurfaceStats(np.asarray(normals, float), np.ones((n, 3)), np.full(n, 20), np.ones(n, bool))
    return PointFrame(points, np.ones(n), stats=st)


def keys(n, planar_mask):
    return KeypointSet(np.arange(n), np.asarray(planar_mask, bool))


def test_no_planar_keypoints():
    rng = np.random.default_rng(0)
    f = frame_with_normals(rng.normal(size=(100, 3)) + 5, np.tile([0, 0, 1.0], (100, 1)))
    k = keys(100, np.zeros(100))
    np.testing.assert_array_equal(normal_sum_feature(f, k), np.zeros(3))
    np.testing.assert_array_equal(azimuth_slice_feature(f, k), np.zeros(16))


def test_normal_sum_half_planar():
    rng = np.random.default_rng(1)
    f = frame_with_normals(rng.normal(size=(100, 3)) + 5, np.tile([0, 0, 1.0], (100, 1)))
    np.testing.assert_allclose(normal_sum_feature(f, keys(100, np.arange(100) < 50)), [0, 0, 0.5])


def test_normal_sum_mixed():
    rng = np.random.default_rng(2)
    normals = np.vstack([np.tile([1.0, 0, 0], (20, 1)), np.tile([0, -1.0, 0], (30, 1)), np.tile([0, 0, 1.0], (50, 1))])
    f = frame_with_normals(rng.normal(size=(100, 3)) + 5, normals)
    np.testing.assert_allclose(normal_sum_feature(f, keys(100, np.arange(100) < 50)), [0.2, 0.3, 0.0])


def test_azimuth_uniform():
    centres = -math.pi + (np.arange(16) + 0.5) * 2 * math.pi / 16
    ang = np.repeat(centres, 4) + np.tile([-0.1, -0.05, 0.05, 0.1], 16)
    pts = np.column_stack([10 * np.cos(ang), 10 * np.sin(ang), np.zeros(64)])
    f = frame_with_normals(pts, np.tile([0, 0, 1.0], (64, 1)))
    np.testing.assert_allclose(azimuth_slice_feature(f, keys(64, np.ones(64))), np.full(16, 1 / 16))


def test_azimuth_single_slice():
    pts = np.column_stack([np.linspace(2, 20, 100), np.zeros(100), np.zeros(100)])
    normals = np.tile([1.0, 0, 0], (100, 1))
    normals[:10] = [0, 0, 1.0]
    f = frame_with_normals(pts, normals)
    az = azimuth_slice_feature(f, keys(100, np.ones(100)))
    expected = np.zeros(16)
    expected[azimuth_slice(np.array([[1.0, 0, 0]]))[0]] = 0.1
    np.testing.assert_allclose(az, expected)
    assert azimuth_slice(np.array([[1.0, 0, 0]]))[0] == 8


def test_azimuth_threshold_and_bounds():
    pts = np.array([[-1.0, -1e-300, 0.0], [-1.0, 0.0, 0.0], [1.0, 1.0, 1.0]])
    s = azimuth_slice(pts)
    assert s.min() >= 0 and s.max() <= 15
    normals = np.array([[0, 0.5, math.sqrt(0.75)], [0, 0, 1.0], [0, 0, -1.0]])
    f = frame_with_normals(pts, normals)
    az = azimuth_slice_feature(f, keys(3, np.ones(3)), z_threshold=0.9)
    assert az.sum() == pytest.approx(2 / 3)


def rotate_z(points, angle):
    c, s = math.cos(angle), math.sin(angle)
    r = np.array([[c, -s, 0], [s, c, 0], [0, 0, 1.0]])
    return points @ r.T, r


def test_rotation_permutes_slices():
    rng = np.random.default_rng(3)
    # keep away from sector boundaries
    sector = rng.integers(0, 16, 400)
    ang = -math.pi + (sector + rng.uniform(0.1, 0.9, 400)) * 2 * math.pi / 16
    rad = rng.uniform(3, 30, 400)
    pts = np.column_stack([rad * np.cos(ang), rad * np.sin(ang), rng.uniform(-1, 2, 400)])
    normals = rng.normal(size=(400, 3))
    normals[:200] = [0, 0, 1.0]
    normals /= np.linalg.norm(normals, axis=1)[:, None]
    k = keys(400, rng.uniform(size=400) < 0.7)
    base = compute_features(frame_with_normals(pts, normals), k)
    rp, r = rotate_z(pts, 2 * math.pi / 16)
    turned = compute_features(frame_with_normals(rp, normals @ r.T), k)
    np.testing.assert_array_equal(turned.azimuth_slices, np.roll(base.azimuth_slices, 1))
    assert turned.normal_sum[2] == pytest.approx(base.normal_sum[2], abs=1e-15)


def test_scale_invariance_through_surface_stats():
    rng = np.random.default_rng(4)
    a = rng.uniform(-6, 6, (600, 2))
    pts = np.vstack(
        [
            np.column_stack([a[:200, 0], a[:200, 1], np.full(200, 1.0)]),
            np.column_stack([np.full(200, 7.0), a[200:400, 0], a[200:400, 1] / 3]),
            rng.normal(size=(200, 3)) * 2 + [-8, 3, 0],
        ]
    )
    k = keys(600, np.arange(600) % 3 != 2)
    base = compute_features(compute_surface_stats(PointFrame(pts, np.ones(600)), k=15), k)
    for scale in (0.37, 3.0, 11.5):
        scaled = compute_features(compute_surface_stats(PointFrame(pts * scale, np.ones(600)), k=15), k)
        np.testing.assert_allclose(scaled.normal_sum, base.normal_sum, atol=1e-12)
        np.testing.assert_array_equal(scaled.azimuth_slices, base.azimuth_slices)


def test_permutation_invariance():
    rng = np.random.default_rng(5)
    pts = rng.normal(size=(300, 3)) * 5 + [0, 0, 8]
    normals = rng.normal(size=(300, 3))
    normals /= np.linalg.norm(normals, axis=1)[:, None]
    planar = rng.uniform(size=300) < 0.5
    perm = rng.permutation(300)
    a = compute_features(frame_with_normals(pts, normals), keys(300, planar))
    b = compute_features(frame_with_normals(pts[perm], normals[perm]), keys(300, planar[perm]))
    np.testing.assert_allclose(a.normal_sum, b.normal_sum, atol=1e-15)
    np.testing.assert_array_equal(a.azimuth_slices, b.azimuth_slices)


def test_feature_bounds():
    rng = np.random.default_rng(6)
    pts = rng.normal(size=(200, 3)) * 10 + [0, 0, 30]
    normals = rng.normal(size=(200, 3))
    normals /= np.linalg.norm(normals, axis=1)[:, None]
    planar = rng.uniform(size=200) < 0.6
    fv = compute_features(frame_with_normals(pts, normals), keys(200, planar))
    assert np.all(fv.normal_sum >= 0) and np.all(fv.normal_sum <= planar.sum() / 200 + 1e-15)
    assert fv.azimuth_slices.sum() <= 1.0


def test_csv_round_trip(tmp_path):
    rng = np.random.default_rng(7)
    feats = [FeatureVector(rng.uniform(size=3), rng.uniform(size=16) / 16, i) for i in range(5)]
    write_feature_csv(tmp_path / "f.csv", feats)
    header = (tmp_path / "f.csv").read_text().splitlines()[0]
    assert header == "frame_index,ns_x,ns_y,ns_z," + ",".join(f"az_{i}" for i in range(16))
    back = read_feature_csv(tmp_path / "f.csv")
    for a, b in zip(feats, back):
        assert a.frame_index == b.frame_index
        np.testing.assert_array_equal(a.normal_sum, b.normal_sum)
        np.testing.assert_array_equal(a.azimuth_slices, b.azimuth_slices)
