import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lbc import gp
from lbc.evalcorrect import compute_error_samples
from lbc.features import FeatureVector, compute_features
from lbc.keypoints import normalized_intensity
from lbc.liegroup import Pose, between, exp_map, is_valid_pose, log_map
from lbc.odometry import OdometryConfig, prepare_frame, run_odometry
from lbc.pointcloud import PointFrame, compute_surface_stats, read_kitti_bin, write_kitti_bin
from lbc.synth import (
    Box,
    Cylinder,
    EmptySweep,
    Plane,
    SceneSampler,
    SceneSpec,
    feature_bias,
    floor_scene,
    generate_sequence,
    generate_sweep,
    heading,
    inject_bias,
    route_scene,
    route_trajectory,
    scene_from_json,
    scene_to_json,
    static_trajectory,
    straight_trajectory,
    study_route,
)
from lbc.trajectory import Trajectory


def mixed_scene(**kwargs):
    prims = (
        Plane(Pose.from_translation([0, 0, -1.7]), (60, 60), 0.3),
        Box(Pose(exp_map([0, 0, 0, 0, 0, 0.4]).rotation, [8, 3, -1.7]), (2, 3, 1.5), 0.7),
        Cylinder(Pose.from_translation([-5, -4, -1.7]), 0.3, 4.0, 0.9),
        Plane(Pose(exp_map([0, 0, 0, math.pi / 2, 0, 0]).rotation, [0, 9, 0]), (40, 6), 0.4),
    )
    return SceneSpec(prims, **kwargs)


def test_floor_points_below_sensor():
    f = generate_sweep(floor_scene(2.0, noise_std=0.0), Pose.identity())
    assert len(f) > 1000
    np.testing.assert_allclose(f.points[:, 2], -2.0, atol=1e-12)
    noisy = generate_sweep(floor_scene(2.0), Pose.identity())
    assert np.all(np.abs(noisy.points[:, 2] + 2.0) < 0.15)
    assert np.std(noisy.points[:, 2]) == pytest.approx(0.02, rel=0.1)


def test_noiseless_plane_is_exactly_planar():
    f = compute_surface_stats(generate_sweep(floor_scene(2.0, size=40.0, noise_std=0.0), Pose.identity()), k=15)
    interior = np.all(np.abs(f.points[:, :2]) < 15.0, axis=1)
    assert interior.sum() > 100
    assert np.all(f.stats.eigenvalues[interior, 0] < 1e-12)


def test_intensity_recovers_reflectance():
    f = generate_sweep(mixed_scene(reflectance_jitter=0.0), Pose.identity())
    refl = normalized_intensity(f)
    assert set(np.round(refl, 9)) <= {0.3, 0.7, 0.9, 0.4}


def test_range_cap():
    f = generate_sweep(mixed_scene(max_range=12.0, noise_std=0.0), Pose.identity())
    assert np.linalg.norm(f.points, axis=1).max() <= 12.0 + 1e-9


def test_deterministic_and_order_independent():
    scene = mixed_scene(seed=7)
    pose = exp_map([1, 2, 0, 0, 0, 0.3])
    a = generate_sweep(scene, pose, frame_index=4)
    b = generate_sweep(scene, pose, frame_index=4)
    assert a.points.tobytes() == b.points.tobytes()
    assert a.intensity.tobytes() == b.intensity.tobytes()
    traj = Trajectory([Pose.identity(), Pose.from_translation([1, 0, 0]), pose])
    seq = list(generate_sequence(scene, traj, start_index=2))
    assert seq[2].points.tobytes() == a.points.tobytes()
    other = generate_sweep(mixed_scene(seed=8), pose, frame_index=4)
    assert other.points.shape != a.points.shape or not np.array_equal(other.points, a.points)


def test_static_sequence_statistics():
    frames = list(generate_sequence(mixed_scene(), static_trajectory(5)))
    counts = np.array([len(f) for f in frames])
    # Poisson counts: all within 5 sigma of the mean
    assert np.all(np.abs(counts - counts.mean()) < 5 * np.sqrt(counts.mean()))
    centroids = np.array([f.points.mean(axis=0) for f in frames])
    assert np.ptp(centroids, axis=0).max() < 0.5
    assert len({f.points.tobytes() for f in frames}) == 5


def test_empty_sweep():
    with pytest.raises(EmptySweep):
        generate_sweep(mixed_scene(max_range=20.0), Pose.from_translation([500, 500, 0]))
    with pytest.raises(EmptySweep):
        generate_sweep(SceneSpec(()), Pose.identity())


@pytest.mark.parametrize(
    "kwargs", [{"point_density": 0.0}, {"noise_std": -0.1}, {"max_range": 0.0}, {"falloff_range": -1.0}]
)
def test_invalid_scene(kwargs):
    with pytest.raises(ValueError):
        mixed_scene(**kwargs)


def test_bin_round_trip(tmp_path):
    f = generate_sweep(mixed_scene(), Pose.identity())
    write_kitti_bin(tmp_path / "000000.bin", f)
    back = read_kitti_bin(tmp_path / "000000.bin")
    np.testing.assert_array_equal(back.points, f.points.astype(np.float32).astype(float))
    np.testing.assert_array_equal(back.intensity, f.intensity.astype(np.float32).astype(float))


def test_scene_json_round_trip():
    scene = route_scene(study_route(80), seed=2)
    back = scene_from_json(scene_to_json(scene))
    assert scene_to_json(back) == scene_to_json(scene)
    pose = exp_map([20, 1, 0, 0, 0, 0.1])
    assert generate_sweep(back, pose, 3).points.tobytes() == generate_sweep(scene, pose, 3).points.tobytes()


def test_scene_json_rejects_unknown_primitive():
    doc = scene_to_json(mixed_scene()).replace('"cylinder"', '"cone"')
    with pytest.raises(ValueError):
        scene_from_json(doc)


def test_straight_path_length():
    assert straight_trajectory(100).path_lengths()[-1] == pytest.approx(99.0, abs=1e-12)


def test_turn_heading_change():
    traj = route_trajectory(80, turns=[(20, math.pi / 2, 25)])
    assert heading(traj[0]) == 0.0
    assert heading(traj[-1]) == pytest.approx(math.pi / 2, abs=1e-12)
    assert traj.path_lengths()[-1] == pytest.approx(79.0, abs=1e-9)


def test_route_shape():
    traj = route_trajectory(120, turns=[(10, 1.0, 30)], bumps=[(50, 1.0, 40)], ramp=20)
    assert all(is_valid_pose(p) for p in traj.poses)
    steps = np.linalg.norm(np.diff(traj.positions(), axis=0), axis=1)
    assert steps[0] < 0.1 and steps[30] == pytest.approx(1.0, abs=0.05)
    assert traj.positions()[70, 2] == pytest.approx(1.0, abs=1e-9)


def _overhead_counts(scene, length, zone):
    overhead = [p for p in scene.primitives if isinstance(p, Plane) and abs(p.pose.rotation[2, 2]) > 0.9]
    x = np.array([p.pose.translation[0] for p in overhead if p.pose.translation[2] > 0])
    return np.histogram(x, bins=np.arange(-40.0, length - 40.0 + 1e-9, zone))[0]


def test_zones_vary_overhead_cover():
    traj = straight_trajectory(1201)
    # zones start max_range (40 m) before the route
    counts = _overhead_counts(route_scene(traj, seed=4, zone_length=100.0, max_range=40.0), 1200, 100.0)
    assert counts.min() >= 1
    assert counts.max() >= 2 * counts.min()
    assert scene_to_json(route_scene(traj, seed=4, zone_length=100.0)) == scene_to_json(
        route_scene(traj, seed=4, zone_length=100.0)
    )
    assert scene_to_json(route_scene(traj, seed=4)) == scene_to_json(route_scene(traj, seed=4, zone_length=None))


def random_route(rng, n):
    return Trajectory.from_relative(
        [exp_map(np.concatenate([[1.0, 0, 0] + rng.normal(0, 0.1, 3), rng.normal(0, 0.03, 3)])) for _ in range(n)]
    )


def random_features(rng, n):
    return [FeatureVector(rng.uniform(size=3), rng.uniform(size=16) / 16, k) for k in range(n)]


def test_zero_bias_is_identity():
    rng = np.random.default_rng(0)
    base = random_route(rng, 30)
    out = inject_bias(base, lambda f: np.zeros(6), random_features(rng, 31))
    for p, q in zip(base.poses, out.poses):
        np.testing.assert_allclose(p.matrix(), q.matrix(), atol=1e-12)


def test_constant_z_bias():
    rng = np.random.default_rng(1)
    gt = random_route(rng, 40)
    out = inject_bias(gt, lambda f: np.array([0, 0, 1e-3, 0, 0, 0]), random_features(rng, 41))
    for s in compute_error_samples(out, gt, kappa=1):
        np.testing.assert_allclose(s.xi, [0, 0, 1e-3, 0, 0, 0], atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_bias_recovered_exactly(seed):
    rng = np.random.default_rng(seed)
    gt = random_route(rng, 30)
    feats = random_features(rng, 31)
    w = rng.normal(0, 0.01, (6, 3))

    def bias(f):
        return w @ f.normal_sum

    out = inject_bias(gt, bias, feats)
    for s in compute_error_samples(out, gt, kappa=1):
        np.testing.assert_allclose(s.xi, bias(feats[s.frame_index]), atol=1e-10)


def test_inject_bias_length_check():
    rng = np.random.default_rng(2)
    with pytest.raises(ValueError):
        inject_bias(random_route(rng, 10), lambda f: np.zeros(6), random_features(rng, 5))


def test_feature_bias_shape_and_noise():
    f = FeatureVector(np.array([0.05, 0.12, 0.38]), np.zeros(16))
    clean = feature_bias(relative_noise=0.0)(f)
    np.testing.assert_allclose(clean, [0, 0, 0.012, 0, 0, 0], atol=1e-15)
    b = feature_bias(seed=3)
    noisy = np.array([b(f)[2] for _ in range(400)])
    assert np.std(noisy / 0.012) == pytest.approx(0.1, rel=0.2)
    again = feature_bias(seed=3)
    assert again(f)[2] == noisy[0]


@pytest.fixture(scope="module")
def route_features():
    traj = study_route(160)
    scene = route_scene(traj, seed=3)
    cfg = OdometryConfig()
    feats = []
    for frame in generate_sequence(scene, traj):
        frame, keys = prepare_frame(frame, cfg)
        feats.append(compute_features(frame, keys))
    return traj, feats


def test_gp_learns_linear_bias(route_features):
    traj, feats = route_features

    def bias(f):
        return np.array([0, 0, 0.05 * f.normal_sum[2], 0, 0, 0])

    out = inject_bias(traj, bias, feats)
    samples = compute_error_samples(out, traj, kappa=1)
    X = np.array([feats[s.frame_index].normal_sum for s in samples])
    y = np.array([s.xi[2] for s in samples])
    half = len(y) // 2
    model = gp.fit(X[:half], y[:half], restarts=2)
    pred, _ = gp.predict(model, X[half:])
    r2 = 1.0 - np.sum((pred - y[half:]) ** 2) / np.sum((y[half:] - y[half:].mean()) ** 2)
    assert r2 > 0.95


def test_features_vary_along_route(route_features):
    _, feats = route_features
    ns = np.array([f.normal_sum for f in feats])
    assert np.all(ns.std(axis=0) > 0.01)
    az = np.array([f.azimuth_slices for f in feats])
    assert az.sum(axis=1).max() > 0


# ----------------------------------------------------------------- odometry on synthetic sweeps


def test_identical_frames_give_identity():
    frame = generate_sweep(route_scene(straight_trajectory(10), seed=1), Pose.identity())
    res = run_odometry([frame] * 5)
    for p in res.trajectory.poses:
        xi = log_map(p)
        assert np.abs(xi).max() < 1e-6
    assert res.flagged == []


def test_two_frames():
    traj = straight_trajectory(12, 0.5)
    frames = list(generate_sequence(route_scene(traj, seed=4), Trajectory(traj.poses[:2])))
    res = run_odometry(frames)
    assert len(res.trajectory) == 2
    assert np.linalg.norm(res.trajectory[1].translation - [0.5, 0, 0]) < 0.05


def test_needs_two_frames():
    frame = generate_sweep(floor_scene(), Pose.identity())
    with pytest.raises(ValueError):
        run_odometry([frame])


@pytest.mark.slow
def test_corridor_one_metre_per_frame():
    gt = straight_trajectory(60, 1.0)
    frames = generate_sequence(route_scene(gt, seed=0), gt)
    res = run_odometry(frames, initial_motion=gt.relative(0, 1))
    steps = np.linalg.norm(np.diff(res.trajectory.positions(), axis=0), axis=1)
    assert res.flagged == []
    assert abs(steps.mean() - 1.0) < 0.01
    assert np.median(np.abs(steps - 1.0)) < 0.03
    assert np.linalg.norm(res.trajectory[-1].translation - gt[-1].translation) < 0.01 * 59


@pytest.mark.slow
def test_long_run_stays_on_the_group():
    gt = study_route(150)
    res = run_odometry(generate_sequence(route_scene(gt, seed=3), gt))
    for p in res.trajectory.poses:
        r = p.rotation
        assert np.abs(r.T @ r - np.eye(3)).max() < 1e-12
        assert abs(np.linalg.det(r) - 1.0) < 1e-12
    assert res.flagged == []
    err = between(res.trajectory[-1], gt[-1])
    assert np.linalg.norm(err.translation) < 0.02 * gt.path_lengths()[-1]
