"""Synthetic scenes, sweeps and trajectories with exact ground truth.

Surfaces are sampled directly at a fixed areal density instead of casting
beams, and there is no occlusion.  Planes are visible from both sides, box
faces only from outside, cylinders only on the half facing the sensor.
Every sweep draws from a Philox stream keyed by ``(seed, frame_index)``, so
a frame does not depend on which other frames were generated.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .features import FeatureVector
from .liegroup import Pose, exp_map, inverse
from .pointcloud import PointFrame
from .trajectory import Trajectory

MAX_RANGE = 80.0
SENSOR_HEIGHT = 1.73  # m above the floor, as on the KITTI car


class EmptySweep(ValueError):
    pass


@dataclass(frozen=True)
class Plane:
    """Rectangle ``extent = (sx, sy)`` in the local xy plane, centred on the pose origin."""

    pose: Pose
    extent: tuple[float, float]
    reflectance: float = 0.3
    density_scale: float = 1.0


@dataclass(frozen=True)
class Box:
    """Box ``extent = (sx, sy, sz)`` resting on the local xy plane, centred in x and y."""

    pose: Pose
    extent: tuple[float, float, float]
    reflectance: float = 0.5
    density_scale: float = 1.0


@dataclass(frozen=True)
class Cylinder:
    """Vertical lateral surface standing on the pose origin along local z."""

    pose: Pose
    radius: float
    height: float
    reflectance: float = 0.6
    density_scale: float = 1.0


Primitive = Plane | Box | Cylinder


@dataclass(frozen=True)
class SceneSpec:
    primitives: tuple
    point_density: float = 4.0  # points per m^2
    noise_std: float = 0.02
    seed: int = 0
    max_range: float = MAX_RANGE
    reflectance_jitter: float = 0.1  # relative spread of per-point reflectance
    # beyond this range density falls off as 1/r^2, like a spinning lidar; None keeps it uniform
    falloff_range: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "primitives", tuple(self.primitives))
        if not self.point_density > 0:
            raise ValueError("point_density must be positive")
        if self.noise_std < 0 or self.reflectance_jitter < 0:
            raise ValueError("noise_std and reflectance_jitter must be non-negative")
        if not self.max_range > 0:
            raise ValueError("max_range must be positive")
        if self.falloff_range is not None and not self.falloff_range > 0:
            raise ValueError("falloff_range must be positive")


@dataclass
class _Faces:
    """All rectangles of a scene as parallel arrays (world frame)."""

    origin: np.ndarray  # (F, 3) rectangle centre
    u: np.ndarray  # (F, 3) unit in-plane axes
    v: np.ndarray
    normal: np.ndarray  # (F, 3)
    half: np.ndarray  # (F, 2) half extents along u, v
    two_sided: np.ndarray  # (F,) bool
    reflectance: np.ndarray  # (F,)
    density: np.ndarray  # (F,) multiplier on the scene density


def _box_faces(box: Box):
    sx, sy, sz = (0.5 * e for e in box.extent)
    r, t = box.pose.rotation, box.pose.translation
    ex, ey, ez = r[:, 0], r[:, 1], r[:, 2]
    centre = t + sz * ez
    faces = [
        (centre + sx * ex, ey, ez, ex, (sy, sz)),
        (centre - sx * ex, ez, ey, -ex, (sz, sy)),
        (centre + sy * ey, ez, ex, ey, (sz, sx)),
        (centre - sy * ey, ex, ez, -ey, (sx, sz)),
        (centre + sz * ez, ex, ey, ez, (sx, sy)),
        (centre - sz * ez, ey, ex, -ez, (sy, sx)),
    ]
    return [(o, u, v, n, h, False, box.reflectance, box.density_scale) for o, u, v, n, h in faces]


def _collect_faces(primitives) -> _Faces:
    rows = []
    for p in primitives:
        if isinstance(p, Plane):
            r = p.pose.rotation
            rows.append((p.pose.translation, r[:, 0], r[:, 1], r[:, 2], (0.5 * p.extent[0], 0.5 * p.extent[1]), True, p.reflectance, p.density_scale))
        elif isinstance(p, Box):
            rows.extend(_box_faces(p))
    if not rows:
        z = np.zeros((0, 3))
        return _Faces(z, z, z, z, np.zeros((0, 2)), np.zeros(0, bool), np.zeros(0), np.zeros(0))
    cols = list(zip(*rows))
    return _Faces(
        np.array(cols[0], float),
        np.array(cols[1], float),
        np.array(cols[2], float),
        np.array(cols[3], float),
        np.array(cols[4], float),
        np.array(cols[5], bool),
        np.array(cols[6], float),
        np.array(cols[7], float),
    )


def frame_rng(seed: int, frame_index: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(frame_index)])))


class SceneSampler:
    """Precomputed scene geometry; ``sweep`` draws one frame."""

    def __init__(self, scene: SceneSpec):
        self.scene = scene
        self.faces = _collect_faces(scene.primitives)
        self.cylinders = [p for p in scene.primitives if isinstance(p, Cylinder)]

    def _sample_faces(self, rng, centre: np.ndarray, out: list) -> None:
        f = self.faces
        if f.origin.shape[0] == 0:
            return
        rmax = self.scene.max_range
        rel = centre - f.origin
        d = np.einsum("ij,ij->i", rel, f.normal)
        visible = (np.abs(d) < rmax) & (f.two_sided | (d > 0))
        disc = np.sqrt(np.maximum(rmax * rmax - d * d, 0.0))
        cu = np.einsum("ij,ij->i", rel, f.u)
        cv = np.einsum("ij,ij->i", rel, f.v)
        lo_u = np.maximum(cu - disc, -f.half[:, 0])
        hi_u = np.minimum(cu + disc, f.half[:, 0])
        lo_v = np.maximum(cv - disc, -f.half[:, 1])
        hi_v = np.minimum(cv + disc, f.half[:, 1])
        area = np.where(visible, np.maximum(hi_u - lo_u, 0) * np.maximum(hi_v - lo_v, 0), 0.0)
        counts = rng.poisson(self.scene.point_density * f.density * area)
        for i in np.flatnonzero(counts):
            su = rng.uniform(lo_u[i], hi_u[i], counts[i])
            sv = rng.uniform(lo_v[i], hi_v[i], counts[i])
            pts = f.origin[i] + su[:, None] * f.u[i] + sv[:, None] * f.v[i]
            out.append((pts, np.full(counts[i], f.reflectance[i])))

    def _sample_cylinders(self, rng, centre: np.ndarray, out: list) -> None:
        rmax = self.scene.max_range
        for c in self.cylinders:
            base = c.pose.translation
            axis = c.pose.rotation[:, 2]
            rel = centre - base
            along = rel @ axis
            radial = rel - along * axis
            dist = np.linalg.norm(radial)
            if dist <= c.radius or dist - c.radius > rmax:
                continue
            # half-angle of the arc seen from the sensor
            half_angle = math.acos(min(1.0, c.radius / dist))
            area = 2.0 * half_angle * c.radius * c.height
            n = rng.poisson(self.scene.point_density * c.density_scale * area)
            if n == 0:
                continue
            facing = radial / dist
            side = np.cross(axis, facing)
            ang = rng.uniform(-half_angle, half_angle, n)
            h = rng.uniform(0.0, c.height, n)
            pts = base + c.radius * (np.cos(ang)[:, None] * facing + np.sin(ang)[:, None] * side) + h[:, None] * axis
            out.append((pts, np.full(n, c.reflectance)))

    def sweep(self, sensor_pose: Pose, frame_index: int = 0) -> PointFrame:
        scene = self.scene
        rng = frame_rng(scene.seed, frame_index)
        centre = sensor_pose.translation
        parts: list = []
        self._sample_faces(rng, centre, parts)
        self._sample_cylinders(rng, centre, parts)
        if not parts:
            raise EmptySweep(f"frame {frame_index}: no surface within {scene.max_range} m")
        world = np.vstack([p for p, _ in parts])
        refl = np.concatenate([r for _, r in parts])
        rng_to = np.linalg.norm(world - centre, axis=1)
        keep = rng_to <= scene.max_range
        if scene.falloff_range is not None:
            keep &= rng.uniform(size=rng_to.shape) * rng_to**2 <= scene.falloff_range**2
        world, refl = world[keep], refl[keep]
        if world.shape[0] == 0:
            raise EmptySweep(f"frame {frame_index}: no surface within {scene.max_range} m")
        local = inverse(sensor_pose).transform_points(world)
        if scene.noise_std > 0:
            local = local + rng.normal(0.0, scene.noise_std, local.shape)
        if scene.reflectance_jitter > 0:
            refl = refl * np.exp(scene.reflectance_jitter * rng.normal(size=refl.shape))
        r2 = np.einsum("ij,ij->i", local, local)
        ok = r2 > 0
        return PointFrame(local[ok], refl[ok] / r2[ok], frame_index=frame_index)


def generate_sweep(scene: SceneSpec, sensor_pose: Pose, frame_index: int = 0) -> PointFrame:
    return SceneSampler(scene).sweep(sensor_pose, frame_index)


def generate_sequence(scene: SceneSpec, trajectory: Trajectory, start_index: int = 0):
    """One sweep per pose, lazily.  Yields ``PointFrame`` objects."""
    sampler = SceneSampler(scene)
    for k, pose in enumerate(trajectory.poses):
        yield sampler.sweep(pose, start_index + k)


def inject_bias(
    base: Trajectory,
    bias_fn: Callable[[FeatureVector], np.ndarray],
    features: Sequence[FeatureVector],
) -> Trajectory:
    """Corrupt ``base`` so that its per-frame error against it equals ``bias_fn``.

    Frame k's step is right-multiplied by ``exp(bias_fn(features[k]))``, so
    the single-frame error ``T_base * T_out^-1`` is exactly that exponential.
    """
    if len(features) != len(base):
        raise ValueError(f"{len(features)} feature vectors for {len(base)} frames")
    steps = [s @ exp_map(np.asarray(bias_fn(features[k + 1]), float)) for k, s in enumerate(base.steps())]
    return Trajectory.from_relative(steps, frame_period=base.frame_period)


# ----------------------------------------------------------------- trajectories


def straight_trajectory(n_frames: int, step: float = 1.0) -> Trajectory:
    return Trajectory([Pose.from_translation([step * k, 0.0, 0.0]) for k in range(n_frames)])


def route_trajectory(
    n_frames: int,
    step: float = 1.0,
    turns: Sequence[tuple[int, float, int]] = (),
    bumps: Sequence[tuple[int, float, int]] = (),
    ramp: int = 0,
) -> Trajectory:
    """Planar route with yaw turns and gentle vertical bumps.

    ``turns`` holds ``(start_frame, yaw_change, duration)``; the yaw rate
    follows a raised cosine over ``duration`` frames.  ``bumps`` holds
    ``(start_frame, height, duration)`` raised-cosine vertical excursions.
    With ``ramp > 0`` the vehicle starts at rest and reaches ``step`` metres
    per frame after ``ramp`` frames.
    """
    yaw_rate = np.zeros(n_frames)
    frames = np.arange(n_frames)
    for start, angle, dur in turns:
        # raised-cosine rate profile: the turn eases in and out
        inside = (frames >= start) & (frames < start + dur)
        phase = (frames[inside] - start + 0.5) / dur
        yaw_rate[inside] += angle / dur * (1 - np.cos(2 * math.pi * phase))
    heights = np.zeros(n_frames)
    for start, h, dur in bumps:
        k = np.arange(n_frames) - start
        inside = (k >= 0) & (k <= dur)
        heights[inside] += 0.5 * h * (1 - np.cos(2 * math.pi * k[inside] / dur))
    poses = []
    yaw, xy = 0.0, np.zeros(2)
    for k in range(n_frames):
        if k:
            yaw += yaw_rate[k]
            course = yaw - 0.5 * yaw_rate[k]
            speed = step * min(1.0, k / ramp) if ramp > 0 else step
            xy = xy + speed * np.array([math.cos(course), math.sin(course)])
        c, s = math.cos(yaw), math.sin(yaw)
        r = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
        if k:
            slope = math.atan2(heights[k] - heights[k - 1], speed)
            cp, sp = math.cos(slope), math.sin(slope)
            r = r @ np.array([[cp, 0.0, -sp], [0.0, 1.0, 0.0], [sp, 0.0, cp]])
        poses.append(Pose(r, np.array([xy[0], xy[1], heights[k]])))
    return Trajectory.anchored(poses)


def static_trajectory(n_frames: int) -> Trajectory:
    return Trajectory([Pose.identity()] * n_frames)


def heading(pose: Pose) -> float:
    return math.atan2(pose.rotation[1, 0], pose.rotation[0, 0])


def study_route(n_frames: int, step: float = 1.0) -> Trajectory:
    """Route used for bias studies: starts at rest, four turns, two bumps.

    Event positions scale with ``n_frames`` so any length has the same shape.
    """
    at = lambda f: int(f * n_frames)  # noqa: E731
    turns = [(at(0.15), math.pi / 2, 30), (at(0.4), -math.pi / 3, 25), (at(0.65), math.pi / 2, 40), (at(0.85), -math.pi / 2, 30)]
    bumps = [(at(0.1), 1.0, 60), (at(0.5), -0.8, 50)]
    return route_trajectory(n_frames, step, turns=turns, bumps=bumps, ramp=20)


def feature_bias(scale: float = 1.0, relative_noise: float = 0.1, seed: int = 0) -> Callable[[FeatureVector], np.ndarray]:
    """A per-frame error twist that is a smooth function of the frame's features.

    z (m) and pitch (rad) follow the normal sum, roll (rad) the balance of
    vertical-normal keypoints ahead of and behind the sensor.  Each call
    multiplies the twist by ``1 + relative_noise * N(0, 1)`` from a private
    generator, so the same call order gives the same noise.
    """
    rng = np.random.default_rng(seed)

    def bias(f: FeatureVector) -> np.ndarray:
        ns, az = f.normal_sum, f.azimuth_slices
        z = 0.012 * (1.0 + math.tanh(8.0 * (ns[2] - 0.38)))
        pitch = 2e-4 * math.tanh(10.0 * (ns[1] - 0.12))
        # slices 0 and 15 look backwards, 7 and 8 forwards
        roll = 2e-3 * (az[0] + az[15] - az[7] - az[8])
        xi = scale * np.array([0.0, 0.0, z, roll, pitch, 0.0])
        return xi * (1.0 + relative_noise * rng.normal())

    return bias


# ----------------------------------------------------------------- scenes


def _yawed(x: float, y: float, z: float, yaw: float) -> Pose:
    c, s = math.cos(yaw), math.sin(yaw)
    return Pose(np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]), np.array([x, y, z]))


def _vertical_plane(x: float, y: float, z: float, yaw: float) -> Pose:
    """Pose whose local x runs along ``yaw`` and local y points up."""
    c, s = math.cos(yaw), math.sin(yaw)
    r = np.array([[c, 0.0, s], [s, 0.0, -c], [0.0, 1.0, 0.0]])
    return Pose(r, np.array([x, y, z]))


def floor_scene(height: float = 2.0, size: float = 400.0, **kwargs) -> SceneSpec:
    """A single large floor ``height`` below a sensor at the origin."""
    return SceneSpec((Plane(Pose.from_translation([0.0, 0.0, -height]), (size, size), 0.3),), **kwargs)


def route_scene(
    trajectory: Trajectory,
    seed: int = 0,
    half_width: float = 8.0,
    spacing: float = 6.0,
    sensor_height: float = SENSOR_HEIGHT,
    point_density: float = 8.0,
    floor_density: float = 0.25,
    noise_std: float = 0.02,
    max_range: float = 40.0,
    falloff_range: float | None = 10.0,
    wall_probability: float = 0.8,
    boxes_per_block: tuple[int, int] = (0, 3),
    pole_probability: float = 0.3,
    ceiling_probability: float = 0.6,
    wall_yaw_spread: float = 0.35,
    zone_length: float | None = None,
) -> SceneSpec:
    """Corridor-like scene laid out along a trajectory.

    Every ``spacing`` metres of path a block may get wall panels on either
    side, an overhead panel, a few boxes of random size and yaw, and a pole.
    Overhead panels and box tops are the only planar surfaces with vertical
    normals that keypoint selection can use, since the floor is ground.
    Layout randomness comes from ``seed`` only, so the amount of vertical,
    horizontal and oblique structure changes along the route in a
    reproducible way.

    With ``zone_length`` the layout is cut into zones of that many metres,
    starting ``max_range`` before the route. Each zone draws its own wall and
    overhead-panel probabilities in [0.4, 1), replacing ``wall_probability``
    and ``ceiling_probability``, giving stretches that are sparse, covered or
    walled.
    """
    rng = np.random.default_rng(seed)
    pos = trajectory.positions()
    dist = trajectory.path_lengths()
    floor_z = -sensor_height
    marks = np.arange(-max_range, dist[-1] + max_range + spacing, spacing)
    if zone_length is not None:
        n_zones = int((marks[-1] - marks[0]) // zone_length) + 1
        zone = ((marks - marks[0]) // zone_length).astype(int)
        # ground points are not keypoints, so overhead panels carry height and
        # tilt: never let a zone go fully open
        ceiling_p = rng.uniform(0.4, 1.0, n_zones)[zone]
        wall_p = rng.uniform(0.4, 1.0, n_zones)[zone]
    else:
        ceiling_p = np.full(marks.shape, ceiling_probability)
        wall_p = np.full(marks.shape, wall_probability)
    lo = pos[:, :2].min(axis=0) - half_width - max_range
    hi = pos[:, :2].max(axis=0) + half_width + max_range
    prims: list = [
        Plane(Pose.from_translation([*(0.5 * (lo + hi)), floor_z]), tuple(hi - lo), 0.25, floor_density),
    ]
    # the layout runs past both ends of the route so end frames see full structure
    for i, m in enumerate(marks):
        k = int(np.clip(np.searchsorted(dist, m), 0, len(pos) - 1))
        k2 = min(max(k, 1), len(pos) - 1)
        d = pos[k2, :2] - pos[k2 - 1, :2] if len(pos) > 1 else np.zeros(2)
        yaw = math.atan2(d[1], d[0]) if np.linalg.norm(d) > 0 else heading(trajectory[k])
        fwd = np.array([math.cos(yaw), math.sin(yaw)])
        left = np.array([-fwd[1], fwd[0]])
        # beyond the ends, continue straight along the end heading
        base = pos[k, :2] + (m - dist[k]) * fwd if (m < 0 or m > dist[-1]) else pos[k, :2]
        for side in (1.0, -1.0):
            if rng.uniform() < wall_p[i]:
                off = half_width + rng.uniform(-1.0, 1.0)
                h = rng.uniform(2.5, 6.0)
                c = base + side * off * left
                # panels are turned off the route direction so they also pin down along-track motion
                tilt = rng.uniform(-wall_yaw_spread, wall_yaw_spread)
                prims.append(
                    Plane(_vertical_plane(c[0], c[1], floor_z + 0.5 * h, yaw + tilt), (spacing + 0.5, h), rng.uniform(0.2, 0.5))
                )
        if rng.uniform() < ceiling_p[i]:
            z = floor_z + rng.uniform(4.0, 7.0)
            w = rng.uniform(0.4, 1.0) * 2 * half_width
            shift = rng.uniform(-0.5, 0.5) * (2 * half_width - w)
            c = base + shift * left
            tilt = Pose(exp_map(np.array([0, 0, 0, *rng.normal(0.0, 0.03, 2), 0.0])).rotation, np.zeros(3))
            prims.append(Plane(_yawed(c[0], c[1], z, yaw) @ tilt, (spacing + 0.5, w), rng.uniform(0.2, 0.5)))
        for _ in range(rng.integers(boxes_per_block[0], boxes_per_block[1] + 1)):
            side = rng.choice([-1.0, 1.0])
            lateral = side * rng.uniform(3.0, half_width - 1.5)
            along = rng.uniform(-0.5, 0.5) * spacing
            sx, sy = rng.uniform(0.8, 3.0, 2)
            sz = rng.uniform(0.7, 3.0)
            c = base + along * fwd + lateral * left
            prims.append(Box(_yawed(c[0], c[1], floor_z, rng.uniform(0, math.pi)), (sx, sy, sz), rng.uniform(0.3, 0.9)))
        if rng.uniform() < pole_probability:
            side = rng.choice([-1.0, 1.0])
            c = base + side * rng.uniform(3.0, half_width - 0.5) * left
            prims.append(Cylinder(Pose.from_translation([c[0], c[1], floor_z]), rng.uniform(0.1, 0.3), rng.uniform(3, 7), 0.9))
    return SceneSpec(
        tuple(prims),
        point_density=point_density,
        noise_std=noise_std,
        seed=seed,
        max_range=max_range,
        falloff_range=falloff_range,
    )


# ----------------------------------------------------------------- JSON


def _pose_list(p: Pose) -> list[float]:
    return [float(v) for v in np.column_stack([p.rotation, p.translation]).reshape(-1)]


def _pose_from_list(vals) -> Pose:
    m = np.asarray(vals, dtype=float).reshape(3, 4)
    return Pose(m[:, :3], m[:, 3])


def scene_to_json(scene: SceneSpec) -> str:
    prims = []
    for p in scene.primitives:
        entry = {
            "type": type(p).__name__.lower(),
            "pose": _pose_list(p.pose),
            "reflectance": p.reflectance,
            "density_scale": p.density_scale,
        }
        if isinstance(p, Cylinder):
            entry.update(radius=p.radius, height=p.height)
        else:
            entry["extent"] = [float(e) for e in p.extent]
        prims.append(entry)
    doc = {
        "point_density": scene.point_density,
        "noise_std": scene.noise_std,
        "seed": scene.seed,
        "max_range": scene.max_range,
        "reflectance_jitter": scene.reflectance_jitter,
        "falloff_range": scene.falloff_range,
        "primitives": prims,
    }
    return json.dumps(doc)


def scene_from_json(text: str) -> SceneSpec:
    doc = json.loads(text)
    prims = []
    for e in doc["primitives"]:
        pose = _pose_from_list(e["pose"])
        kind = e["type"]
        scale = e.get("density_scale", 1.0)
        if kind == "plane":
            prims.append(Plane(pose, tuple(e["extent"]), e["reflectance"], scale))
        elif kind == "box":
            prims.append(Box(pose, tuple(e["extent"]), e["reflectance"], scale))
        elif kind == "cylinder":
            prims.append(Cylinder(pose, e["radius"], e["height"], e["reflectance"], scale))
        else:
            raise ValueError(f"unknown primitive type {kind!r}")
    return SceneSpec(
        tuple(prims),
        point_density=doc["point_density"],
        noise_std=doc["noise_std"],
        seed=doc["seed"],
        max_range=doc.get("max_range", MAX_RANGE),
        reflectance_jitter=doc.get("reflectance_jitter", 0.1),
        falloff_range=doc.get("falloff_range"),
    )
