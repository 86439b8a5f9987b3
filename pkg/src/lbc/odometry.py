"""Frame-to-frame lidar odometry.

Current-frame keypoints are matched to the previous frame's keypoints by
Euclidean nearest neighbour, and the relative pose is found by iteratively
reweighted Gauss-Newton on SE(3) with a Geman-McClure loss over
point-to-plane and point-to-point residuals, plus a weak pull toward the
constant-velocity prediction.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .keypoints import DEFAULT_FRACTION, DEFAULT_GROUND_HEIGHT, DEFAULT_MIN_PLANARITY, KeypointSet, select_keypoints
from .liegroup import Pose, adjoint, between, compose, exp_map, inverse, log_map, orthonormalize
from .pointcloud import DEFAULT_K, KnnIndex, PointFrame, compute_surface_stats
from .trajectory import FRAME_PERIOD, Trajectory

log = logging.getLogger(__name__)

PLANE = "PLANE"
POINT = "POINT"

MIN_MATCHES = 30
POINT_SIGMA = 0.05  # m
# plane residuals are whitened with the same scale as point residuals;
# with unit weight the plane terms are swamped by the point terms
PLANE_SIGMA = 0.05  # m
SINGULAR_CONDITION = 1e12


class TooFewMatches(RuntimeError):
    pass


class SingularNormalEquations(RuntimeError):
    pass


@dataclass
class OdometryConfig:
    keypoint_fraction: float = DEFAULT_FRACTION
    ground_height: float = DEFAULT_GROUND_HEIGHT
    min_planarity: float = DEFAULT_MIN_PLANARITY
    knn_k: int = DEFAULT_K
    max_match_dist: float = 2.0
    point_sigma: float = POINT_SIGMA
    plane_sigma: float = PLANE_SIGMA
    prior_weight: float = 1e-2
    icp_rounds: int = 3
    max_iterations: int = 50
    step_tolerance: float = 1e-7
    min_matches: int = MIN_MATCHES
    frame_period: float = FRAME_PERIOD


@dataclass(frozen=True)
class Match:
    source_index: int
    source: np.ndarray
    target: np.ndarray
    normal: np.ndarray | None = None

    @property
    def type(self) -> str:
        return PLANE if self.normal is not None else POINT


@dataclass(frozen=True)
class Matches:
    """Column-wise store of matches; ``normals`` rows are NaN for POINT matches."""

    source_index: np.ndarray
    source: np.ndarray
    target: np.ndarray
    normals: np.ndarray
    is_plane: np.ndarray

    def __len__(self):
        return self.source_index.shape[0]

    def __getitem__(self, i) -> Match:
        normal = self.normals[i] if self.is_plane[i] else None
        return Match(int(self.source_index[i]), self.source[i], self.target[i], normal)

    def subset(self, mask) -> "Matches":
        return Matches(self.source_index[mask], self.source[mask], self.target[mask], self.normals[mask], self.is_plane[mask])

    @classmethod
    def from_list(cls, matches: Sequence[Match]) -> "Matches":
        normals = np.array([m.normal if m.normal is not None else [np.nan] * 3 for m in matches], dtype=float)
        return cls(
            np.array([m.source_index for m in matches], dtype=int),
            np.array([m.source for m in matches], dtype=float).reshape(-1, 3),
            np.array([m.target for m in matches], dtype=float).reshape(-1, 3),
            normals.reshape(-1, 3),
            np.array([m.normal is not None for m in matches], dtype=bool),
        )


@dataclass(frozen=True)
class MatchTarget:
    """Keypoints of the reference frame, indexed for nearest-neighbour lookup."""

    points: np.ndarray
    normals: np.ndarray
    planar: np.ndarray
    index: KnnIndex

    @classmethod
    def from_keypoints(cls, frame: PointFrame, keys: KeypointSet) -> "MatchTarget":
        pts = frame.points[keys.indices]
        normals = frame.stats.normals[keys.indices]
        planar = keys.planar & np.all(np.isfinite(normals), axis=1)
        return cls(pts, normals, planar, KnnIndex(pts))


@dataclass
class Diagnostics:
    cost: float = math.nan
    iterations: int = 0
    inliers: int = 0
    matches: int = 0
    condition_number: float = math.nan
    converged: bool = False
    reliable: bool = True
    flag: str | None = None
    cost_history: list[float] = field(default_factory=list)


def robust_cost(u):
    """Geman-McClure loss 0.5 u^2 / (1 + u^2)."""
    # written with 1/u^2 so that huge u (u^2 = inf) still gives 0.5
    with np.errstate(over="ignore", divide="ignore"):
        return 0.5 / (1.0 + 1.0 / np.square(u))


def robust_weight(u):
    """IRLS weight rho'(u) / u = 1 / (1 + u^2)^2."""
    with np.errstate(over="ignore"):
        return 1.0 / np.square(1.0 + np.square(u))


def whitened_error(match: Match, pose: Pose, point_cov=None, plane_sigma: float = PLANE_SIGMA) -> float:
    """Whitened residual norm of one match with ``e = q - T p``.

    PLANE matches project ``e`` on the target normal and divide by
    ``plane_sigma``; POINT matches whiten with the measurement covariance
    (default ``POINT_SIGMA**2 I``).
    """
    e = match.target - pose.transform_points(match.source[None, :])[0]
    if match.normal is not None:
        return float(abs(match.normal @ e)) / plane_sigma
    cov = np.eye(3) * POINT_SIGMA**2 if point_cov is None else np.asarray(point_cov, dtype=float)
    return float(math.sqrt(e @ np.linalg.solve(cov, e)))


def whitened_error_jacobian(
    match: Match, pose: Pose, point_cov=None, plane_sigma: float = PLANE_SIGMA
) -> tuple[float, np.ndarray]:
    """``u`` and ``du/d(delta)`` for the left perturbation ``exp(delta) T``."""
    pw = pose.transform_points(match.source[None, :])[0]
    e = match.target - pw
    de = np.zeros((3, 6))
    de[:, :3] = -np.eye(3)
    de[:, 3:] = np.array([[0.0, -pw[2], pw[1]], [pw[2], 0.0, -pw[0]], [-pw[1], pw[0], 0.0]])
    if match.normal is not None:
        r = match.normal @ e
        return abs(r) / plane_sigma, math.copysign(1.0, r) * (match.normal @ de) / plane_sigma
    cov = np.eye(3) * POINT_SIGMA**2 if point_cov is None else np.asarray(point_cov, dtype=float)
    cinv = np.linalg.inv(cov)
    u = math.sqrt(e @ cinv @ e)
    return u, (e @ cinv @ de) / u


def match_points(
    source: np.ndarray,
    target: MatchTarget,
    seed: Pose,
    max_dist: float,
    min_matches: int = MIN_MATCHES,
) -> Matches:
    """Pair each source point (moved by ``seed``) with its nearest target keypoint."""
    source = np.asarray(source, dtype=float)
    moved = seed.transform_points(source)
    dist, idx = target.index.query(moved, k=1)
    dist, idx = dist[:, 0], idx[:, 0]
    keep = np.flatnonzero(dist <= max_dist)
    if keep.size < min_matches:
        raise TooFewMatches(f"{keep.size} matches within {max_dist} m, need {min_matches}")
    hit = idx[keep]
    planar = target.planar[hit]
    normals = np.where(planar[:, None], target.normals[hit], np.nan)
    return Matches(keep, source[keep], target.points[hit], normals, planar)


class _Problem:
    """Vectorized residuals, weights and normal equations for one match set."""

    def __init__(self, matches: Matches, seed: Pose, point_sigma: float, prior_weight: float, plane_sigma: float):
        self.m = matches
        self.seed = seed
        self.inv_sigma = 1.0 / point_sigma
        self.inv_plane_sigma = 1.0 / plane_sigma
        self.plane = matches.is_plane
        self.prior_weight = prior_weight
        self.prior_scale = 0.0

    def whitened(self, pose: Pose):
        pw = pose.transform_points(self.m.source)
        e = self.m.target - pw
        u = np.empty(len(self.m))
        plane_r = np.einsum("ij,ij->i", self.m.normals[self.plane], e[self.plane]) * self.inv_plane_sigma
        u[self.plane] = np.abs(plane_r)
        point_r = e[~self.plane] * self.inv_sigma
        u[~self.plane] = np.linalg.norm(point_r, axis=1)
        return pw, u, plane_r, point_r

    def prior_residual(self, pose: Pose) -> np.ndarray:
        return log_map(between(self.seed, pose))

    def cost(self, pose: Pose) -> float:
        _, u, _, _ = self.whitened(pose)
        xi = self.prior_residual(pose)
        return float(np.sum(robust_cost(u)) + 0.5 * self.prior_scale * xi @ xi)

    def normal_equations(self, pose: Pose):
        pw, u, plane_r, point_r = self.whitened(pose)
        w = robust_weight(u)
        h = np.zeros((6, 6))
        g = np.zeros(6)
        if self.plane.any():
            n = self.m.normals[self.plane]
            jac = np.hstack([-n, np.cross(n, pw[self.plane])]) * self.inv_plane_sigma
            wp = w[self.plane]
            h += jac.T @ (jac * wp[:, None])
            g += jac.T @ (wp * plane_r)
        if (~self.plane).any():
            p = pw[~self.plane]
            wq = w[~self.plane]
            s = self.inv_sigma
            # J = [-I, skew(p)] / sigma, stacked per point
            zeros = np.zeros(len(p))
            skew_rows = np.stack(
                [
                    np.stack([zeros, -p[:, 2], p[:, 1]], 1),
                    np.stack([p[:, 2], zeros, -p[:, 0]], 1),
                    np.stack([-p[:, 1], p[:, 0], zeros], 1),
                ],
                1,
            )
            jac = np.concatenate([np.broadcast_to(-np.eye(3), skew_rows.shape), skew_rows], axis=2) * s
            jac = jac.reshape(-1, 6)
            ww = np.repeat(wq, 3)
            h += jac.T @ (jac * ww[:, None])
            g += jac.T @ (ww * point_r.reshape(-1))
        return h, g, u, w


def estimate_pose(
    matches: Matches,
    seed: Pose,
    init: Pose | None = None,
    point_sigma: float = POINT_SIGMA,
    plane_sigma: float = PLANE_SIGMA,
    prior_weight: float = 1e-2,
    max_iterations: int = 50,
    step_tolerance: float = 1e-7,
    strict: bool = False,
) -> tuple[Pose, Diagnostics]:
    """Minimize the robust registration cost over the pose mapping source into target.

    ``seed`` is the motion prediction the prior pulls toward; ``init`` (default
    ``seed``) is where iteration starts.  On degenerate geometry (measurement
    Hessian condition number above 1e12) the seed is returned with
    ``diag.reliable = False``, or SingularNormalEquations is raised when
    ``strict``.
    """
    diag = Diagnostics(matches=len(matches))
    prob = _Problem(matches, seed, point_sigma, prior_weight, plane_sigma)
    pose = seed if init is None else init
    h, g, u, w = prob.normal_equations(pose)
    prob.prior_scale = prior_weight * float(np.mean(w))
    cost = prob.cost(pose)
    diag.cost_history.append(cost)

    for it in range(1, max_iterations + 1):
        diag.iterations = it
        cond = np.linalg.cond(h)
        diag.condition_number = float(cond)
        if not np.isfinite(cond) or cond > SINGULAR_CONDITION:
            diag.reliable = False
            diag.flag = "singular"
            if strict:
                raise SingularNormalEquations(f"measurement Hessian condition number {cond:.3g}")
            log.debug("degenerate registration, condition number %.3g", cond)
            return seed, diag
        xi_p = prob.prior_residual(pose)
        a = adjoint(inverse(pose))
        h_tot = h + prob.prior_scale * a.T @ a
        g_tot = g + prob.prior_scale * a.T @ xi_p
        delta = -np.linalg.solve(h_tot, g_tot)

        step = 1.0
        for _ in range(20):
            candidate = compose(exp_map(step * delta), pose)
            new_cost = prob.cost(candidate)
            if new_cost <= cost:
                break
            step *= 0.5
        else:
            diag.converged = True
            break
        pose, cost = candidate, new_cost
        diag.cost_history.append(cost)
        if step * np.linalg.norm(delta) < step_tolerance:
            diag.converged = True
            break
        h, g, u, w = prob.normal_equations(pose)

    _, u, _, _ = prob.whitened(pose)
    diag.cost = cost
    diag.inliers = int(np.sum(u < 1.0))
    return pose, diag


def register(
    source: np.ndarray,
    target: MatchTarget,
    seed: Pose,
    config: OdometryConfig | None = None,
) -> tuple[Pose, Diagnostics]:
    """Match, optimize, re-match: ``config.icp_rounds`` rounds of ICP."""
    config = config or OdometryConfig()
    pose = seed
    diag = Diagnostics()
    for _ in range(config.icp_rounds):
        matches = match_points(source, target, pose, config.max_match_dist, config.min_matches)
        pose, diag = estimate_pose(
            matches,
            seed,
            init=pose,
            point_sigma=config.point_sigma,
            plane_sigma=config.plane_sigma,
            prior_weight=config.prior_weight,
            max_iterations=config.max_iterations,
            step_tolerance=config.step_tolerance,
        )
        if not diag.reliable:
            break
    return pose, diag


@dataclass
class FrameResult:
    frame_index: int
    diagnostics: Diagnostics
    keypoints: int = 0
    flag: str | None = None


@dataclass
class OdometryResult:
    trajectory: Trajectory
    frames: list[FrameResult]

    @property
    def flagged(self) -> list[int]:
        return [f.frame_index for f in self.frames if f.flag is not None]


def prepare_frame(frame: PointFrame, config: OdometryConfig) -> tuple[PointFrame, KeypointSet]:
    if frame.stats is None:
        frame = compute_surface_stats(frame, k=config.knn_k)
    keys = select_keypoints(frame, config.keypoint_fraction, config.ground_height, config.min_planarity)
    return frame, keys


def run_odometry(
    frames: Iterable[PointFrame | None],
    config: OdometryConfig | None = None,
    on_keypoints: Callable[[int, PointFrame, KeypointSet], None] | None = None,
    initial_motion: Pose | None = None,
) -> OdometryResult:
    """Estimate the trajectory of a frame sequence.

    ``None`` entries stand for unreadable frames; those, and frames whose
    registration fails, get the constant-velocity prediction and a flag.
    ``on_keypoints`` is called with every successfully prepared frame.
    ``initial_motion`` seeds frame 1 (pose of frame 1 in frame 0); without
    it the sensor is assumed to start at rest.
    """
    config = config or OdometryConfig()
    poses: list[Pose] = []
    results: list[FrameResult] = []
    reference: tuple[int, MatchTarget] | None = None

    for k, frame in enumerate(frames):
        if k == 0:
            predicted = Pose.identity()
        elif k == 1:
            predicted = initial_motion if initial_motion is not None else poses[0]
        else:
            # the extrapolation P_{k-1} P_{k-2}^-1 P_{k-1} amplifies rounding in
            # the rotation, so every prediction is projected back onto SO(3)
            predicted = orthonormalize(compose(poses[-1], between(poses[-2], poses[-1])))

        res = FrameResult(k, Diagnostics())
        pose = predicted
        if frame is None:
            res.flag = "unreadable"
        else:
            try:
                frame, keys = prepare_frame(frame, config)
            except ValueError as exc:
                res.flag = "no_keypoints"
                log.warning("frame %d: %s", k, exc)
                keys = None
            if keys is not None:
                res.keypoints = len(keys)
                if on_keypoints is not None:
                    on_keypoints(k, frame, keys)
                current = MatchTarget.from_keypoints(frame, keys)
                if reference is not None:
                    ref_k, ref_target = reference
                    seed = between(poses[ref_k], predicted)
                    try:
                        rel, diag = register(current.points, ref_target, seed, config)
                        res.diagnostics = diag
                        if diag.reliable:
                            pose = orthonormalize(compose(poses[ref_k], rel))
                        else:
                            res.flag = diag.flag
                    except TooFewMatches as exc:
                        res.flag = "too_few_matches"
                        log.warning("frame %d: %s", k, exc)
                reference = (k, current)
        if k == 0:
            pose = Pose.identity()
        poses.append(pose)
        results.append(res)

    if len(poses) < 2:
        raise ValueError("odometry needs at least two frames")
    return OdometryResult(Trajectory(poses, frame_period=config.frame_period), results)
