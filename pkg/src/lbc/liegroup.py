"""SE(3) and so(3) algebra.

Twists are plain length-6 arrays ordered ``[rho; phi]`` (translation part
first, rotation vector second).  Poses hold a rotation matrix and a
translation vector; ``compose(a, b)`` applies ``b`` first, then ``a``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable

import numpy as np

# below this rotation angle the closed forms lose precision; use series
SMALL_ANGLE = 1e-8
# log-map coefficient series is accurate to ~1e-17 up to this angle
LOG_SERIES_ANGLE = 1e-4
CUT_LOCUS_TOL = 1e-6
# compositions between re-orthonormalizations in long accumulation loops
REORTHONORMALIZE_EVERY = 100


class CutLocus(ValueError):
    """Rotation angle is (numerically) pi, where the logarithm is not unique."""


class MalformedAlgebraElement(ValueError):
    """A 4x4 matrix passed to ``vee`` is not an element of se(3)."""


@dataclass(frozen=True, eq=False)
class Pose:
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=float).reshape(3, 3))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=float).reshape(3))

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, m) -> "Pose":
        m = np.asarray(m, dtype=float)
        return cls(m[:3, :3], m[:3, 3])

    @classmethod
    def from_translation(cls, t) -> "Pose":
        return cls(np.eye(3), t)

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def transform_points(self, points: np.ndarray) -> np.ndarray:
        """Apply the transform to an ``(N, 3)`` array of points."""
        return points @ self.rotation.T + self.translation

    def __matmul__(self, other: "Pose") -> "Pose":
        return compose(self, other)

    def __repr__(self):
        return f"Pose(rotation={self.rotation.tolist()}, translation={self.translation.tolist()})"


def skew(v) -> np.ndarray:
    """3x3 skew-symmetric matrix with ``skew(u) @ v == cross(u, v)``."""
    x, y, z = np.asarray(v, dtype=float).reshape(3)
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def compose(a: Pose, b: Pose) -> Pose:
    return Pose(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


def inverse(t: Pose) -> Pose:
    rt = t.rotation.T
    return Pose(rt, -rt @ t.translation)


def between(a: Pose, b: Pose) -> Pose:
    """``inverse(a) @ b``."""
    rt = a.rotation.T
    return Pose(rt @ b.rotation, rt @ (b.translation - a.translation))


def hat(xi) -> np.ndarray:
    xi = np.asarray(xi, dtype=float).reshape(6)
    m = np.zeros((4, 4))
    m[:3, :3] = skew(xi[3:])
    m[:3, 3] = xi[:3]
    return m


def vee(m, tol: float = 1e-12) -> np.ndarray:
    m = np.asarray(m, dtype=float)
    if m.shape != (4, 4):
        raise MalformedAlgebraElement(f"expected a 4x4 matrix, got shape {m.shape}")
    block = m[:3, :3]
    if np.max(np.abs(m[3, :])) > tol or np.max(np.abs(block + block.T)) > tol:
        raise MalformedAlgebraElement("matrix does not have the se(3) sparsity pattern")
    return np.array([m[0, 3], m[1, 3], m[2, 3], m[2, 1], m[0, 2], m[1, 0]])


def _so3_coefficients(theta: float) -> tuple[float, float, float]:
    """Return (sin t / t, (1 - cos t) / t^2, (t - sin t) / t^3)."""
    if theta < SMALL_ANGLE:
        t2 = theta * theta
        return 1.0 - t2 / 6.0, 0.5 - t2 / 24.0, 1.0 / 6.0 - t2 / 120.0
    s = math.sin(theta)
    half = math.sin(0.5 * theta)
    return s / theta, 2.0 * half * half / (theta * theta), (theta - s) / theta**3


def so3_exp(phi) -> np.ndarray:
    phi = np.asarray(phi, dtype=float).reshape(3)
    k = skew(phi)
    a, b, _ = _so3_coefficients(float(np.linalg.norm(phi)))
    return np.eye(3) + a * k + b * (k @ k)


def so3_log(rot: np.ndarray) -> np.ndarray:
    """Rotation vector of ``rot``; raises CutLocus within 1e-6 rad of pi."""
    rot = np.asarray(rot, dtype=float)
    cos_t = min(1.0, max(-1.0, 0.5 * (np.trace(rot) - 1.0)))
    w = 0.5 * np.array([rot[2, 1] - rot[1, 2], rot[0, 2] - rot[2, 0], rot[1, 0] - rot[0, 1]])
    sin_t = float(np.linalg.norm(w))
    theta = math.atan2(sin_t, cos_t)
    if math.pi - theta < CUT_LOCUS_TOL:
        raise CutLocus(f"rotation angle {theta!r} is within {CUT_LOCUS_TOL} of pi")
    if theta < SMALL_ANGLE:
        return w * (1.0 + theta * theta / 6.0)
    if sin_t > 1e-3 or cos_t > 0.0:
        return w * (theta / sin_t)
    # close to pi: the skew part is tiny, read the axis off the symmetric part
    sym = 0.5 * (rot + rot.T) - cos_t * np.eye(3)
    j = int(np.argmax(np.diag(sym)))
    axis = sym[:, j] / math.sqrt(sym[j, j] * (1.0 - cos_t))
    if axis @ w < 0.0:
        axis = -axis
    return theta * axis / np.linalg.norm(axis)


def exp_map(xi) -> Pose:
    xi = np.asarray(xi, dtype=float).reshape(6)
    rho, phi = xi[:3], xi[3:]
    k = skew(phi)
    k2 = k @ k
    theta = float(np.linalg.norm(phi))
    if theta < SMALL_ANGLE:
        # 4th-order series in the skew matrix
        k3 = k2 @ k
        k4 = k2 @ k2
        rot = np.eye(3) + k + k2 / 2.0 + k3 / 6.0 + k4 / 24.0
        v = np.eye(3) + k / 2.0 + k2 / 6.0 + k3 / 24.0 + k4 / 120.0
    else:
        a, b, c = _so3_coefficients(theta)
        rot = np.eye(3) + a * k + b * k2
        v = np.eye(3) + b * k + c * k2
    return Pose(rot, v @ rho)


def _inverse_left_jacobian(phi: np.ndarray) -> np.ndarray:
    k = skew(phi)
    theta = float(np.linalg.norm(phi))
    if theta < LOG_SERIES_ANGLE:
        d = 1.0 / 12.0 + theta * theta / 720.0
    else:
        half = 0.5 * theta
        d = (1.0 - half * math.cos(half) / math.sin(half)) / (theta * theta)
    return np.eye(3) - 0.5 * k + d * (k @ k)


def log_map(t: Pose) -> np.ndarray:
    phi = so3_log(t.rotation)
    rho = _inverse_left_jacobian(phi) @ t.translation
    return np.concatenate([rho, phi])


def adjoint(t: Pose) -> np.ndarray:
    """6x6 adjoint with ``exp(adjoint(T) @ xi) == T exp(xi) T^-1``."""
    ad = np.zeros((6, 6))
    ad[:3, :3] = t.rotation
    ad[:3, 3:] = skew(t.translation) @ t.rotation
    ad[3:, 3:] = t.rotation
    return ad


def orthonormalize(t: Pose) -> Pose:
    """Project the rotation back onto SO(3) (polar decomposition)."""
    u, _, vt = np.linalg.svd(t.rotation)
    rot = u @ vt
    if np.linalg.det(rot) < 0.0:
        u[:, -1] = -u[:, -1]
        rot = u @ vt
    return Pose(rot, t.translation)


def is_valid_pose(t: Pose, tol: float = 1e-9) -> bool:
    r = t.rotation
    return bool(
        np.all(np.isfinite(r))
        and np.all(np.isfinite(t.translation))
        and np.linalg.norm(r.T @ r - np.eye(3)) < tol
        and abs(np.linalg.det(r) - 1.0) < tol
    )


def accumulate(steps: Iterable[Pose], start: Pose | None = None) -> list[Pose]:
    """Chain relative motions ``P_k = P_{k-1} @ step_k`` starting from ``start``.

    The rotation is re-orthonormalized every ``REORTHONORMALIZE_EVERY`` steps.
    """
    current = Pose.identity() if start is None else start
    out = [current]
    for i, step in enumerate(steps, start=1):
        current = compose(current, step)
        if i % REORTHONORMALIZE_EVERY == 0:
            current = orthonormalize(current)
        out.append(current)
    return out
