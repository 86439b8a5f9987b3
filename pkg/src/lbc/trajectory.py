"""Trajectory container and KITTI pose-file I/O."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .liegroup import Pose, accumulate, between, inverse

FRAME_PERIOD = 0.1  # s, 10 Hz spinning lidar


class LengthMismatch(ValueError):
    pass


@dataclass
class Trajectory:
    """Per-frame sensor poses ``P_k`` mapping frame-k coordinates into frame 0.

    The list index is the frame index and ``poses[0]`` is the identity.
    """

    poses: list[Pose]
    frame_period: float = FRAME_PERIOD

    def __post_init__(self):
        self.poses = list(self.poses)
        if not self.poses:
            raise ValueError("trajectory needs at least one pose")
        first = self.poses[0].matrix()
        if np.max(np.abs(first - np.eye(4))) > 1e-6:
            raise ValueError("poses[0] must be the identity; use Trajectory.anchored()")

    @classmethod
    def anchored(cls, poses: Sequence[Pose], **kwargs) -> "Trajectory":
        """Re-express ``poses`` relative to the first one."""
        origin = inverse(poses[0])
        return cls([Pose.identity()] + [origin @ p for p in poses[1:]], **kwargs)

    @classmethod
    def from_relative(cls, steps: Sequence[Pose], **kwargs) -> "Trajectory":
        return cls(accumulate(steps), **kwargs)

    def __len__(self):
        return len(self.poses)

    def __getitem__(self, i):
        return self.poses[i]

    def relative(self, k: int, j: int) -> Pose:
        """Motion ``P_k^-1 P_j``: maps frame-j coordinates into frame k."""
        return between(self.poses[k], self.poses[j])

    def steps(self) -> list[Pose]:
        """Frame-to-frame motions ``P_{k-1}^-1 P_k`` for k = 1..N."""
        return [self.relative(k - 1, k) for k in range(1, len(self.poses))]

    def positions(self) -> np.ndarray:
        return np.array([p.translation for p in self.poses])

    def path_lengths(self) -> np.ndarray:
        """Cumulative travelled distance at each frame."""
        d = np.linalg.norm(np.diff(self.positions(), axis=0), axis=1)
        return np.concatenate([[0.0], np.cumsum(d)])


def read_kitti_poses(path) -> Trajectory:
    data = np.loadtxt(path, ndmin=2)
    if data.shape[1] != 12:
        raise ValueError(f"{path}: expected 12 values per line, got {data.shape[1]}")
    poses = [Pose(row[[0, 1, 2, 4, 5, 6, 8, 9, 10]], row[[3, 7, 11]]) for row in data]
    return Trajectory(poses)


def format_kitti_poses(traj: Trajectory) -> str:
    lines = []
    for p in traj.poses:
        m = np.column_stack([p.rotation, p.translation]).reshape(-1)
        lines.append(" ".join(f"{v:.17g}" for v in m))
    return "\n".join(lines) + "\n"


def write_kitti_poses(path, traj: Trajectory) -> None:
    Path(path).write_text(format_kitti_poses(traj))
