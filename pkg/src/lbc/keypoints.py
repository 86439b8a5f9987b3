"""Keypoint selection by normalized intensity and local planarity.

Both rules rank points and keep the top share, which is equivalent to a
per-frame quantile threshold with ties broken by point index.  Rule 1 keeps
the ``target_fraction / 2`` points with the largest ``I * r**2``; rule 2 then
keeps the next ``target_fraction / 2`` most planar points among those not
already taken, ignoring ground points.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .pointcloud import PointFrame

INTENSITY = "INTENSITY"
PLANAR = "PLANAR"

DEFAULT_FRACTION = 0.05
DEFAULT_GROUND_HEIGHT = -1.2
# planarity ratio floor; isotropic scatter sits around 3-10
DEFAULT_MIN_PLANARITY = 20.0
MIN_POINTS = 10


class EmptySelection(ValueError):
    pass


@dataclass(frozen=True)
class KeypointSet:
    indices: np.ndarray
    planar: np.ndarray
    intensity_threshold: float = np.nan
    planarity_threshold: float = np.nan

    def __len__(self):
        return self.indices.shape[0]

    @property
    def tags(self) -> list[str]:
        return [PLANAR if p else INTENSITY for p in self.planar]

    @property
    def planar_indices(self) -> np.ndarray:
        return self.indices[self.planar]


def normalized_intensity(frame: PointFrame) -> np.ndarray:
    """Range-compensated reflectance ``I * r**2`` (Lambertian fall-off)."""
    return frame.intensity * np.einsum("ij,ij->i", frame.points, frame.points)


def _top(scores: np.ndarray, candidates: np.ndarray, count: int) -> np.ndarray:
    order = np.lexsort((candidates, -scores[candidates]))
    return candidates[order[:count]]


def planar_candidates(
    frame: PointFrame,
    ground_height: float = DEFAULT_GROUND_HEIGHT,
    min_planarity: float = DEFAULT_MIN_PLANARITY,
) -> np.ndarray:
    """Mask of points the planarity rule may consider."""
    st = frame.stats
    ratio = st.planarity_ratio()
    return st.valid & ~st.line_like() & (frame.points[:, 2] >= ground_height) & (ratio > min_planarity)


def select_keypoints(
    frame: PointFrame,
    target_fraction: float = DEFAULT_FRACTION,
    ground_height: float = DEFAULT_GROUND_HEIGHT,
    min_planarity: float = DEFAULT_MIN_PLANARITY,
) -> KeypointSet:
    if frame.stats is None:
        raise ValueError("frame needs surface stats; run compute_surface_stats first")
    if not 0.0 < target_fraction < 1.0:
        raise ValueError(f"target_fraction must be in (0, 1), got {target_fraction}")
    n = len(frame)
    if n < MIN_POINTS:
        raise EmptySelection(f"frame has {n} points, need at least {MIN_POINTS}")
    per_rule = max(1, int(round(0.5 * target_fraction * n)))
    everything = np.arange(n)

    score_i = normalized_intensity(frame)
    by_intensity = _top(score_i, everything, per_rule)
    eps_i = float(score_i[by_intensity[-1]])

    ratio = frame.stats.planarity_ratio()
    eligible = planar_candidates(frame, ground_height, min_planarity)
    taken = np.zeros(n, dtype=bool)
    taken[by_intensity] = True
    by_planarity = _top(ratio, np.flatnonzero(eligible & ~taken), per_rule)
    if by_planarity.size:
        eps_p = float(ratio[by_planarity[-1]])
    else:
        eps_p = np.inf

    selected = np.union1d(by_intensity, by_planarity)
    planar = eligible[selected] & (ratio[selected] >= eps_p)
    if by_planarity.size:
        planar |= np.isin(selected, by_planarity)
    return KeypointSet(selected, planar, eps_i, eps_p)
