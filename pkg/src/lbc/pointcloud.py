"""Point-cloud data model, KITTI Velodyne I/O, k-NN search and surface statistics."""

from __future__ import annotations

import os
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

DEFAULT_K = 20
# neighbourhoods whose spread is below this (m^2) have no usable normal
DEGENERATE_EIGENVALUE = 1e-12
# lambda2 / lambda3 below this means the neighbourhood is a line, not a plane
LINE_RATIO = 0.01


class TruncatedFile(ValueError):
    """Binary scan length is zero or not a whole number of 16-byte records."""


class NonFiniteData(ValueError):
    """A scan contains NaN or infinite coordinates."""


@dataclass(frozen=True)
class SurfaceStats:
    """Per-point neighbourhood statistics, one row per point.

    ``eigenvalues`` are sorted ascending.  ``valid`` is False where the
    neighbourhood is degenerate (all neighbours coincident); the normal of
    such points is NaN.
    """

    normals: np.ndarray
    eigenvalues: np.ndarray
    neighbor_count: np.ndarray
    valid: np.ndarray

    def planarity_ratio(self) -> np.ndarray:
        """(l1 + l2 + l3) / l1; infinite where l1 == 0."""
        ev = self.eigenvalues
        total = ev.sum(axis=1)
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = np.where(ev[:, 0] > 0.0, total / ev[:, 0], np.inf)
        return np.where(self.valid, ratio, 0.0)

    def line_like(self) -> np.ndarray:
        ev = self.eigenvalues
        with np.errstate(divide="ignore", invalid="ignore"):
            return ~self.valid | (ev[:, 1] < LINE_RATIO * ev[:, 2])


@dataclass(frozen=True)
class PointFrame:
    points: np.ndarray
    intensity: np.ndarray
    frame_index: int = 0
    stats: SurfaceStats | None = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != 3 or pts.shape[0] < 1:
            raise ValueError(f"points must be an (N>=1, 3) array, got shape {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise NonFiniteData("point coordinates must be finite")
        if np.any(np.einsum("ij,ij->i", pts, pts) == 0.0):
            raise ValueError("points at the sensor origin (zero range) are not allowed")
        intensity = np.asarray(self.intensity, dtype=float).reshape(-1)
        if intensity.shape[0] != pts.shape[0]:
            raise ValueError("intensity length does not match number of points")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "intensity", intensity)

    def __len__(self):
        return self.points.shape[0]

    @property
    def ranges(self) -> np.ndarray:
        return np.linalg.norm(self.points, axis=1)

    def with_stats(self, stats: SurfaceStats) -> "PointFrame":
        return replace(self, stats=stats)


def read_kitti_bin(path, frame_index: int = 0) -> PointFrame:
    """Parse a KITTI Velodyne scan of little-endian float32 (x, y, z, reflectance)."""
    raw = Path(path).read_bytes()
    if len(raw) == 0 or len(raw) % 16:
        raise TruncatedFile(f"{path}: {len(raw)} bytes is not a positive multiple of 16")
    data = np.frombuffer(raw, dtype="<f4").reshape(-1, 4).astype(float)
    if not np.all(np.isfinite(data[:, :3])):
        raise NonFiniteData(f"{path}: non-finite coordinates")
    # zero-range returns carry no geometry
    keep = np.any(data[:, :3] != 0.0, axis=1)
    if not keep.any():
        raise TruncatedFile(f"{path}: no returns away from the sensor origin")
    return PointFrame(data[keep, :3], data[keep, 3], frame_index=frame_index)


def write_kitti_bin(path, frame: PointFrame) -> None:
    data = np.column_stack([frame.points, frame.intensity]).astype("<f4")
    Path(path).write_bytes(data.tobytes())


def list_scans(sequence_dir) -> list[Path]:
    """Scan files of a sequence in temporal (lexicographic) order.

    Accepts either the sequence directory (containing ``velodyne/``) or the
    ``velodyne`` directory itself.
    """
    root = Path(sequence_dir)
    if (root / "velodyne").is_dir():
        root = root / "velodyne"
    return sorted((p for p in root.glob("*.bin") if p.is_file()), key=lambda p: os.fsdecode(p.name))


class KnnIndex:
    """Exact Euclidean k-NN over a fixed point set.

    Results are ordered by distance with ties broken by smaller point index,
    so queries are deterministic regardless of tree layout.
    """

    def __init__(self, points: np.ndarray):
        self.points = np.asarray(points, dtype=float)
        self._tree = cKDTree(self.points)

    def __len__(self):
        return self.points.shape[0]

    def query(self, queries: np.ndarray, k: int = 1) -> tuple[np.ndarray, np.ndarray]:
        """Return ``(distances, indices)``, both of shape ``(M, k)``."""
        queries = np.atleast_2d(np.asarray(queries, dtype=float))
        n = len(self)
        if not 1 <= k <= n:
            raise ValueError(f"k must be in [1, {n}], got {k}")
        extra = min(k + 1, n)
        dist, idx = self._tree.query(queries, k=extra)
        dist = dist.reshape(len(queries), extra)
        idx = idx.reshape(len(queries), extra)
        head_d, head_i = dist[:, :k], idx[:, :k]
        order = np.lexsort((head_i, head_d), axis=-1)
        out_d = np.take_along_axis(head_d, order, axis=1)
        out_i = np.take_along_axis(head_i, order, axis=1).astype(np.intp)
        if extra > k:
            # a tie straddling the k-th slot can hide a lower-index neighbour
            for row in np.flatnonzero((dist[:, k - 1] == dist[:, k]) & np.isfinite(dist[:, k])):
                radius = dist[row, k - 1] * (1 + 1e-12) + 1e-300
                cand = np.asarray(self._tree.query_ball_point(queries[row], radius), dtype=np.intp)
                cd = np.linalg.norm(self.points[cand] - queries[row], axis=1)
                best = np.lexsort((cand, cd))[:k]
                out_i[row] = cand[best]
                out_d[row] = cd[best]
        return out_d, out_i


def build_knn_index(frame: PointFrame | np.ndarray) -> KnnIndex:
    points = frame.points if isinstance(frame, PointFrame) else frame
    return KnnIndex(points)


def compute_surface_stats(
    frame: PointFrame, k: int = DEFAULT_K, index: KnnIndex | None = None
) -> PointFrame:
    """Attach neighbourhood covariance eigenvalues and normals to every point.

    The neighbourhood is the ``k`` nearest points including the point itself.
    Normals are the eigenvector of the smallest eigenvalue, flipped to face
    the sensor origin.
    """
    n = len(frame)
    if n <= k:
        raise ValueError(f"need more than k={k} points, frame has {n}")
    index = index or build_knn_index(frame)
    _, nbr = index.query(frame.points, k=k)
    neighbourhoods = frame.points[nbr]
    centred = neighbourhoods - neighbourhoods.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centred, centred) / k
    eigvals, eigvecs = np.linalg.eigh(cov)
    eigvals = np.maximum(eigvals, 0.0)
    normals = eigvecs[:, :, 0].copy()
    flip = np.einsum("ij,ij->i", normals, -frame.points) < 0.0
    normals[flip] = -normals[flip]
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    valid = eigvals[:, 2] >= DEGENERATE_EIGENVALUE
    normals[~valid] = np.nan
    stats = SurfaceStats(
        normals=normals,
        eigenvalues=eigvals,
        neighbor_count=np.full(n, k, dtype=int),
        valid=valid,
    )
    return frame.with_stats(stats)
