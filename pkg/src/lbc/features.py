"""Geometric input features for the bias models.

``normal_sum`` sums the absolute normal components of planar keypoints and
divides by the keypoint count M; it feeds the z and pitch models.
``azimuth_slices`` counts planar keypoints with near-vertical normals in 16
azimuth sectors (sector 0 starts at -pi), again divided by M; it feeds the
roll model.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from .keypoints import KeypointSet
from .pointcloud import PointFrame

N_SLICES = 16
Z_THRESHOLD = 0.9
CSV_HEADER = ["frame_index", "ns_x", "ns_y", "ns_z"] + [f"az_{i}" for i in range(N_SLICES)]


@dataclass(frozen=True)
class FeatureVector:
    normal_sum: np.ndarray
    azimuth_slices: np.ndarray
    frame_index: int = 0


def _planar_normals(frame: PointFrame, keys: KeypointSet) -> tuple[np.ndarray, np.ndarray]:
    idx = keys.planar_indices
    normals = frame.stats.normals[idx]
    ok = np.all(np.isfinite(normals), axis=1)
    return idx[ok], normals[ok]


def normal_sum_feature(frame: PointFrame, keys: KeypointSet) -> np.ndarray:
    m = len(keys)
    if m == 0:
        return np.zeros(3)
    _, normals = _planar_normals(frame, keys)
    return np.abs(normals).sum(axis=0) / m


def azimuth_slice(points: np.ndarray) -> np.ndarray:
    azimuth = np.arctan2(points[:, 1], points[:, 0])
    s = np.floor(N_SLICES * (azimuth + math.pi) / (2.0 * math.pi)).astype(int)
    return np.clip(s, 0, N_SLICES - 1)


def azimuth_slice_feature(frame: PointFrame, keys: KeypointSet, z_threshold: float = Z_THRESHOLD) -> np.ndarray:
    m = len(keys)
    if m == 0:
        return np.zeros(N_SLICES)
    idx, normals = _planar_normals(frame, keys)
    vertical = np.abs(normals[:, 2]) >= z_threshold
    counts = np.bincount(azimuth_slice(frame.points[idx[vertical]]), minlength=N_SLICES)
    return counts / m


def compute_features(frame: PointFrame, keys: KeypointSet, z_threshold: float = Z_THRESHOLD) -> FeatureVector:
    return FeatureVector(
        normal_sum_feature(frame, keys),
        azimuth_slice_feature(frame, keys, z_threshold),
        frame.frame_index,
    )


def feature_matrix(features: Iterable[FeatureVector], kind: str) -> np.ndarray:
    """Stack ``normal_sum`` (kind="normal_sum") or ``azimuth_slices`` rows."""
    return np.array([getattr(f, kind) for f in features], dtype=float)


def write_feature_csv(path, features: Iterable[FeatureVector]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_HEADER)
        for f in features:
            w.writerow([f.frame_index] + [repr(float(v)) for v in (*f.normal_sum, *f.azimuth_slices)])


def read_feature_csv(path) -> list[FeatureVector]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != CSV_HEADER:
            raise ValueError(f"{Path(path).name}: unexpected feature header {header}")
        out = []
        for row in reader:
            if not row:
                continue
            if len(row) != len(CSV_HEADER):
                raise ValueError(f"{Path(path).name}: row has {len(row)} columns, expected {len(CSV_HEADER)}")
            vals = [float(v) for v in row[1:]]
            out.append(FeatureVector(np.array(vals[:3]), np.array(vals[3:]), int(row[0])))
    return out
