"""Windowed odometry errors, learned-bias correction and segment scoring.

Trajectories store ``P_k`` (frame k into frame 0).  The motion from frame
``tau - kappa`` to frame ``tau`` as used below is ``T = P_tau^-1 P_{tau-kappa}``
and the odometry error over that window is

    T_err = T_gt * T_odom^-1,   xi_err = log(T_err).

Correcting frame tau left-multiplies the odometry motion by
``exp(xi_pred / kappa)``.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .features import FeatureVector
from .gp import GpModel, predict
from .liegroup import CutLocus, Pose, exp_map, inverse, log_map
from .trajectory import LengthMismatch, Trajectory

log = logging.getLogger(__name__)

DEFAULT_KAPPA = 10
SEGMENT_LENGTHS = (100, 200, 300, 400, 500, 600, 700, 800)
SEGMENT_STEP = 10  # start frames, as in the KITTI devkit
DOFS = ("z", "pitch", "roll")
# twist component and feature kind for each corrected degree of freedom
DOF_COMPONENT = {"z": 2, "roll": 3, "pitch": 4}
DOF_FEATURE = {"z": "normal_sum", "pitch": "normal_sum", "roll": "azimuth_slices"}
ERROR_HEADER = ["tau", "kappa", "rho1", "rho2", "rho3", "phi1", "phi2", "phi3"]


class MissingPrediction(KeyError):
    pass


class UnknownSequence(KeyError):
    pass


@dataclass(frozen=True)
class ErrorSample:
    frame_index: int
    kappa: int
    xi: np.ndarray


def window_motion(traj: Trajectory, tau: int, kappa: int) -> Pose:
    """Motion taking frame ``tau - kappa`` coordinates into frame ``tau``."""
    return traj.relative(tau, tau - kappa)


def _check_lengths(odom: Trajectory, gt: Trajectory) -> None:
    if len(odom) != len(gt):
        raise LengthMismatch(f"odometry has {len(odom)} poses, ground truth {len(gt)}")


def compute_error_samples(odom: Trajectory, gt: Trajectory, kappa: int = DEFAULT_KAPPA) -> list[ErrorSample]:
    _check_lengths(odom, gt)
    if kappa < 1:
        raise ValueError(f"kappa must be >= 1, got {kappa}")
    if len(odom) < kappa + 1:
        raise LengthMismatch(f"need at least kappa+1={kappa + 1} poses, got {len(odom)}")
    out = []
    for tau in range(kappa, len(odom)):
        t_err = window_motion(gt, tau, kappa) @ inverse(window_motion(odom, tau, kappa))
        try:
            out.append(ErrorSample(tau, kappa, log_map(t_err)))
        except CutLocus:
            log.warning("error at frame %d (kappa %d) is a half-turn; sample dropped", tau, kappa)
    return out


def _prediction_lookup(predictions, n_frames: int):
    if isinstance(predictions, Mapping):
        return lambda tau: predictions[tau]
    arr = np.asarray(predictions, dtype=float)
    if arr.ndim != 2 or arr.shape[1] != 6 or arr.shape[0] != n_frames:
        raise ValueError(f"prediction array must be ({n_frames}, 6) indexed by frame, got {arr.shape}")
    return lambda tau: arr[tau]


def apply_correction(odom: Trajectory, predictions, kappa: int = DEFAULT_KAPPA) -> Trajectory:
    """Correct frames ``kappa..N`` with per-frame predicted window errors.

    ``predictions`` is either a mapping ``tau -> 6-twist`` or an ``(N+1, 6)``
    array indexed by frame.  Frames before ``kappa``, and all frames up to
    the first nonzero prediction, are copied unchanged.
    """
    if kappa < 1:
        raise ValueError(f"kappa must be >= 1, got {kappa}")
    lookup = _prediction_lookup(predictions, len(odom))
    poses = list(odom.poses[: min(kappa, len(odom))])
    changed = False
    for tau in range(kappa, len(odom)):
        try:
            xi = np.asarray(lookup(tau), dtype=float)
        except (KeyError, IndexError) as exc:
            raise MissingPrediction(f"no prediction for frame {tau}") from exc
        if not changed and not np.any(xi):
            # nothing corrected yet: keep the input pose instead of re-chaining it
            poses.append(odom.poses[tau])
            continue
        changed = True
        step = odom.relative(tau, tau - 1)
        corrected = exp_map(xi / kappa) @ step
        poses.append(poses[-1] @ inverse(corrected))
    return Trajectory(poses, odom.frame_period)


@dataclass
class SegmentErrorReport:
    per_length: dict[int, float] = field(default_factory=dict)
    total: float | None = None
    n_segments: int = 0
    rotation_per_length: dict[int, float] = field(default_factory=dict)  # deg/m

    def to_json(self) -> str:
        return json.dumps(
            {
                "per_length": {str(k): v for k, v in self.per_length.items()},
                "total": self.total,
                "n_segments": self.n_segments,
            },
            indent=2,
        )


def _rotation_angle(r: np.ndarray) -> float:
    return float(np.arccos(np.clip((np.trace(r) - 1.0) / 2.0, -1.0, 1.0)))


def segment_errors(
    odom: Trajectory,
    gt: Trajectory,
    lengths: Sequence[int] = SEGMENT_LENGTHS,
    step: int = SEGMENT_STEP,
) -> SegmentErrorReport:
    """Translational error in percent over path segments of fixed length.

    For each start frame (every ``step`` frames) and length L the segment
    ends at the first frame whose ground-truth path distance from the start
    reaches L.  Segments that run past the end are skipped.
    """
    _check_lengths(odom, gt)
    dist = gt.path_lengths()
    t_err: dict[int, list[float]] = {L: [] for L in lengths}
    r_err: dict[int, list[float]] = {L: [] for L in lengths}
    for first in range(0, len(gt), step):
        for L in lengths:
            # small slack so exact-metre paths are not lost to rounding
            hits = np.flatnonzero(dist >= dist[first] + L - 1e-9)
            if hits.size == 0:
                continue
            last = int(hits[0])
            d_gt = gt.relative(first, last)
            d_odom = odom.relative(first, last)
            err = inverse(d_odom) @ d_gt
            t_err[L].append(float(np.linalg.norm(err.translation)) / L * 100.0)
            r_err[L].append(np.degrees(_rotation_angle(err.rotation)) / L)
    report = SegmentErrorReport()
    every = []
    for L in lengths:
        if t_err[L]:
            report.per_length[L] = float(np.mean(t_err[L]))
            report.rotation_per_length[L] = float(np.mean(r_err[L]))
            every.extend(t_err[L])
    if every:
        report.total = float(np.mean(every))
        report.n_segments = len(every)
    else:
        log.warning("ground-truth path of %.1f m is shorter than the shortest segment", dist[-1])
    return report


def training_rows(
    features: Sequence[FeatureVector], samples: Sequence[ErrorSample], dof: str
) -> tuple[np.ndarray, np.ndarray]:
    """Inputs (feature of frame tau) and targets (twist component) for one DOF."""
    by_frame = {f.frame_index: f for f in features}
    missing = [s.frame_index for s in samples if s.frame_index not in by_frame]
    if missing:
        raise LengthMismatch(f"no features for frames {missing[:5]}")
    kind, comp = DOF_FEATURE[dof], DOF_COMPONENT[dof]
    X = np.array([getattr(by_frame[s.frame_index], kind) for s in samples], dtype=float)
    y = np.array([s.xi[comp] for s in samples], dtype=float)
    return X, y


def make_training_set(
    sequences: Mapping[str, tuple[Sequence[FeatureVector], Sequence[ErrorSample]]],
    holdout: str | None = None,
) -> tuple[dict, dict]:
    """Per-DOF ``(X, y)`` for training (all but ``holdout``) and validation.

    Validation entries are empty when ``holdout`` is None.
    """
    if holdout is not None and holdout not in sequences:
        raise UnknownSequence(f"holdout sequence {holdout!r} not among {sorted(sequences)}")
    train, valid = {}, {}
    for dof in DOFS:
        parts = {name: training_rows(f, s, dof) for name, (f, s) in sequences.items()}
        tr = [parts[n] for n in sequences if n != holdout]
        if not tr:
            raise ValueError("no training sequences left after holdout")
        train[dof] = (np.vstack([p[0] for p in tr]), np.concatenate([p[1] for p in tr]))
        if holdout is not None:
            valid[dof] = parts[holdout]
    return train, valid


def predict_errors(models: Mapping[str, GpModel], features: Sequence[FeatureVector], n_frames: int) -> np.ndarray:
    """Stack per-DOF model means into an ``(n_frames, 6)`` twist array.

    ``models`` maps DOF names to fitted GP models; x, y and yaw stay zero.
    """
    out = np.zeros((n_frames, 6))
    frames = np.array([f.frame_index for f in features], dtype=int)
    if frames.size and (frames.min() < 0 or frames.max() >= n_frames):
        raise LengthMismatch(f"feature frame indices exceed trajectory length {n_frames}")
    for dof, model in models.items():
        X = np.array([getattr(f, DOF_FEATURE[dof]) for f in features], dtype=float)
        mean, _ = predict(model, X)
        out[frames, DOF_COMPONENT[dof]] = mean
    return out


def write_error_csv(path, samples: Sequence[ErrorSample]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(ERROR_HEADER)
        for s in samples:
            w.writerow([s.frame_index, s.kappa] + [repr(float(v)) for v in s.xi])


def read_error_csv(path) -> list[ErrorSample]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ERROR_HEADER:
            raise ValueError(f"{Path(path).name}: unexpected error-sample header {header}")
        out = []
        for row in reader:
            if not row:
                continue
            if len(row) != len(ERROR_HEADER):
                raise ValueError(f"{Path(path).name}: row has {len(row)} columns")
            out.append(ErrorSample(int(row[0]), int(row[1]), np.array([float(v) for v in row[2:]])))
    return out
