"""Command-line front end: ``lbc <command> ...``.

Settings are resolved as built-in defaults, then the JSON file given with
``--config``, then ``LBC_DATA_ROOT`` (dataset root only), then explicit
flags.  Exit codes: 0 success, 2 odometry finished with flagged frames,
64 usage or configuration error, 65 bad input data, 74 I/O error.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import gp
from .evalcorrect import (
    DEFAULT_KAPPA,
    DOF_COMPONENT,
    DOF_FEATURE,
    DOFS,
    SEGMENT_LENGTHS,
    MissingPrediction,
    UnknownSequence,
    apply_correction,
    compute_error_samples,
    make_training_set,
    predict_errors,
    read_error_csv,
    segment_errors,
    write_error_csv,
)
from .features import compute_features, read_feature_csv, write_feature_csv
from .keypoints import DEFAULT_FRACTION, DEFAULT_GROUND_HEIGHT
from .odometry import POINT_SIGMA, OdometryConfig, prepare_frame, run_odometry
from .pointcloud import DEFAULT_K, NonFiniteData, TruncatedFile, list_scans, read_kitti_bin, write_kitti_bin
from .synth import generate_sequence, route_scene, route_trajectory, scene_to_json, study_route
from .trajectory import LengthMismatch, read_kitti_poses, write_kitti_poses

log = logging.getLogger("lbc")

EX_OK = 0
EX_FLAGGED = 2
EX_USAGE = 64
EX_DATAERR = 65
EX_IOERR = 74
ENV_DATA_ROOT = "LBC_DATA_ROOT"


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


@dataclass
class PipelineConfig:
    keypoint_fraction: float = DEFAULT_FRACTION
    ground_height: float = DEFAULT_GROUND_HEIGHT
    knn_k: int = DEFAULT_K
    max_match_dist: float = OdometryConfig.max_match_dist
    kappa: int = DEFAULT_KAPPA
    point_sigma: float = POINT_SIGMA
    prior_weight: float = OdometryConfig.prior_weight
    gp_restarts: int = gp.DEFAULT_RESTARTS
    seed: int = 0
    holdout: str | None = None
    data_root: str | None = None
    output_dir: str = "."

    def validate(self) -> None:
        checks = [
            (0.0 < self.keypoint_fraction <= 1.0, "keypoint_fraction must be in (0, 1]"),
            (self.knn_k >= 3, "knn_k must be at least 3"),
            (self.max_match_dist > 0.0, "max_match_dist must be positive"),
            (self.kappa >= 1, "kappa must be at least 1"),
            (self.point_sigma > 0.0, "point_sigma must be positive"),
            (self.prior_weight >= 0.0, "prior_weight must be non-negative"),
            (self.gp_restarts >= 0, "gp_restarts must be non-negative"),
        ]
        for ok, message in checks:
            if not ok:
                raise UsageError(message)

    def odometry(self) -> OdometryConfig:
        return OdometryConfig(
            keypoint_fraction=self.keypoint_fraction,
            ground_height=self.ground_height,
            knn_k=self.knn_k,
            max_match_dist=self.max_match_dist,
            point_sigma=self.point_sigma,
            prior_weight=self.prior_weight,
        )


_FIELD_TYPES = {"keypoint_fraction": float, "ground_height": float, "knn_k": int, "max_match_dist": float,
                "kappa": int, "point_sigma": float, "prior_weight": float, "gp_restarts": int, "seed": int,
                "holdout": str, "data_root": str, "output_dir": str}  # fmt: skip


def load_config_file(path) -> dict:
    try:
        doc = json.loads(Path(path).read_text())
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise UsageError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise UsageError(f"config {path} must be a JSON object")
    unknown = sorted(set(doc) - set(_FIELD_TYPES))
    if unknown:
        raise UsageError(f"unknown config keys: {', '.join(unknown)}")
    out = {}
    for key, value in doc.items():
        kind = _FIELD_TYPES[key]
        if value is None and key in ("holdout", "data_root"):
            out[key] = None
            continue
        # bool is an int subclass; reject it explicitly
        if isinstance(value, bool) or not isinstance(value, (int, float) if kind is float else kind):
            raise UsageError(f"config key {key!r} must be {kind.__name__}, got {value!r}")
        out[key] = kind(value)
    return out


def resolve_config(args: argparse.Namespace, environ=os.environ) -> PipelineConfig:
    values = dataclasses.asdict(PipelineConfig())
    if args.config:
        values.update(load_config_file(args.config))
    if environ.get(ENV_DATA_ROOT):
        values["data_root"] = environ[ENV_DATA_ROOT]
    for key in _FIELD_TYPES:
        flag = getattr(args, key, None)
        if flag is not None:
            values[key] = flag
    cfg = PipelineConfig(**values)
    cfg.validate()
    return cfg


# ----------------------------------------------------------------- helpers


def _out_path(cfg: PipelineConfig, given: str | None, default_name: str) -> Path:
    path = Path(given) if given else Path(cfg.output_dir) / default_name
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def _sequence_dir(cfg: PipelineConfig, seq: str) -> Path:
    candidates = [Path(seq)]
    if cfg.data_root:
        candidates += [Path(cfg.data_root) / seq, Path(cfg.data_root) / "sequences" / seq]
    for c in candidates:
        if c.is_dir():
            return c
    raise UsageError(f"sequence directory {seq!r} not found")


def _scan_paths(cfg: PipelineConfig, seq: str) -> list[Path]:
    paths = list_scans(_sequence_dir(cfg, seq))
    if not paths:
        raise UsageError(f"no .bin scans in {seq!r}")
    return paths


def _read_frames(paths):
    for k, path in enumerate(paths):
        try:
            yield read_kitti_bin(path, frame_index=k)
        except (TruncatedFile, NonFiniteData) as exc:
            log.warning("frame %d unreadable, using constant-velocity prediction: %s", k, exc)
            yield None


def _read_poses(path):
    try:
        return read_kitti_poses(path)
    except ValueError as exc:
        raise DataError(str(exc)) from exc


# ----------------------------------------------------------------- commands


def cmd_odom(args, cfg: PipelineConfig) -> int:
    paths = _scan_paths(cfg, args.sequence)
    name = Path(args.sequence).name
    features = []

    def keep(k, frame, keys):
        features.append(compute_features(frame, keys))

    start = time.perf_counter()
    result = run_odometry(_read_frames(paths), cfg.odometry(), on_keypoints=keep if args.features else None)
    log.info("odometry: %d frames in %.1f s", len(paths), time.perf_counter() - start)
    write_kitti_poses(_out_path(cfg, args.out, f"{name}.txt"), result.trajectory)
    with open(_out_path(cfg, args.diagnostics, f"{name}_diagnostics.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["frame", "keypoints", "matches", "inliers", "iterations", "cost", "condition_number", "flag"])
        for f in result.frames:
            d = f.diagnostics
            w.writerow([f.frame_index, f.keypoints, d.matches, d.inliers, d.iterations, d.cost, d.condition_number, f.flag or ""])
    if args.features:
        write_feature_csv(args.features, features)
    if result.flagged:
        log.warning("%d flagged frames: %s", len(result.flagged), result.flagged[:20])
        return EX_FLAGGED
    return EX_OK


def cmd_features(args, cfg: PipelineConfig) -> int:
    paths = _scan_paths(cfg, args.sequence)
    ocfg = cfg.odometry()
    out = []
    for k, path in enumerate(paths):
        try:
            frame, keys = prepare_frame(read_kitti_bin(path, frame_index=k), ocfg)
        except (TruncatedFile, NonFiniteData, ValueError) as exc:
            log.warning("frame %d skipped: %s", k, exc)
            continue
        out.append(compute_features(frame, keys))
    write_feature_csv(_out_path(cfg, args.out, f"{Path(args.sequence).name}_features.csv"), out)
    return EX_OK


def cmd_errors(args, cfg: PipelineConfig) -> int:
    odom, gt = _read_poses(args.odom), _read_poses(args.gt)
    samples = compute_error_samples(odom, gt, cfg.kappa)
    write_error_csv(_out_path(cfg, args.out, f"{Path(args.odom).stem}_errors.csv"), samples)
    return EX_OK


def cmd_train(args, cfg: PipelineConfig) -> int:
    if len(args.features) != len(args.errors):
        raise UsageError("give one error table per feature table")
    sequences = {}
    for fpath, epath in zip(args.features, args.errors):
        name = Path(fpath).stem.removesuffix("_features")
        if name in sequences:
            raise UsageError(f"duplicate sequence name {name!r}")
        sequences[name] = (read_feature_csv(fpath), read_error_csv(epath))
    train, valid = make_training_set(sequences, cfg.holdout)
    out_dir = Path(args.out_dir or cfg.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    report = {"holdout": cfg.holdout, "sequences": sorted(sequences), "models": {}}
    for dof in DOFS:
        X, y = train[dof]
        model = gp.fit(X, y, restarts=cfg.gp_restarts, seed=cfg.seed, dof_tag=dof)
        gp.save(model, out_dir / f"{dof}.json")
        entry = {
            "n": model.n,
            "log_marginal_likelihood": model.log_marginal_likelihood(),
            "length_scales": model.hyper.length_scales.tolist(),
            "signal_std": model.hyper.signal_std,
            "noise_std": model.hyper.noise_std,
        }
        if valid:
            Xv, yv = valid[dof]
            mean, _ = gp.predict(model, Xv)
            entry["validation_rmse"] = float(np.sqrt(np.mean((mean - yv) ** 2))) if len(yv) else None
        report["models"][dof] = entry
        log.info("%s: n=%d lml=%.3f", dof, model.n, entry["log_marginal_likelihood"])
    (out_dir / "train_report.json").write_text(json.dumps(report, indent=2))
    return EX_OK


def _load_models(model_dir) -> dict:
    models = {}
    for dof in DOFS:
        path = Path(model_dir) / f"{dof}.json"
        try:
            models[dof] = gp.load(path)
        except (gp.CorruptModel, gp.VersionMismatch) as exc:
            raise DataError(f"{path}: {exc}") from exc
    return models


def cmd_correct(args, cfg: PipelineConfig) -> int:
    odom = _read_poses(args.poses)
    if args.predictions:
        # test hook: error twists given directly instead of model output
        preds = {s.frame_index: s.xi for s in read_error_csv(args.predictions)}
    else:
        if not args.features or not args.models:
            raise UsageError("correct needs --features and --models (or --predictions)")
        models = _load_models(args.models)
        features = read_feature_csv(args.features)
        for dof, model in models.items():
            width = len(getattr(features[0], DOF_FEATURE[dof])) if features else model.dim
            if width != model.dim:
                raise DataError(f"{dof} model expects {model.dim} feature columns, table has {width}")
        have = {f.frame_index for f in features}
        missing = [k for k in range(cfg.kappa, len(odom)) if k not in have]
        if missing:
            raise DataError(f"no feature rows for frames {missing[:10]}")
        table = predict_errors(models, features, len(odom))
        for dof in DOFS:
            log.info("mean |%s prediction| = %.3g", dof, float(np.mean(np.abs(table[cfg.kappa :, DOF_COMPONENT[dof]]))))
        preds = table
    corrected = apply_correction(odom, preds, cfg.kappa)
    write_kitti_poses(_out_path(cfg, args.out, f"{Path(args.poses).stem}_corrected.txt"), corrected)
    return EX_OK


def cmd_eval(args, cfg: PipelineConfig) -> int:
    gt = _read_poses(args.gt)
    before = segment_errors(_read_poses(args.odom), gt)
    after = segment_errors(_read_poses(args.after), gt) if args.after else None
    doc = json.loads(before.to_json())
    if after is not None:
        doc = {"before": doc, "after": json.loads(after.to_json())}
    text = json.dumps(doc, indent=2)
    if args.out:
        _out_path(cfg, args.out, "").write_text(text + "\n")
    else:
        print(text)
    if args.csv:
        with open(_out_path(cfg, args.csv, ""), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["length", "before"] + (["after"] if after else []))
            for L in SEGMENT_LENGTHS:
                if L in before.per_length:
                    row = [L, repr(before.per_length[L])]
                    if after:
                        row.append(repr(after.per_length.get(L, float("nan"))))
                    w.writerow(row)
    return EX_OK


def cmd_synth(args, cfg: PipelineConfig) -> int:
    if args.frames < 2:
        raise UsageError("--frames must be at least 2")
    if args.route == "study":
        gt = study_route(args.frames, args.step)
    else:
        # start from rest like the study route; the first frame has no velocity estimate
        gt = route_trajectory(args.frames, args.step, ramp=min(20, args.frames - 1))
    if args.zone_length is not None and args.zone_length <= 0:
        raise UsageError("--zone-length must be positive")
    scene = route_scene(gt, seed=cfg.seed, zone_length=args.zone_length)
    out = Path(args.out_dir or cfg.output_dir)
    (out / "velodyne").mkdir(parents=True, exist_ok=True)
    for k, frame in enumerate(generate_sequence(scene, gt)):
        write_kitti_bin(out / "velodyne" / f"{k:06d}.bin", frame)
    write_kitti_poses(out / "poses.txt", gt)
    (out / "scene.json").write_text(scene_to_json(scene))
    log.info("wrote %d frames to %s", args.frames, out)
    return EX_OK


# ----------------------------------------------------------------- parser


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EX_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON settings file")
    common.add_argument("--kappa", type=int, help="error window in frames")
    common.add_argument("--keypoint-fraction", dest="keypoint_fraction", type=float)
    common.add_argument("--ground-height", dest="ground_height", type=float, help="sensor-frame z below which points are ground")
    common.add_argument("--knn-k", dest="knn_k", type=int, help="neighbours for normal estimation")
    common.add_argument("--holdout", help="sequence name kept out of training")
    common.add_argument("--seed", type=int)
    common.add_argument("--output-dir", dest="output_dir")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="lbc", description="Lidar odometry with learned bias correction.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("odom", parents=[common], help="run odometry on a sequence of .bin scans")
    p.add_argument("sequence")
    p.add_argument("--out", help="pose file")
    p.add_argument("--diagnostics", help="per-frame diagnostics CSV")
    p.add_argument("--features", help="also write the feature table here")
    p.set_defaults(func=cmd_odom)

    p = sub.add_parser("features", parents=[common], help="compute per-frame features")
    p.add_argument("sequence")
    p.add_argument("--out")
    p.set_defaults(func=cmd_features)

    p = sub.add_parser("errors", parents=[common], help="windowed odometry errors against ground truth")
    p.add_argument("odom")
    p.add_argument("gt")
    p.add_argument("--out")
    p.set_defaults(func=cmd_errors)

    p = sub.add_parser("train", parents=[common], help="fit the z, pitch and roll models")
    p.add_argument("--features", nargs="+", required=True)
    p.add_argument("--errors", nargs="+", required=True)
    p.add_argument("--out-dir", dest="out_dir")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("correct", parents=[common], help="apply predicted corrections to a pose file")
    p.add_argument("poses")
    p.add_argument("--features")
    p.add_argument("--models", help="directory holding z.json, pitch.json, roll.json")
    p.add_argument("--predictions", help="error-table CSV used instead of model predictions")
    p.add_argument("--out")
    p.set_defaults(func=cmd_correct)

    p = sub.add_parser("eval", parents=[common], help="segment errors of a pose file against ground truth")
    p.add_argument("odom")
    p.add_argument("gt")
    p.add_argument("--after", help="second (corrected) pose file to compare")
    p.add_argument("--out", help="report JSON (default: stdout)")
    p.add_argument("--csv", help="per-length CSV")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic sequence with ground truth")
    p.add_argument("--frames", type=int, default=200)
    p.add_argument("--step", type=float, default=1.0, help="metres per frame")
    p.add_argument("--route", choices=["study", "straight"], default="study")
    p.add_argument("--zone-length", dest="zone_length", type=float, help="metres per zone of varying structure")
    p.add_argument("--out-dir", dest="out_dir")
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None, environ=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args, os.environ if environ is None else environ)
        return args.func(args, cfg)
    except UsageError as exc:
        log.error("%s", exc)
        return EX_USAGE
    except (DataError, LengthMismatch, UnknownSequence, MissingPrediction, gp.DimensionMismatch) as exc:
        log.error("%s", exc)
        return EX_DATAERR
    except ValueError as exc:
        log.error("bad input: %s", exc)
        return EX_DATAERR
    except OSError as exc:
        log.error("I/O error: %s", exc)
        return EX_IOERR


if __name__ == "__main__":
    sys.exit(main())
