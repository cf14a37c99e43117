"""Command-line surface.

Subcommands: synth-gen, track, map, eval, noise-study, gradcheck.
Exit codes: 0 success, 2 input error, 3 tracking lost, 4 numerical failure.
All randomness flows from the single config seed; every subcommand writes
its resolved configuration next to its outputs.
"""

from __future__ import annotations

import argparse
import logging
import math
import os
import sys
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import metrics, synth, tumio
from .config import EngineConfig, load_config
from .costvolume import accumulate_cost_volume, fixed_band_labels
from .depthestim import narrow_band_refine, extract_depth
from .errors import (InputError, NumericalError, TrackingLost, TrackmapError)
from .geometry import Pose
from .imaging import CameraIntrinsics, Image, InverseDepthMap
from .keyframe import Keyframe
from .losses import finite_difference_check
from .gradsuite import LOSS_NAMES, gradient_suite_cases
from .tracker import track_sequence

log = logging.getLogger("trackmap")

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_TRACKING_LOST = 3
EXIT_NUMERICAL = 4


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _write_csv(path, header: Sequence[str], rows: Sequence[Sequence]) -> None:
    with open(path, "w") as f:
        f.write(",".join(header) + "\n")
        for row in rows:
            f.write(",".join(_fmt(v) for v in row) + "\n")


def _write_resolved_config(out_dir, cfg: EngineConfig) -> None:
    with open(os.path.join(out_dir, "resolved_config.txt"), "w") as f:
        f.write(cfg.to_text())
    log.info("resolved config:\n%s", cfg.to_text())


def _overrides_from_args(pairs: Optional[List[str]]):
    overrides = {}
    for item in pairs or []:
        if "=" not in item:
            raise InputError(f"--set expects key=value, got {item!r}")
        key, _, value = item.partition("=")
        overrides[key.strip()] = value.strip()
    return overrides


def _load_engine_config(args) -> EngineConfig:
    overrides = _overrides_from_args(getattr(args, "set", None))
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = str(args.seed)
    return load_config(getattr(args, "config", None), overrides)


def _sequence_intrinsics(seq: tumio.SequenceData) -> CameraIntrinsics:
    if seq.intrinsics is not None:
        return seq.intrinsics
    first = seq.frames[0].image
    return CameraIntrinsics.simple(first.width, first.height)


# -- synth-gen -----------------------------------------------------------------

def _build_scene(args) -> synth.SyntheticScene:
    if args.scene not in synth.SCENE_BUILDERS:
        raise InputError(f"unknown scene {args.scene!r}; "
                         f"choose from {sorted(synth.SCENE_BUILDERS)}")
    if args.motion == "lateral":
        trajectory = synth.lateral_trajectory(args.frames, args.step)
    elif args.motion == "orbit":
        trajectory = synth.yaw_orbit_trajectory(args.frames, args.orbit_step_deg)
    else:
        raise InputError(f"unknown motion {args.motion!r}")
    return synth.SCENE_BUILDERS[args.scene](
        seed=args.seed, width=args.width, height=args.height,
        trajectory=trajectory)


def cmd_synth_gen(args) -> int:
    scene = _build_scene(args)
    os.makedirs(args.out, exist_ok=True)
    images, depths = [], []
    for _, pose in scene.trajectory:
        img, dep = synth.render_scene(scene, pose)
        images.append(img)
        depths.append(dep)
    tumio.write_tum_sequence(args.out, scene.timestamps, images, depths,
                             trajectory=scene.trajectory,
                             intrinsics=scene.intrinsics)
    log.info("wrote %d frames to %s", len(images), args.out)
    return EXIT_OK


# -- track -----------------------------------------------------------------------

def cmd_track(args) -> int:
    cfg = _load_engine_config(args)
    seq = tumio.load_tum_sequence(args.seq)
    if len(seq) < 2:
        raise InputError("sequence needs at least two frames")
    if seq.frames[0].inv_depth is None:
        raise InputError("first frame needs depth to build the initial keyframe")
    os.makedirs(args.out, exist_ok=True)
    _write_resolved_config(args.out, cfg)

    K = _sequence_intrinsics(seq)
    kf_pose = seq.groundtruth_pose(0) or Pose.identity()
    kf = Keyframe(seq.frames[0].image, seq.frames[0].inv_depth, kf_pose, K, id=0)

    def depth_source(i: int) -> InverseDepthMap:
        dep = seq.frames[i].inv_depth
        if dep is None:
            raise TrackingLost(f"frame {i} has no depth for a keyframe switch")
        return dep

    frames = [(f.timestamp, f.image) for f in seq.frames]
    traj_path = os.path.join(args.out, "trajectory.txt")
    diag_path = os.path.join(args.out, "diagnostics.csv")
    try:
        result = track_sequence(frames, kf, cfg.tracker_config(), depth_source)
    except TrackingLost as exc:
        tumio.save_trajectory(traj_path, exc.partial_trajectory)
        log.error("tracking lost: %s", exc)
        return EXIT_TRACKING_LOST
    tumio.save_trajectory(traj_path, result.trajectory)
    _write_csv(diag_path,
               ["frame", "level", "residual_rms", "covariance_trace", "keyframe"],
               [[d["frame"], d["level"], d["residual_rms"],
                 d["covariance_trace"], d["keyframe"]] for d in result.diagnostics])
    _write_csv(os.path.join(args.out, "keyframes.csv"), ["frame_id"],
               [[i] for i in result.keyframe_ids])
    log.info("tracked %d frames, %d keyframes", len(result.trajectory),
             len(result.keyframe_ids))
    return EXIT_OK


# -- map -------------------------------------------------------------------------

def _window_frames(seq: tumio.SequenceData, start: int, count: int,
                   poses: List[Optional[Pose]]):
    window = []
    for i in range(start, min(start + count, len(seq))):
        if poses[i] is None:
            raise InputError(f"frame {i} has no associated ground-truth pose")
        window.append((seq.frames[i].image, poses[i]))
    return window


def map_window(kf: Keyframe, window, cfg: EngineConfig,
               method: Optional[str] = None,
               nb_iters: Optional[int] = None) -> InverseDepthMap:
    """Fixed-band volume + extraction, then optional narrow-band refinement."""
    labels = fixed_band_labels(cfg.d_min, cfg.d_max, cfg.labels)
    vol = accumulate_cost_volume(kf, window, labels, cfg.alpha_conf)
    depth = extract_depth(vol, cfg.extraction_config(method))
    iters = cfg.nb_iters if nb_iters is None else nb_iters
    if iters > 0:
        depth = narrow_band_refine(kf, window, depth, iters,
                                   sigma_nb=cfg.sigma_nb, n_labels=cfg.labels,
                                   alpha_conf=cfg.alpha_conf,
                                   median_filter=cfg.median_filter)
    return depth


def cmd_map(args) -> int:
    cfg = _load_engine_config(args)
    if args.frames is not None:
        cfg.frames_window = args.frames
    if args.labels is not None:
        cfg.labels = args.labels
    if args.nb_iters is not None:
        cfg.nb_iters = args.nb_iters
    seq = tumio.load_tum_sequence(args.seq)
    if seq.groundtruth is None:
        raise InputError("map needs a groundtruth.txt with camera poses")
    os.makedirs(args.out, exist_ok=True)
    _write_resolved_config(args.out, cfg)

    K = _sequence_intrinsics(seq)
    poses = [seq.groundtruth_pose(i) for i in range(len(seq))]
    m = cfg.frames_window
    rows = []
    start = 0
    while start + 1 < len(seq):
        count = min(m, len(seq) - start)
        if count < 2:
            break
        frame = seq.frames[start]
        if frame.inv_depth is None:
            raise InputError(f"keyframe frame {start} has no depth map")
        if poses[start] is None:
            raise InputError(f"keyframe frame {start} has no ground-truth pose")
        kf = Keyframe(frame.image, frame.inv_depth, poses[start], K, id=start)
        window = _window_frames(seq, start, count, poses)
        depth = map_window(kf, window, cfg)
        tumio.save_depth_png(os.path.join(args.out, f"depth_{start:06d}.png"),
                             depth)
        tumio.save_pfm(os.path.join(args.out, f"invdepth_{start:06d}.pfm"),
                       np.where(depth.valid, depth.values, 0.0))
        gt_depth, gt_valid = metrics.to_metric_depth(frame.inv_depth)
        est_depth, est_valid = metrics.to_metric_depth(depth)
        rows.append([start,
                     metrics.l1_inv(est_depth, gt_depth, est_valid, gt_valid),
                     metrics.l1_rel(est_depth, gt_depth, est_valid, gt_valid),
                     metrics.sc_inv(est_depth, gt_depth, est_valid, gt_valid)])
        start += m
    _write_csv(os.path.join(args.out, "map_metrics.csv"),
               ["keyframe", "l1_inv", "l1_rel", "sc_inv"], rows)
    log.info("mapped %d keyframes", len(rows))
    return EXIT_OK


# -- eval ------------------------------------------------------------------------

def cmd_eval(args) -> int:
    rows = []
    if args.est_traj and args.gt_traj:
        est = tumio.load_trajectory(args.est_traj)
        gt = tumio.load_trajectory(args.gt_traj)
        rpe = metrics.translational_rpe_rmse(est, gt, args.interval)
        rows.append(["trajectory", "rpe_rmse_m_per_s", rpe])
    if args.est_depth and args.gt_depth:
        names = sorted(n for n in os.listdir(args.est_depth) if n.endswith(".png"))
        if not names:
            raise InputError(f"no depth PNGs in {args.est_depth}")
        for name in names:
            gt_file = os.path.join(args.gt_depth, name)
            if not os.path.exists(gt_file):
                raise InputError(f"missing ground-truth depth {gt_file}")
            est_d = tumio.load_depth_png(os.path.join(args.est_depth, name))
            gt_d = tumio.load_depth_png(gt_file)
            est_m, est_v = metrics.to_metric_depth(est_d)
            gt_m, gt_v = metrics.to_metric_depth(gt_d)
            rows.append([name, "l1_inv", metrics.l1_inv(est_m, gt_m, est_v, gt_v)])
            rows.append([name, "l1_rel", metrics.l1_rel(est_m, gt_m, est_v, gt_v)])
            rows.append([name, "sc_inv", metrics.sc_inv(est_m, gt_m, est_v, gt_v)])
    if not rows:
        raise InputError("eval needs --est-traj/--gt-traj and/or "
                         "--est-depth/--gt-depth")
    _write_csv(args.out, ["subject", "metric", "value"], rows)
    return EXIT_OK


# -- noise-study -------------------------------------------------------------------

def cmd_noise_study(args) -> int:
    cfg = _load_engine_config(args)
    seq = tumio.load_tum_sequence(args.seq)
    if seq.groundtruth is None:
        raise InputError("noise-study needs ground-truth poses")
    if seq.frames[0].inv_depth is None:
        raise InputError("noise-study needs ground-truth depth for frame 0")
    os.makedirs(args.out, exist_ok=True)
    _write_resolved_config(args.out, cfg)

    K = _sequence_intrinsics(seq)
    poses = [seq.groundtruth_pose(i) for i in range(len(seq))]
    count = min(cfg.frames_window, len(seq))
    if count < 2:
        raise InputError("noise-study needs at least two frames in the window")
    if any(p is None for p in poses[:count]):
        raise InputError("every window frame needs a ground-truth pose")

    levels = [args.std] if args.std is not None else cfg.noise_level_list()
    extractors = cfg.noise_extractor_list()
    gt_depth, gt_valid = metrics.to_metric_depth(seq.frames[0].inv_depth)

    rows = []
    for rel_std in levels:
        noisy = synth.perturb_poses(poses[:count], rel_std, cfg.seed)
        kf = Keyframe(seq.frames[0].image, seq.frames[0].inv_depth, noisy[0],
                      K, id=0)
        window = [(seq.frames[i].image, noisy[i]) for i in range(count)]
        for method in extractors:
            depth = map_window(kf, window, cfg, method=method)
            est_depth, est_valid = metrics.to_metric_depth(depth)
            rows.append([rel_std, method,
                         metrics.l1_inv(est_depth, gt_depth, est_valid, gt_valid),
                         metrics.l1_rel(est_depth, gt_depth, est_valid, gt_valid),
                         metrics.sc_inv(est_depth, gt_depth, est_valid, gt_valid)])
    _write_csv(os.path.join(args.out, "noise_study.csv"),
               ["rel_std", "extractor", "l1_inv", "l1_rel", "sc_inv"], rows)
    log.info("noise study: %d rows", len(rows))
    return EXIT_OK


# -- gradcheck -----------------------------------------------------------------------

def cmd_gradcheck(args) -> int:
    cfg = _load_engine_config(args)
    rows = []
    worst = {}
    for name, point_idx, fn, point in gradient_suite_cases(cfg.seed, args.points):
        report = finite_difference_check(fn, point)
        worst[name] = max(worst.get(name, 0.0), report.max_rel_error)
        for coord in range(point.size):
            rows.append([name, point_idx, coord,
                         report.rel_errors[coord], int(report.kinks[coord])])
    _write_csv(args.out, ["loss", "point", "coordinate", "rel_error", "kink"],
               rows)
    for name in LOSS_NAMES:
        log.info("gradcheck %-26s max rel error %.3e", name, worst.get(name, 0.0))
    bad = {k: v for k, v in worst.items() if v >= 1e-4}
    if bad:
        log.error("gradient checks failed: %s", bad)
        return EXIT_NUMERICAL
    return EXIT_OK


# -- argument parsing ------------------------------------------------------------------

def _add_common(p):
    p.add_argument("--config", help="configuration file (key = value lines)")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a config key (repeatable)")
    p.add_argument("--seed", type=int, help="override the config seed")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="trackmap",
        description="Keyframe-based dense tracking and plane-sweep mapping")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-gen", help="write a synthetic TUM-format sequence")
    p.add_argument("--out", required=True)
    p.add_argument("--scene", default="box-room")
    p.add_argument("--frames", type=int, default=10)
    p.add_argument("--width", type=int, default=80)
    p.add_argument("--height", type=int, default=60)
    p.add_argument("--motion", default="lateral", choices=["lateral", "orbit"])
    p.add_argument("--step", type=float, default=0.01,
                   help="translation per frame for lateral motion (m)")
    p.add_argument("--orbit-step-deg", type=float, default=5.5)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth_gen)

    p = sub.add_parser("track", help="track a sequence against keyframes")
    p.add_argument("--seq", required=True)
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_track)

    p = sub.add_parser("map", help="estimate keyframe depth maps")
    p.add_argument("--seq", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--frames", type=int, help="window size incl. keyframe")
    p.add_argument("--labels", type=int)
    p.add_argument("--nb-iters", type=int)
    _add_common(p)
    p.set_defaults(func=cmd_map)

    p = sub.add_parser("eval", help="evaluate trajectories and depth maps")
    p.add_argument("--est-traj")
    p.add_argument("--gt-traj")
    p.add_argument("--est-depth")
    p.add_argument("--gt-depth")
    p.add_argument("--interval", type=float, default=1.0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("noise-study", help="pose-noise robustness sweep")
    p.add_argument("--seq", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--std", type=float,
                   help="single noise level instead of the configured sweep")
    _add_common(p)
    p.set_defaults(func=cmd_noise_study)

    p = sub.add_parser("gradcheck", help="finite-difference checks of all losses")
    p.add_argument("--out", required=True)
    p.add_argument("--points", type=int, default=100)
    _add_common(p)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def cli_main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except InputError as exc:
        log.error("input error: %s", exc)
        return EXIT_INPUT
    except TrackingLost as exc:
        log.error("tracking lost: %s", exc)
        return EXIT_TRACKING_LOST
    except NumericalError as exc:
        log.error("numerical failure: %s", exc)
        return EXIT_NUMERICAL
    except TrackmapError as exc:
        log.error("failure: %s", exc)
        return EXIT_NUMERICAL


def main() -> None:
    sys.exit(cli_main())


if __name__ == "__main__":
    main()
