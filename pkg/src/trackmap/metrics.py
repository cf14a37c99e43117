"""Depth-map error metrics and the translational drift metric.

The depth metrics take metric depth (meters); use ``to_metric_depth`` to
convert internal inverse-depth maps at the evaluation boundary. The drift
metric follows the relative-pose-error convention of the standard RGB-D
benchmark tooling, with nearest-neighbor timestamp association (max gap
0.02 s).
"""

from __future__ import annotations

import math
from typing import List, Sequence, Tuple

import numpy as np

from .errors import InsufficientOverlapInTime, NonPositiveDepth, NoValidPixels
from .geometry import Pose, compose, inverse
from .imaging import InverseDepthMap

MAX_ASSOCIATION_GAP = 0.02

Trajectory = Sequence[Tuple[float, Pose]]


def to_metric_depth(d: InverseDepthMap) -> Tuple[np.ndarray, np.ndarray]:
    """Metric depth (meters) and validity from an inverse-depth map."""
    depth = np.where(d.valid, 1.0 / np.where(d.valid, d.values, 1.0), 0.0)
    return depth, d.valid.copy()


def _joint_positive(d, d_gt, valid, valid_gt):
    d = np.asarray(d, dtype=np.float64)
    d_gt = np.asarray(d_gt, dtype=np.float64)
    if d.shape != d_gt.shape:
        raise ValueError("depth maps must share dimensions")
    joint = np.asarray(valid, dtype=bool) & np.asarray(valid_gt, dtype=bool)
    if not joint.any():
        raise NoValidPixels("no jointly valid depth pixels")
    if (d[joint] <= 0).any() or (d_gt[joint] <= 0).any():
        raise NonPositiveDepth("depth metrics need strictly positive depths")
    return d[joint], d_gt[joint]


def sc_inv(d, d_gt, valid=None, valid_gt=None) -> float:
    """Scale-invariant error: stddev of the log depth ratio.

    sqrt( (1/n) sum E^2 - (1/n^2) (sum E)^2 ) with E = log D - log D_gt.
    Evaluated in the algebraically identical centered form
    sqrt( (1/n) sum (E - mean E)^2 ), which is exactly invariant to global
    positive rescaling of either argument instead of cancelling two large
    moments against each other.
    """
    dv, gv = _prepare(d, d_gt, valid, valid_gt)
    e = np.log(dv) - np.log(gv)
    dev = e - e.mean()
    return math.sqrt((dev * dev).mean())


def l1_rel(d, d_gt, valid=None, valid_gt=None) -> float:
    """Mean |D - D_gt| / D_gt over valid pixels."""
    dv, gv = _prepare(d, d_gt, valid, valid_gt)
    return float((np.abs(dv - gv) / gv).mean())


def l1_inv(d, d_gt, valid=None, valid_gt=None) -> float:
    """Mean |1/D - 1/D_gt| over valid pixels."""
    dv, gv = _prepare(d, d_gt, valid, valid_gt)
    return float(np.abs(1.0 / dv - 1.0 / gv).mean())


def _prepare(d, d_gt, valid, valid_gt):
    if valid is None:
        valid = np.asarray(d, dtype=np.float64) > 0
    if valid_gt is None:
        valid_gt = np.asarray(d_gt, dtype=np.float64) > 0
    return _joint_positive(d, d_gt, valid, valid_gt)


def associate_timestamps(ts_a: Sequence[float], ts_b: Sequence[float],
                         max_gap: float = MAX_ASSOCIATION_GAP) -> List[Tuple[int, int]]:
    """Greedy nearest-neighbor matching of two sorted timestamp lists."""
    pairs = []
    used = set()
    j = 0
    for i, t in enumerate(ts_a):
        while j + 1 < len(ts_b) and abs(ts_b[j + 1] - t) <= abs(ts_b[j] - t):
            j += 1
        if j < len(ts_b) and abs(ts_b[j] - t) <= max_gap and j not in used:
            pairs.append((i, j))
            used.add(j)
    return pairs


def translational_rpe_rmse(est: Trajectory, gt: Trajectory,
                           interval: float = 1.0,
                           max_gap: float = MAX_ASSOCIATION_GAP) -> float:
    """Root-mean-square translational relative-pose error in m/s.

    Trajectories are associated by nearest timestamp (max gap 0.02 s). For
    each aligned frame and its partner one ``interval`` later, the relative
    pose discrepancy is
        dP = (Q_t^-1 Q_{t+i})^-1 (P_t^-1 P_{t+i})
    and the reported value is the RMSE of |translation(dP)| divided by the
    actual time difference.
    """
    est = list(est)
    gt = list(gt)
    pairs = associate_timestamps([t for t, _ in est], [t for t, _ in gt], max_gap)
    if len(pairs) < 2:
        raise InsufficientOverlapInTime("fewer than two aligned trajectory samples")
    times = [est[i][0] for i, _ in pairs]
    p = [est[i][1] for i, _ in pairs]
    q = [gt[j][1] for _, j in pairs]

    errors = []
    k = 0
    for i, t in enumerate(times):
        target = t + interval
        while k + 1 < len(times) and abs(times[k + 1] - target) <= abs(times[k] - target):
            k += 1
        if k <= i or abs(times[k] - target) > max_gap:
            continue
        dt = times[k] - t
        rel_est = compose(inverse(p[i]), p[k])
        rel_gt = compose(inverse(q[i]), q[k])
        delta = compose(inverse(rel_gt), rel_est)
        errors.append(float(np.linalg.norm(delta.translation)) / dt)
    if len(errors) < 1:
        raise InsufficientOverlapInTime("no frame pairs spaced by the interval")
    errors = np.asarray(errors)
    return float(math.sqrt((errors * errors).mean()))
