"""Coarse-to-fine frame-to-keyframe tracking.

Each pyramid level renders a virtual keyframe at the current pose guess
and estimates a small twist increment against it; the final pose is the
product of all incremental updates applied to the initial guess. The
increment estimator is pluggable; the reference implementation aligns
photometrically with Gauss-Newton, running N independently perturbed
instances whose solutions form the hypothesis set.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from .errors import (DegenerateView, InsufficientOverlap,
                     SingularNormalEquations, TrackingLost)
from .geometry import (HypothesisSet, Pose, Twist, aggregate_hypotheses,
                       apply_increment, compose, exp_twist, inverse, log_pose)
from .imaging import (CameraIntrinsics, Image, InverseDepthMap, backproject,
                      build_pyramid, downsample_inverse_depth, pixel_grid,
                      sample_bilinear, sample_bilinear_grad)
from .keyframe import Keyframe, render_virtual_keyframe, should_switch_keyframe

MIN_FORWARD_Z = 1e-6


@dataclass(frozen=True)
class TrackerConfig:
    """Tracking parameters.

    Level resolutions halve from the input resolution; with the default
    3 levels and 320x240 input the estimator sees 320x240, 160x120 and
    80x60. The hypothesis count N = 64 matches the multi-hypothesis
    aggregation scheme; setting N = 1 disables it for ablations.
    """

    levels: int = 3
    hypotheses: int = 64
    gn_max_iterations: int = 10
    gn_update_tol: float = 1e-6
    init_rot_std_deg: float = 0.5
    init_trans_std_m: float = 0.005
    rot_switch_deg: float = 6.0
    trans_switch_m: float = 0.15
    min_valid_pixels: int = 100
    condition_limit: float = 1e12
    seed: int = 0
    estimator: str = "photometric-gn"

    def __post_init__(self):
        if self.levels < 1 or self.hypotheses < 1:
            raise ValueError("levels and hypotheses must be >= 1")


# an estimator maps (current image, virtual image, virtual depth, intrinsics)
# to a hypothesis set whose mean is the pose increment
EstimatorFn = Callable[..., HypothesisSet]


def _level_rng(cfg: TrackerConfig, frame_index: int, level: int) -> np.random.Generator:
    ss = np.random.SeedSequence(entropy=cfg.seed, spawn_key=(frame_index, level))
    return np.random.default_rng(ss)


class PhotometricGNEstimator:
    """Direct photometric alignment by Gauss-Newton, N perturbed instances.

    Minimizes the sum of squared intensity differences between the current
    image sampled at the projected virtual-keyframe points and the virtual
    keyframe itself. Each of the N instances starts from a deterministically
    seeded perturbation of the guess; the per-instance solutions are the
    pose hypotheses. Residuals beyond 3x the median absolute deviation are
    down-weighted to zero each iteration, and steps are halved until the
    mean squared residual does not increase.
    """

    def __init__(self, cfg: TrackerConfig):
        self.cfg = cfg

    def __call__(self, i_c: Image, i_v: Image, d_v: InverseDepthMap,
                 K: CameraIntrinsics,
                 rng: Optional[np.random.Generator] = None) -> HypothesisSet:
        cfg = self.cfg
        if rng is None:
            rng = np.random.default_rng(cfg.seed)
        if (i_c.height, i_c.width) != (i_v.height, i_v.width):
            raise ValueError("current and virtual images must share resolution")

        gray_c = i_c.to_gray().values
        gray_v = i_v.to_gray().values
        mask = d_v.valid
        xs, ys = pixel_grid(d_v.width, d_v.height)
        pts_v = backproject(K, xs[mask], ys[mask], d_v.values[mask])
        ref_int = gray_v[mask]
        n_px = pts_v.shape[0]

        # overlap check at the unperturbed state (identity increment)
        ident_valid = self._residual_state(np.eye(3)[None], np.zeros((1, 3)),
                                           pts_v, gray_c, K)[3]
        if int(ident_valid.sum()) < cfg.min_valid_pixels:
            raise InsufficientOverlap(
                f"{int(ident_valid.sum())} valid residual pixels "
                f"(need {cfg.min_valid_pixels})")

        B = cfg.hypotheses
        rot_std = math.radians(cfg.init_rot_std_deg)
        init = np.zeros((B, 6))
        if B > 1:
            # N = 1 is the no-hypothesis ablation: a single unperturbed run
            init[:, :3] = rng.standard_normal((B, 3)) * rot_std
            init[:, 3:] = rng.standard_normal((B, 3)) * cfg.init_trans_std_m

        # state per hypothesis: M maps virtual-cam -> current-cam coordinates,
        # i.e. M = A^-1 for the increment A with T_cur = T_virtual * A
        m_rot = np.empty((B, 3, 3))
        m_t = np.empty((B, 3))
        for b in range(B):
            m = inverse(exp_twist(Twist.from_vector(init[b])))
            m_rot[b] = m.rotation
            m_t[b] = m.translation

        active = np.ones(B, dtype=bool)
        lam = np.zeros(B)  # per-hypothesis Levenberg damping
        res, jac, cost, valid = self._linearize(m_rot, m_t, pts_v, ref_int,
                                                gray_c, K)
        self._last_iteration_costs = [cost.copy()]
        for _ in range(cfg.gn_max_iterations):
            if not active.any():
                break
            w = self._robust_weights(res, valid)
            h_mat = np.einsum("bni,bn,bnj->bij", jac, w, jac)
            g_vec = -np.einsum("bni,bn,bn->bi", jac, w, res)
            h_damped = h_mat + lam[:, None, None] * np.eye(6)
            delta = self._solve(h_damped, g_vec)

            stepped = np.zeros(B, dtype=bool)
            scale = np.ones(B)
            for attempt in range(4):
                trial = active & ~stepped
                if not trial.any():
                    break
                tr_rot, tr_t = self._apply_step(m_rot, m_t, delta, scale, trial)
                n_cost = self._residual_cost(tr_rot[trial], tr_t[trial], pts_v,
                                             ref_int, gray_c, K)
                ok = n_cost <= cost[trial] + 1e-15
                idx = np.flatnonzero(trial)[ok]
                m_rot[idx] = tr_rot[idx]
                m_t[idx] = tr_t[idx]
                cost[idx] = n_cost[ok]
                stepped[idx] = True
                scale[trial & ~stepped] *= 0.5
            # successful hypotheses relax their damping; stalled ones raise it
            # and retry next iteration instead of freezing at a bad state
            failed = active & ~stepped
            trace = np.trace(h_mat, axis1=1, axis2=2) / 6.0
            lam[failed] = np.maximum(lam[failed] * 10.0, 1e-4 * trace[failed] + 1e-12)
            lam[stepped] *= 0.25
            step_norm = np.where(stepped, np.linalg.norm(delta, axis=1) * scale,
                                 np.inf)
            active = active & (step_norm >= cfg.gn_update_tol)
            if stepped.any():
                n_res, n_jac, _, n_valid = self._linearize(
                    m_rot[stepped], m_t[stepped], pts_v, ref_int, gray_c, K)
                res[stepped] = n_res
                jac[stepped] = n_jac
                valid[stepped] = n_valid
            self._last_iteration_costs.append(cost.copy())

        samples = []
        for b in range(B):
            m = Pose.orthonormalized(m_rot[b], m_t[b])
            samples.append(log_pose(inverse(m)))
        hyp = aggregate_hypotheses(samples)
        self._last_cost = cost
        self._last_valid_counts = valid.sum(axis=1)
        return hyp

    # -- internals ------------------------------------------------------------

    @staticmethod
    def _residual_state(m_rot, m_t, pts_v, gray_c, K):
        q = np.einsum("bij,nj->bni", m_rot, pts_v) + m_t[:, None, :]
        z = q[..., 2]
        front = z > MIN_FORWARD_Z
        zs = np.where(front, z, 1.0)
        u = K.fx * q[..., 0] / zs + K.cx
        v = K.fy * q[..., 1] / zs + K.cy
        ic, gx, gy, inside = sample_bilinear_grad(gray_c, u, v)
        return q, (ic, gx, gy), zs, front & inside

    def _linearize(self, m_rot, m_t, pts_v, ref_int, gray_c, K):
        q, (ic, gx, gy), zs, ok = self._residual_state(m_rot, m_t, pts_v,
                                                       gray_c, K)
        res = np.where(ok, ic - ref_int[None], 0.0)
        a0 = gx * K.fx / zs
        a1 = gy * K.fy / zs
        a2 = -(gx * K.fx * q[..., 0] + gy * K.fy * q[..., 1]) / (zs * zs)
        a = np.stack([a0, a1, a2], axis=-1)
        a = np.where(ok[..., None], a, 0.0)
        jac = np.concatenate([np.cross(a, q), -a], axis=-1)
        counts = np.maximum(ok.sum(axis=1), 1)
        cost = (res * res).sum(axis=1) / counts
        return res, jac, cost, ok

    @staticmethod
    def _residual_cost(m_rot, m_t, pts_v, ref_int, gray_c, K):
        # mean squared residual only (line-search probe, no jacobian)
        q = np.einsum("bij,nj->bni", m_rot, pts_v) + m_t[:, None, :]
        z = q[..., 2]
        front = z > MIN_FORWARD_Z
        zs = np.where(front, z, 1.0)
        u = K.fx * q[..., 0] / zs + K.cx
        v = K.fy * q[..., 1] / zs + K.cy
        ic, inside = sample_bilinear(gray_c, u, v)
        ok = front & inside
        res = np.where(ok, ic - ref_int[None], 0.0)
        counts = np.maximum(ok.sum(axis=1), 1)
        return (res * res).sum(axis=1) / counts

    @staticmethod
    def _robust_weights(res, valid):
        w = valid.astype(np.float64)
        for b in range(res.shape[0]):
            r = res[b][valid[b]]
            if r.size < 8:
                continue
            med = np.median(r)
            mad = np.median(np.abs(r - med))
            if mad > 0:
                out = np.abs(res[b] - med) > 3.0 * mad
                w[b] = np.where(out, 0.0, w[b])
        return w

    def _solve(self, h_mat, g_vec):
        conds = np.empty(h_mat.shape[0])
        for b in range(h_mat.shape[0]):
            try:
                conds[b] = np.linalg.cond(h_mat[b])
            except np.linalg.LinAlgError:
                conds[b] = np.inf
        bad = ~np.isfinite(conds) | (conds > self.cfg.condition_limit)
        if bad.any():
            damped = h_mat.copy()
            lam = np.maximum(np.trace(h_mat[bad], axis1=1, axis2=2) / 6.0
                             * 1e-6, 1e-10)
            damped[bad] += lam[:, None, None] * np.eye(6)
            h_mat = damped
        try:
            return np.linalg.solve(h_mat, g_vec[..., None])[..., 0]
        except np.linalg.LinAlgError as exc:
            raise SingularNormalEquations(str(exc)) from exc

    @staticmethod
    def _apply_step(m_rot, m_t, delta, scale, trial):
        tr_rot = m_rot.copy()
        tr_t = m_t.copy()
        for b in np.flatnonzero(trial):
            step = exp_twist(Twist.from_vector(-delta[b] * scale[b]))
            tr_rot[b] = step.rotation @ m_rot[b]
            tr_t[b] = step.rotation @ m_t[b] + step.translation
        return tr_rot, tr_t


ESTIMATORS = {
    "photometric-gn": PhotometricGNEstimator,
}


def make_estimator(cfg: TrackerConfig) -> EstimatorFn:
    try:
        return ESTIMATORS[cfg.estimator](cfg)
    except KeyError:
        raise ValueError(f"unknown estimator {cfg.estimator!r}") from None


@dataclass
class LevelDiagnostics:
    level: int
    residual_rms: float
    covariance_trace: float
    valid_pixels: int
    failed: bool = False


@dataclass
class TrackFrameResult:
    pose: Pose
    hypothesis_sets: List[Optional[HypothesisSet]]
    diagnostics: List[LevelDiagnostics] = field(default_factory=list)


def track_frame(kf: Keyframe, i_c: Image, guess: Pose, cfg: TrackerConfig,
                estimator: Optional[EstimatorFn] = None,
                frame_index: int = 0) -> TrackFrameResult:
    """Coarse-to-fine pose refinement of ``guess`` against the keyframe.

    Per level (coarsest first): render the virtual keyframe at the current
    guess and at the level resolution, estimate the increment, compose it
    onto the guess. Levels that fail (degenerate view or too little
    overlap) are skipped; if every level fails, TrackingLost is raised.
    """
    if estimator is None:
        estimator = make_estimator(cfg)
    img_pyr = build_pyramid(i_c, cfg.levels)
    kf_pyr = build_pyramid(kf.image, cfg.levels)
    depth_pyr = downsample_inverse_depth(kf.inv_depth, cfg.levels)

    pose = guess
    hyp_sets: List[Optional[HypothesisSet]] = [None] * cfg.levels
    diags: List[LevelDiagnostics] = []
    any_ok = False
    for level in range(cfg.levels - 1, -1, -1):
        k_level = kf.intrinsics.scaled(0.5 ** level)
        kf_level = Keyframe(kf_pyr[level], depth_pyr[level], kf.pose,
                            k_level, kf.id)
        rng = _level_rng(cfg, frame_index, level)
        try:
            i_v, d_v = render_virtual_keyframe(kf_level, pose)
            hyp = estimator(img_pyr[level], i_v, d_v, k_level, rng=rng)
        except (DegenerateView, InsufficientOverlap):
            diags.append(LevelDiagnostics(level, math.nan, math.nan, 0, True))
            continue
        hyp_sets[level] = hyp
        pose = apply_increment(pose, hyp.mean)
        any_ok = True
        rms = math.nan
        n_valid = 0
        if isinstance(estimator, PhotometricGNEstimator):
            rms = float(np.sqrt(np.mean(estimator._last_cost)))
            n_valid = int(np.min(estimator._last_valid_counts))
        diags.append(LevelDiagnostics(level, rms,
                                      float(np.trace(hyp.covariance)), n_valid))
    if not any_ok:
        raise TrackingLost("all pyramid levels failed")
    return TrackFrameResult(pose, hyp_sets, diags)


@dataclass
class TrackResult:
    trajectory: List[Tuple[float, Pose]]
    keyframe_ids: List[int]
    diagnostics: List[dict] = field(default_factory=list)


def track_sequence(frames: Sequence[Tuple[float, Image]], initial_kf: Keyframe,
                   cfg: TrackerConfig,
                   depth_source: Optional[Callable[[int], InverseDepthMap]] = None,
                   estimator: Optional[EstimatorFn] = None) -> TrackResult:
    """Track every frame against the active keyframe.

    The guess for each frame is the previously tracked pose. A new keyframe
    is generated from the current frame whenever the relative rotation or
    translation to the active keyframe exceeds the configured thresholds;
    its depth comes from ``depth_source(frame_index)``. TrackingLost aborts
    with the partial trajectory attached to the exception.
    """
    frames = list(frames)
    if len(frames) < 2:
        raise ValueError("need at least two frames")
    if estimator is None:
        estimator = make_estimator(cfg)

    kf = initial_kf
    trajectory: List[Tuple[float, Pose]] = [(frames[0][0], kf.pose)]
    keyframe_ids = [kf.id]
    diagnostics: List[dict] = []
    prev_pose = kf.pose

    for i in range(1, len(frames)):
        t, image = frames[i]
        try:
            result = track_frame(kf, image, prev_pose, cfg, estimator,
                                 frame_index=i)
        except TrackingLost as exc:
            raise TrackingLost(f"tracking lost at frame {i}",
                               partial_trajectory=trajectory,
                               partial_keyframes=keyframe_ids) from exc
        pose = result.pose
        trajectory.append((t, pose))
        for d in result.diagnostics:
            diagnostics.append({
                "frame": i, "level": d.level, "residual_rms": d.residual_rms,
                "covariance_trace": d.covariance_trace,
                "keyframe": kf.id, "failed": d.failed,
            })
        if should_switch_keyframe(kf.pose, pose, cfg.rot_switch_deg,
                                  cfg.trans_switch_m):
            if depth_source is None:
                raise TrackingLost(
                    f"keyframe switch needed at frame {i} but no depth source",
                    partial_trajectory=trajectory,
                    partial_keyframes=keyframe_ids)
            depth = depth_source(i)
            kf = Keyframe(image, depth, pose, initial_kf.intrinsics, id=i)
            keyframe_ids.append(i)
        prev_pose = pose
    return TrackResult(trajectory, keyframe_ids, diagnostics)
