"""Depth extraction from cost volumes.

Classic extraction stands in for the learned estimators: winner-take-all,
a differentiable soft argmin, semi-global aggregation, and an iterative
narrow-band refinement loop (band-restricted WTA + 3x3 median filter,
clamped to the band). The extractor is pluggable via ExtractionConfig so a
learned module can replace the classic path later.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np

from .costvolume import (CostVolume, LabelSet, accumulate_cost_volume,
                         narrow_band_labels)
from .errors import LabelMismatch
from .imaging import Image, InverseDepthMap
from .keyframe import Keyframe

# canonical direction list; the first 8 are the axis/diagonal neighbors,
# the remaining 8 are knight moves, together the default 16-direction set
SGM_DIRECTIONS = (
    (1, 0), (-1, 0), (0, 1), (0, -1),
    (1, 1), (-1, -1), (1, -1), (-1, 1),
    (2, 1), (-2, -1), (1, 2), (-1, -2),
    (2, -1), (-2, 1), (1, -2), (-1, 2),
)


@dataclass(frozen=True)
class ExtractionConfig:
    """How to pull a depth map out of a cost volume."""

    method: str = "wta"              # wta | soft-argmin | sgm+wta
    p1: float = 0.1                  # SGM penalty for a one-label jump
    p2: float = 0.5                  # SGM penalty for larger jumps
    directions: int = 16
    median_filter: bool = True
    temperature: float = 1.0

    def __post_init__(self):
        if not (0.0 <= self.p1 <= self.p2):
            raise ValueError("need 0 <= P1 <= P2")
        if not (1 <= self.directions <= len(SGM_DIRECTIONS)):
            raise ValueError(f"directions must be in [1, {len(SGM_DIRECTIONS)}]")
        if self.method not in ("wta", "soft-argmin", "sgm+wta"):
            raise ValueError(f"unknown extraction method {self.method!r}")


def winner_take_all(vol: CostVolume) -> InverseDepthMap:
    """Per-pixel label of minimal cost; ties break toward the lowest index."""
    idx = np.argmin(vol.costs, axis=0)
    lab, lab_valid = vol.labels.per_pixel(vol.height, vol.width)
    values = np.take_along_axis(lab, idx[None], axis=0)[0]
    return InverseDepthMap(values, vol.valid & lab_valid)


def interp_factor_to_depth(s: np.ndarray, d_min: float, d_max: float,
                           valid: Optional[np.ndarray] = None) -> InverseDepthMap:
    """Affine map from an interpolation factor in [0, 1] to inverse depth.

    D = (1 - s) * d_min + s * d_max, with s clamped to [0, 1].
    """
    s = np.clip(np.asarray(s, dtype=np.float64), 0.0, 1.0)
    values = (1.0 - s) * d_min + s * d_max
    if valid is None:
        valid = np.ones(values.shape, dtype=bool)
    return InverseDepthMap(values, valid)


def soft_argmin(vol: CostVolume, temperature: float = 1.0,
                return_grad: bool = False):
    """Expectation of labels under softmax(-C / temperature).

    Differentiable alternative to WTA. With ``return_grad`` the analytic
    derivative of the per-pixel depth with respect to every cost entry is
    returned as a second (N, h, w) array:
        dD/dC_j = -(1/T) * p_j * (b_j - D).
    """
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    lab, lab_valid = vol.labels.per_pixel(vol.height, vol.width)
    logits = -vol.costs / temperature
    logits = logits - logits.max(axis=0, keepdims=True)
    p = np.exp(logits)
    p /= p.sum(axis=0, keepdims=True)
    values = (lab * p).sum(axis=0)
    out = InverseDepthMap(values, vol.valid & lab_valid)
    if not return_grad:
        return out
    grad = -(p * (lab - values[None])) / temperature
    return out, grad


def _shift_from(arr: np.ndarray, dx: int, dy: int, fill: float):
    """arr sampled at the predecessor pixel (x - dx, y - dy); edges get fill."""
    out = np.full_like(arr, fill)
    h, w = arr.shape[-2], arr.shape[-1]
    ys_dst = slice(max(0, dy), h + min(0, dy))
    xs_dst = slice(max(0, dx), w + min(0, dx))
    ys_src = slice(max(0, -dy), h + min(0, -dy))
    xs_src = slice(max(0, -dx), w + min(0, -dx))
    out[..., ys_dst, xs_dst] = arr[..., ys_src, xs_src]
    return out


def _sgm_single_direction(costs: np.ndarray, dx: int, dy: int,
                          p1: float, p2: float) -> np.ndarray:
    """Directional DP pass: L(x,d) = C + min(L_prev(d), L_prev(d+-1)+P1,
    min_k L_prev(k)+P2) - min_k L_prev(k)."""
    n, h, w = costs.shape
    big = np.inf
    out = np.empty_like(costs)

    if dy == 0:
        # horizontal: sequential in x, vectorized over rows
        rng = range(w) if dx > 0 else range(w - 1, -1, -1)
        for step, xi in enumerate(rng):
            if step == 0:
                out[:, :, xi] = costs[:, :, xi]
                continue
            prev = out[:, :, xi - dx]                       # (n, h)
            prev_min = prev.min(axis=0)                     # (h,)
            up = np.vstack([np.full((1, h), big), prev[:-1]])
            dn = np.vstack([prev[1:], np.full((1, h), big)])
            m = np.minimum(np.minimum(prev, prev_min[None] + p2),
                           np.minimum(up, dn) + p1)
            out[:, :, xi] = costs[:, :, xi] + m - prev_min[None]
        return out

    # dy != 0: sequential in y (rows |dy| apart are independent),
    # vectorized over columns with an x-shift for the predecessor
    rng = range(h) if dy > 0 else range(h - 1, -1, -1)
    for yi in rng:
        yp = yi - dy
        if yp < 0 or yp >= h:
            out[:, yi, :] = costs[:, yi, :]
            continue
        prev = _shift_from(out[:, yp, :], dx, 0, big)       # (n, w)
        has_prev = np.isfinite(prev).any(axis=0)            # (w,)
        prev_min = np.where(has_prev, prev.min(axis=0), 0.0)
        up = np.vstack([np.full((1, w), big), prev[:-1]])
        dn = np.vstack([prev[1:], np.full((1, w), big)])
        m = np.minimum(np.minimum(prev, prev_min[None] + p2),
                       np.minimum(up, dn) + p1)
        path = costs[:, yi, :] + m - prev_min[None]
        out[:, yi, :] = np.where(has_prev[None], path, costs[:, yi, :])
    return out


def sgm_aggregate(vol: CostVolume, cfg: ExtractionConfig) -> CostVolume:
    """Semi-global aggregation over the configured direction set.

    Requires a fixed-band volume (labels shared across pixels). Costs at
    unobserved pixels are treated as zero along the paths; the output keeps
    the input observation counts.
    """
    if vol.labels.kind != "fixed":
        raise LabelMismatch("SGM needs a fixed-band volume with shared labels")
    costs = np.where(vol.valid[None], vol.costs, 0.0)
    total = np.zeros_like(costs)
    for dx, dy in SGM_DIRECTIONS[:cfg.directions]:
        total += _sgm_single_direction(costs, dx, dy, cfg.p1, cfg.p2)
    return CostVolume(total, vol.count.copy(), vol.labels)


def median_filter_depth(d: InverseDepthMap) -> InverseDepthMap:
    """3x3 median over valid neighbors; invalid pixels stay invalid."""
    h, w = d.values.shape
    stack = np.full((9, h, w), np.nan)
    k = 0
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            ys_dst = slice(max(0, dy), h + min(0, dy))
            xs_dst = slice(max(0, dx), w + min(0, dx))
            ys_src = slice(max(0, -dy), h + min(0, -dy))
            xs_src = slice(max(0, -dx), w + min(0, -dx))
            layer = np.full((h, w), np.nan)
            src_vals = np.where(d.valid, d.values, np.nan)
            layer[ys_dst, xs_dst] = src_vals[ys_src, xs_src]
            stack[k] = layer
            k += 1
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        med = np.nanmedian(stack, axis=0)
    values = np.where(d.valid & np.isfinite(med), med, d.values)
    return InverseDepthMap(values, d.valid)


def extract_depth(vol: CostVolume, cfg: ExtractionConfig) -> InverseDepthMap:
    """Dispatch on the configured extraction method."""
    if cfg.method == "sgm+wta":
        out = winner_take_all(sgm_aggregate(vol, cfg))
    elif cfg.method == "soft-argmin":
        out = soft_argmin(vol, cfg.temperature)
    else:
        out = winner_take_all(vol)
    if cfg.median_filter:
        out = median_filter_depth(out)
    return out


def narrow_band_refine(kf: Keyframe, frames: Sequence[Tuple[Image, Pose]],
                       d_init: InverseDepthMap, iterations: int,
                       sigma_nb: float = 0.0125, n_labels: int = 32,
                       alpha_conf: float = 50.0,
                       median_filter: bool = True,
                       relax: float = 0.5) -> InverseDepthMap:
    """Iterative narrow-band depth refinement.

    Per iteration: build per-pixel labels around the current estimate,
    accumulate a narrow-band cost volume, take the band-restricted WTA,
    then regularize: 3x3 median filter, clamp back into the pixel's band,
    and under-relax toward the previous estimate by ``relax``. The
    relaxation plays the role of the dedicated refinement stage that blends
    the raw band measurement with the running estimate; it damps label
    flicker between iterations and spreads large corrections over a few
    iterations instead of one. One iteration never moves an estimate by
    more than (N/2)*sigma_nb*d (band containment). Pixels whose band
    collapses, that no frame observes, or whose cost curve is flat
    (uninformative) keep their previous value.
    """
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    if not (0.0 < relax <= 1.0):
        raise ValueError("relax must be in (0, 1]")
    current = d_init
    for _ in range(iterations):
        labels = narrow_band_labels(current, sigma_nb, n_labels)
        vol = accumulate_cost_volume(kf, frames, labels, alpha_conf)
        est = winner_take_all(vol)
        # a flat cost curve carries no depth information (e.g. only the
        # keyframe itself observed the pixel); freeze those pixels too
        informative = (vol.costs.max(axis=0) - vol.costs.min(axis=0)) > 0.0
        if median_filter:
            est = median_filter_depth(est)
        lo = current.values * (1.0 - sigma_nb * (n_labels // 2))
        hi = current.values * (1.0 + sigma_nb * ((n_labels - 2) // 2))
        clamped = np.clip(est.values, lo, hi)
        blended = current.values + relax * (clamped - current.values)
        updated = est.valid & current.valid & informative
        values = np.where(updated, blended, current.values)
        current = InverseDepthMap(values, current.valid)
    return current
