"""Keyframes, virtual keyframe rendering, and the keyframe switch policy."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateView
from .geometry import Pose, relative_transform, rotation_angle
from .imaging import (CameraIntrinsics, Image, InverseDepthMap, MIN_FORWARD_Z,
                      backproject, pixel_grid, project, sample_bilinear)

# two splats closer than this along the ray are treated as the same surface
Z_TIE_TOLERANCE = 1e-4
MIN_COVERAGE_FRACTION = 0.01


@dataclass(frozen=True)
class Keyframe:
    """Reference frame: image, inverse depth, world-from-keyframe pose."""

    image: Image
    inv_depth: InverseDepthMap
    pose: Pose
    intrinsics: CameraIntrinsics
    id: int = 0

    def __post_init__(self):
        if (self.image.height, self.image.width) != (self.inv_depth.height,
                                                     self.inv_depth.width):
            raise ValueError("keyframe image and inverse depth must share dimensions")
        if not self.inv_depth.valid.any():
            raise ValueError("keyframe rejected: inverse depth has no valid pixels")


def render_virtual_keyframe(kf: Keyframe, guess: Pose):
    """Render the keyframe content from the viewpoint ``guess``.

    Geometry first: every valid keyframe pixel is forward-splatted into the
    virtual view with a z-buffer (nearest surface wins; ties within 1e-4 m
    resolve to the first splat in row-major source order), and one pass of
    1-pixel hole dilation fills isolated gaps from their valid 8-neighbors.
    The intensity is then resampled view-consistently: each virtual pixel
    back-projects through the splatted depth into the keyframe and
    bilinearly samples the keyframe image, so the virtual image is exact at
    pixel centers instead of jittered by splat rounding. Remaining holes
    are invalid in both outputs.

    Raises DegenerateView when less than 1% of the valid keyframe pixels
    land inside the virtual view.
    """
    K = kf.intrinsics
    h, w = kf.inv_depth.height, kf.inv_depth.width
    gray = kf.image.to_gray().values

    src_mask = kf.inv_depth.valid
    n_src = int(src_mask.sum())
    x, y = pixel_grid(w, h)
    d = kf.inv_depth.values[src_mask]
    pts_kf = backproject(K, x[src_mask], y[src_mask], d)
    rel = relative_transform(kf.pose, guess)  # keyframe-cam -> virtual-cam
    pts_v = pts_kf @ rel.rotation.T + rel.translation
    u, v, z = project(K, pts_v)

    ix = np.rint(u).astype(np.intp)
    iy = np.rint(v).astype(np.intp)
    ok = (z > MIN_FORWARD_Z) & (ix >= 0) & (ix < w) & (iy >= 0) & (iy < h)
    if int(ok.sum()) < max(1, int(math.ceil(MIN_COVERAGE_FRACTION * n_src))):
        raise DegenerateView(
            f"only {int(ok.sum())} of {n_src} keyframe pixels land in the virtual view")

    flat = iy[ok] * w + ix[ok]
    zs = z[ok]
    vals = gray[src_mask][ok]
    src_order = np.arange(zs.size)
    # quantized z so splats within the tie tolerance compare equal, then
    # deterministic tie-break on source order
    zq = np.floor(zs / Z_TIE_TOLERANCE).astype(np.int64)
    order = np.lexsort((src_order, zq, flat))
    flat_sorted = flat[order]
    first = np.ones(flat_sorted.size, dtype=bool)
    first[1:] = flat_sorted[1:] != flat_sorted[:-1]
    win = order[first]

    img_v = np.zeros(h * w)
    dep_v = np.zeros(h * w)
    filled = np.zeros(h * w, dtype=bool)
    img_v[flat[win]] = vals[win]
    dep_v[flat[win]] = 1.0 / zs[win]
    filled[flat[win]] = True

    img_v = img_v.reshape(h, w)
    dep_v = dep_v.reshape(h, w)
    filled = filled.reshape(h, w)

    # view-consistent intensity for directly splatted pixels: sample the
    # keyframe image at the back-projection of each virtual pixel center
    # through the splatted depth (dilated holes keep their neighbor mean,
    # since their depth is an extrapolation)
    rel_inv = relative_transform(guess, kf.pose)  # virtual-cam -> keyframe-cam
    dep_safe = np.where(filled, dep_v, 1.0)
    pts_back = backproject(K, x, y, dep_safe)
    pts_back = pts_back @ rel_inv.rotation.T + rel_inv.translation
    ub, vb, zb = project(K, pts_back)
    sampled, inside = sample_bilinear(gray, ub, vb)
    resampled = filled & inside & (zb > MIN_FORWARD_Z)
    img_v = np.where(resampled, sampled, img_v)

    img_v, dep_v, filled = _dilate_holes_once(img_v, dep_v, filled)
    return Image(np.clip(img_v, 0.0, 1.0)), InverseDepthMap(dep_v, filled)


def _dilate_holes_once(img, dep, filled):
    """Fill hole pixels from the mean of their valid 8-neighbors (one pass)."""
    h, w = filled.shape
    acc_i = np.zeros((h, w))
    acc_d = np.zeros((h, w))
    cnt = np.zeros((h, w))
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            if dx == 0 and dy == 0:
                continue
            ys = slice(max(0, dy), h + min(0, dy))
            xs = slice(max(0, dx), w + min(0, dx))
            ys_src = slice(max(0, -dy), h + min(0, -dy))
            xs_src = slice(max(0, -dx), w + min(0, -dx))
            m = filled[ys_src, xs_src]
            acc_i[ys, xs] += np.where(m, img[ys_src, xs_src], 0.0)
            acc_d[ys, xs] += np.where(m, dep[ys_src, xs_src], 0.0)
            cnt[ys, xs] += m
    hole = ~filled & (cnt > 0)
    img = np.where(hole, acc_i / np.maximum(cnt, 1), img)
    dep = np.where(hole, acc_d / np.maximum(cnt, 1), dep)
    return img, dep, filled | hole


def should_switch_keyframe(kf_pose: Pose, cur_pose: Pose,
                           rot_thresh_deg: float = 6.0,
                           trans_thresh_m: float = 0.15) -> bool:
    """True iff relative rotation or translation exceeds its threshold."""
    rel_rot = kf_pose.rotation.T @ cur_pose.rotation
    angle_deg = math.degrees(rotation_angle(rel_rot))
    dist = float(np.linalg.norm(cur_pose.translation - kf_pose.translation))
    return angle_deg > rot_thresh_deg or dist > trans_thresh_m
