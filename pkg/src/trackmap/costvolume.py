"""Plane-sweep photoconsistency accumulation.

Depth labels are inverse depths (1/m). A cost volume stores, per pixel and
label, the accumulated patch-SAD photoconsistency weighted by a per-frame
matching confidence. A frame contributes at a pixel only when it yields a
valid cost at every label there (full cost curve), so the confidence
formula always sees N labels and the per-pixel observation count applies
uniformly across labels.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np

from .errors import EmptyFrameList, InvalidRange
from .geometry import Pose, relative_transform
from .imaging import CameraIntrinsics, Image, InverseDepthMap, warp_image
from .keyframe import Keyframe

DEFAULT_ALPHA_CONF = 50.0
MIN_PATCH_VALID = 5


@dataclass(frozen=True)
class LabelSet:
    """Depth labels: shared fixed band or per-pixel narrow band.

    fixed band:   labels shape (N,), evenly spaced over [d_min, d_max]
    narrow band:  labels shape (N, h, w) centered at the previous depth
                  estimate, with a per-pixel validity mask
    """

    kind: str
    labels: np.ndarray
    valid: Optional[np.ndarray] = None
    d_min: Optional[float] = None
    d_max: Optional[float] = None
    sigma_nb: Optional[float] = None

    @property
    def count(self) -> int:
        return self.labels.shape[0]

    def per_pixel(self, height: int, width: int) -> Tuple[np.ndarray, np.ndarray]:
        """Labels broadcast to (N, h, w) plus the per-pixel validity mask."""
        if self.kind == "fixed":
            lab = np.broadcast_to(self.labels[:, None, None],
                                  (self.count, height, width))
            return lab, np.ones((height, width), dtype=bool)
        if self.labels.shape[1:] != (height, width):
            raise ValueError("narrow-band label set has mismatched resolution")
        return self.labels, self.valid


def fixed_band_labels(d_min: float, d_max: float, n: int) -> LabelSet:
    """N evenly spaced inverse-depth labels with exact endpoints."""
    if not (0.0 < d_min < d_max) or n < 2:
        raise InvalidRange(f"need 0 < d_min < d_max and N >= 2, got "
                           f"({d_min}, {d_max}, {n})")
    labels = np.linspace(d_min, d_max, n)
    return LabelSet("fixed", labels, d_min=float(d_min), d_max=float(d_max))


def narrow_band_labels(prev: InverseDepthMap, sigma_nb: float = 0.0125,
                       n: int = 32) -> LabelSet:
    """Per-pixel labels b_i = d_prev * (1 + i * sigma_nb), i = -N/2 .. (N-2)/2.

    Pixels with invalid previous depth or any non-positive label are masked.
    """
    if sigma_nb < 0:
        raise InvalidRange("sigma_nb must be non-negative")
    if n < 2 or n % 2:
        raise InvalidRange("narrow band needs an even N >= 2")
    idx = np.arange(-(n // 2), (n - 2) // 2 + 1, dtype=np.float64)
    labels = prev.values[None, :, :] * (1.0 + sigma_nb * idx[:, None, None])
    valid = prev.valid & np.all(labels > 0.0, axis=0)
    labels = np.where(valid[None], labels, 0.0)
    return LabelSet("narrow", labels, valid=valid, sigma_nb=float(sigma_nb))


def _patch_sums(diff: np.ndarray, valid: np.ndarray):
    """3x3 clamp-to-edge sums of |diff| and of the validity mask."""
    h, w = diff.shape
    pad_d = np.pad(np.where(valid, diff, 0.0), 1, mode="edge")
    pad_m = np.pad(valid.astype(np.float64), 1, mode="edge")
    s = np.zeros((h, w))
    c = np.zeros((h, w))
    for dy in range(3):
        for dx in range(3):
            s += pad_d[dy:dy + h, dx:dx + w]
            c += pad_m[dy:dy + h, dx:dx + w]
    return s, c


def sad_cost_map(ref: Image, warped: Image, mask: np.ndarray):
    """Mean absolute difference over 3x3 patches, restricted to ``mask``.

    Border patches clamp their coordinates to the edge. A pixel's cost is
    invalid when fewer than 5 of its 9 patch entries are valid. Returns
    (costs, cost_valid).
    """
    diff = np.abs(ref.to_gray().values - warped.to_gray().values)
    s, c = _patch_sums(diff, mask)
    ok = c >= MIN_PATCH_VALID
    costs = np.where(ok, s / np.maximum(c, 1.0), 0.0)
    return costs, ok


def sad_patch_cost(ref: Image, warped: Image, mask: np.ndarray,
                   x: int, y: int) -> Tuple[float, bool]:
    """Patch cost at a single pixel; see sad_cost_map."""
    costs, ok = sad_cost_map(ref, warped, np.asarray(mask, dtype=bool))
    return float(costs[y, x]), bool(ok[y, x])


def confidence_weight(costs_over_labels: np.ndarray,
                      alpha_conf: float = DEFAULT_ALPHA_CONF) -> float:
    """Matching confidence from a full cost curve over N labels.

    w = 1 - (1/(N-1)) * sum_{d != d*} exp(-alpha * (rho(d) - rho(d*))^2)
    with d* the argmin (ties break toward the lowest label index). Close
    to 1 for a unique sharp minimum, 0 for a flat curve.
    """
    costs = np.asarray(costs_over_labels, dtype=np.float64)
    if costs.ndim != 1 or costs.size < 2:
        raise ValueError("need a 1-D cost curve with N >= 2")
    best = costs[np.argmin(costs)]
    expo = np.exp(-alpha_conf * (costs - best) ** 2)
    return float(1.0 - (expo.sum() - 1.0) / (costs.size - 1))


def _confidence_map(costs: np.ndarray, alpha_conf: float) -> np.ndarray:
    # costs: (N, h, w); vectorized form of confidence_weight
    best = costs.min(axis=0)
    expo = np.exp(-alpha_conf * (costs - best[None]) ** 2)
    n = costs.shape[0]
    return 1.0 - (expo.sum(axis=0) - 1.0) / (n - 1)


@dataclass(frozen=True)
class CostVolume:
    """Accumulated photoconsistency costs C(x, d) with observation counts."""

    costs: np.ndarray        # (N, h, w)
    count: np.ndarray        # (h, w) frames contributing per pixel
    labels: LabelSet

    @property
    def num_labels(self) -> int:
        return self.costs.shape[0]

    @property
    def height(self) -> int:
        return self.costs.shape[1]

    @property
    def width(self) -> int:
        return self.costs.shape[2]

    @property
    def valid(self) -> np.ndarray:
        return self.count > 0


def accumulate_cost_volume(kf: Keyframe, frames: Sequence[Tuple[Image, Pose]],
                           labels: LabelSet,
                           alpha_conf: float = DEFAULT_ALPHA_CONF,
                           use_color: bool = False) -> CostVolume:
    """Accumulate C(x, d) = sum_i rho_i(x, d) * w_i(x) over frames.

    Each frame is warped onto the keyframe once per label using the
    relative transform from keyframe camera to frame camera. A frame
    contributes at a pixel only if every label produced a valid warp and
    patch cost there (full cost curve) and its matching confidence is
    positive; a frame at the keyframe's own pose has an exactly flat curve
    (w = 0) and therefore adds neither cost nor observation. The per-pixel
    count records how many frames contributed.
    """
    if len(frames) == 0:
        raise EmptyFrameList("cost accumulation needs at least one frame")
    h, w = kf.inv_depth.height, kf.inv_depth.width
    ref = kf.image if use_color else kf.image.to_gray()
    lab, lab_valid = labels.per_pixel(h, w)
    n = labels.count

    total = np.zeros((n, h, w))
    count = np.zeros((h, w), dtype=np.int64)
    for img, pose in frames:
        rel = relative_transform(kf.pose, pose)
        src = img if use_color else img.to_gray()
        rho = np.zeros((n, h, w))
        ok_all = lab_valid.copy()
        for j in range(n):
            d = lab[j] if labels.kind == "narrow" else float(labels.labels[j])
            warped, warp_ok = warp_image(src, rel, d, kf.intrinsics)
            if use_color:
                diff = np.abs(ref.values - warped.values).mean(axis=2)
                s, c = _patch_sums(diff, warp_ok)
                cost_ok = c >= MIN_PATCH_VALID
                costs = np.where(cost_ok, s / np.maximum(c, 1.0), 0.0)
            else:
                costs, cost_ok = sad_cost_map(ref, warped, warp_ok)
            rho[j] = costs
            ok_all &= cost_ok
        if not ok_all.any():
            continue
        wmap = _confidence_map(rho, alpha_conf)
        contrib_ok = ok_all & (wmap > 0.0)
        contrib = rho * wmap[None]
        total += np.where(contrib_ok[None], contrib, 0.0)
        count += contrib_ok
    return CostVolume(total, count, labels)


# -- debug dump format -------------------------------------------------------
# One JSON header line (width, height, num_labels, kind, label metadata),
# then raw little-endian float32 costs in label-major order (N*h*w values),
# then int32 observation counts (h*w), then for narrow-band volumes the
# float32 label array (N*h*w) and uint8 label validity (h*w).

def save_cost_volume(path, vol: CostVolume) -> None:
    header = {
        "width": vol.width, "height": vol.height, "num_labels": vol.num_labels,
        "kind": vol.labels.kind,
    }
    if vol.labels.kind == "fixed":
        header["d_min"] = vol.labels.d_min
        header["d_max"] = vol.labels.d_max
    else:
        header["sigma_nb"] = vol.labels.sigma_nb
    with open(path, "wb") as f:
        f.write((json.dumps(header, sort_keys=True) + "\n").encode("ascii"))
        f.write(vol.costs.astype("<f4").tobytes())
        f.write(vol.count.astype("<i4").tobytes())
        if vol.labels.kind == "narrow":
            f.write(vol.labels.labels.astype("<f4").tobytes())
            f.write(vol.labels.valid.astype(np.uint8).tobytes())


def load_cost_volume(path) -> CostVolume:
    with open(path, "rb") as f:
        header = json.loads(f.readline().decode("ascii"))
        n, h, w = header["num_labels"], header["height"], header["width"]
        costs = np.frombuffer(f.read(4 * n * h * w), "<f4").reshape(n, h, w).astype(np.float64)
        count = np.frombuffer(f.read(4 * h * w), "<i4").reshape(h, w).astype(np.int64)
        if header["kind"] == "fixed":
            labels = fixed_band_labels(header["d_min"], header["d_max"], n)
        else:
            lab = np.frombuffer(f.read(4 * n * h * w), "<f4").reshape(n, h, w).astype(np.float64)
            valid = np.frombuffer(f.read(h * w), np.uint8).reshape(h, w).astype(bool)
            labels = LabelSet("narrow", lab, valid=valid, sigma_nb=header["sigma_nb"])
    return CostVolume(costs, count, labels)
