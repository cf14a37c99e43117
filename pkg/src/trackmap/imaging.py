"""Images, inverse-depth maps, pyramids, bilinear sampling and warping.

Pixel coordinate convention: (x, y) with (0, 0) at the center of the
top-left pixel, x growing rightward (columns), y downward (rows).
Inverse depth is used everywhere internally (1/meters); metric depth only
appears at I/O boundaries.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Tuple, Union

import numpy as np

from .errors import IndivisibleResolution
from .geometry import Pose

MIN_FORWARD_Z = 1e-6

# luminance weights for color-to-gray conversion
_LUMA = np.array([0.299, 0.587, 0.114])


@dataclass(frozen=True)
class Image:
    """Intensity image, float values in [0, 1], grayscale (h, w) or color (h, w, 3)."""

    values: np.ndarray

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.float64)
        if vals.ndim not in (2, 3) or (vals.ndim == 3 and vals.shape[2] != 3):
            raise ValueError(f"image must be (h, w) or (h, w, 3), got {vals.shape}")
        vals = np.clip(vals, 0.0, 1.0)
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def channels(self) -> int:
        return 1 if self.values.ndim == 2 else 3

    def to_gray(self) -> "Image":
        if self.channels == 1:
            return self
        return Image(self.values @ _LUMA)


@dataclass(frozen=True)
class InverseDepthMap:
    """Per-pixel inverse depth (1/m) with a validity mask.

    Valid pixels are strictly positive and finite; the constructor masks
    out anything else so invalid entries can never leak into costs or
    metrics.
    """

    values: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.float64)
        mask = np.asarray(self.valid, dtype=bool)
        if vals.ndim != 2 or mask.shape != vals.shape:
            raise ValueError("inverse depth values and mask must share a 2-D shape")
        mask = mask & np.isfinite(vals) & (vals > 0.0)
        vals = np.where(mask, vals, 0.0)
        vals.setflags(write=False)
        mask.setflags(write=False)
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "valid", mask)

    @staticmethod
    def from_values(values) -> "InverseDepthMap":
        values = np.asarray(values, dtype=np.float64)
        return InverseDepthMap(values, np.ones(values.shape, dtype=bool))

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    def valid_fraction(self) -> float:
        return float(self.valid.mean())


@dataclass(frozen=True)
class FlowField:
    """Per-pixel 2-vector displacement in pixels, with validity mask."""

    vectors: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        vecs = np.asarray(self.vectors, dtype=np.float64)
        mask = np.asarray(self.valid, dtype=bool)
        if vecs.ndim != 3 or vecs.shape[2] != 2 or mask.shape != vecs.shape[:2]:
            raise ValueError("flow must be (h, w, 2) with an (h, w) mask")
        mask = mask & np.all(np.isfinite(vecs), axis=2)
        vecs = np.where(mask[..., None], vecs, 0.0)
        vecs.setflags(write=False)
        mask.setflags(write=False)
        object.__setattr__(self, "vectors", vecs)
        object.__setattr__(self, "valid", mask)

    @property
    def height(self) -> int:
        return self.vectors.shape[0]

    @property
    def width(self) -> int:
        return self.vectors.shape[1]


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole intrinsics: focal lengths and principal point in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    @staticmethod
    def simple(width: int, height: int, focal: float = None) -> "CameraIntrinsics":
        """Centered pinhole camera; default focal = 0.75 * width (~67 deg FOV)."""
        if focal is None:
            focal = 0.75 * width
        return CameraIntrinsics(focal, focal, (width - 1) / 2.0, (height - 1) / 2.0,
                                width, height)

    def scaled(self, factor: float) -> "CameraIntrinsics":
        """Intrinsics for a resolution scaled by ``factor`` (0.5 per pyramid level)."""
        return CameraIntrinsics(self.fx * factor, self.fy * factor,
                                self.cx * factor, self.cy * factor,
                                int(round(self.width * factor)),
                                int(round(self.height * factor)))

    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx],
                         [0.0, self.fy, self.cy],
                         [0.0, 0.0, 1.0]])


def pixel_grid(width: int, height: int) -> Tuple[np.ndarray, np.ndarray]:
    """Pixel-center coordinate arrays of shape (h, w)."""
    xs = np.arange(width, dtype=np.float64)
    ys = np.arange(height, dtype=np.float64)
    return np.meshgrid(xs, ys)


def backproject(K: CameraIntrinsics, x: np.ndarray, y: np.ndarray,
                inv_depth: np.ndarray) -> np.ndarray:
    """Camera-frame 3-D points (..., 3) for pixels (x, y) at inverse depth d."""
    z = 1.0 / inv_depth
    px = (x - K.cx) / K.fx * z
    py = (y - K.cy) / K.fy * z
    return np.stack([px, py, z], axis=-1)


def project(K: CameraIntrinsics, points: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Project camera-frame points; returns (u, v, z)."""
    z = points[..., 2]
    safe_z = np.where(np.abs(z) > 0, z, 1.0)
    u = K.fx * points[..., 0] / safe_z + K.cx
    v = K.fy * points[..., 1] / safe_z + K.cy
    return u, v, z


def _box_downsample(values: np.ndarray) -> np.ndarray:
    h, w = values.shape[:2]
    if values.ndim == 2:
        return values.reshape(h // 2, 2, w // 2, 2).mean(axis=(1, 3))
    return values.reshape(h // 2, 2, w // 2, 2, 3).mean(axis=(1, 3))


def build_pyramid(img: Image, levels: int = 3) -> List[Image]:
    """Pyramid by repeated 2x2 box averaging; index 0 is full resolution."""
    if levels < 1:
        raise ValueError("levels must be >= 1")
    div = 2 ** (levels - 1)
    if img.width % div or img.height % div:
        raise IndivisibleResolution(
            f"{img.width}x{img.height} not divisible by 2^{levels - 1}")
    out = [img]
    for _ in range(levels - 1):
        out.append(Image(_box_downsample(out[-1].values)))
    return out


def downsample_inverse_depth(d: InverseDepthMap, levels: int = 3) -> List[InverseDepthMap]:
    """Pyramid of inverse-depth maps; each 2x2 block averages its valid entries."""
    div = 2 ** (levels - 1)
    if d.width % div or d.height % div:
        raise IndivisibleResolution(
            f"{d.width}x{d.height} not divisible by 2^{levels - 1}")
    out = [d]
    for _ in range(levels - 1):
        prev = out[-1]
        h, w = prev.values.shape
        vals = prev.values.reshape(h // 2, 2, w // 2, 2)
        mask = prev.valid.reshape(h // 2, 2, w // 2, 2)
        count = mask.sum(axis=(1, 3))
        total = (vals * mask).sum(axis=(1, 3))
        ok = count > 0
        avg = np.where(ok, total / np.maximum(count, 1), 0.0)
        out.append(InverseDepthMap(avg, ok))
    return out


def _sample_prep(width, height, x, y):
    """Shared neighbor/weight computation for bilinear sampling.

    A sample is in bounds iff x in [0, width-1] and y in [0, height-1];
    when the fractional part is zero the right/bottom neighbor collapses
    onto the pixel itself, so exact border pixels stay valid.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    x0 = np.floor(x)
    y0 = np.floor(y)
    fx = x - x0
    fy = y - y0
    x1 = x0 + (fx > 0)
    y1 = y0 + (fy > 0)
    inside = (x0 >= 0) & (y0 >= 0) & (x1 <= width - 1) & (y1 <= height - 1)
    xi0 = np.clip(x0, 0, width - 1).astype(np.intp)
    yi0 = np.clip(y0, 0, height - 1).astype(np.intp)
    xi1 = np.clip(x1, 0, width - 1).astype(np.intp)
    yi1 = np.clip(y1, 0, height - 1).astype(np.intp)
    return xi0, yi0, xi1, yi1, fx, fy, inside


def sample_bilinear(values: np.ndarray, x, y) -> Tuple[np.ndarray, np.ndarray]:
    """Vectorized bilinear interpolation; returns (samples, in_bounds)."""
    h, w = values.shape[:2]
    xi0, yi0, xi1, yi1, fx, fy, inside = _sample_prep(w, h, x, y)
    v00 = values[yi0, xi0]
    v10 = values[yi0, xi1]
    v01 = values[yi1, xi0]
    v11 = values[yi1, xi1]
    if values.ndim == 3:
        fx = fx[..., None]
        fy = fy[..., None]
    top = v00 * (1 - fx) + v10 * fx
    bot = v01 * (1 - fx) + v11 * fx
    out = top * (1 - fy) + bot * fy
    return np.where(inside[..., None] if values.ndim == 3 else inside, out, 0.0), inside


def sample_bilinear_grad(values: np.ndarray, x, y):
    """Bilinear sample plus the analytic x/y derivatives of the interpolant.

    The derivatives are exact within each pixel cell, which makes residual
    Jacobians match finite differences to machine precision away from cell
    boundaries. At exact integer coordinates the derivative of the cell to
    the right/below is used (clamped at the last row/column), so gradients
    do not vanish on pixel-aligned samples.
    """
    h, w = values.shape
    xi0, yi0, xi1, yi1, fx, fy, inside = _sample_prep(w, h, x, y)
    v00 = values[yi0, xi0]
    v10 = values[yi0, xi1]
    v01 = values[yi1, xi0]
    v11 = values[yi1, xi1]
    val = (v00 * (1 - fx) + v10 * fx) * (1 - fy) + (v01 * (1 - fx) + v11 * fx) * fy
    xg = np.minimum(xi0 + 1, w - 1)
    yg = np.minimum(yi0 + 1, h - 1)
    g00 = values[yi0, xi0]
    g10 = values[yi0, xg]
    g01 = values[yg, xi0]
    g11 = values[yg, xg]
    gx = (g10 - g00) * (1 - fy) + (g11 - g01) * fy
    gy = (g01 - g00) * (1 - fx) + (g11 - g10) * fx
    zero = np.zeros_like(val)
    return (np.where(inside, val, 0.0), np.where(inside, gx, zero),
            np.where(inside, gy, zero), inside)


def bilinear_sample(img: Image, x: float, y: float) -> Tuple[float, bool]:
    """Scalar bilinear sample; the flag is False when a neighbor falls outside."""
    val, inside = sample_bilinear(img.values, np.float64(x), np.float64(y))
    return (val.item() if img.channels == 1 else val), bool(inside)


def _warp_coordinates(relative_pose: Pose, inv_depth, K: CameraIntrinsics,
                      valid=None):
    """Projected coordinates of every target pixel into the source camera.

    ``relative_pose`` maps target(reference)-camera coordinates to
    source-camera coordinates. Returns (u, v, mask) where mask excludes
    invalid depth and points behind the camera (z <= 1e-6).
    """
    x, y = pixel_grid(K.width, K.height)
    d = np.broadcast_to(np.asarray(inv_depth, dtype=np.float64), x.shape)
    ok = d > 0
    if valid is not None:
        ok = ok & valid
    d_safe = np.where(ok, d, 1.0)
    pts = backproject(K, x, y, d_safe)
    pts = pts @ relative_pose.rotation.T + relative_pose.translation
    u, v, z = project(K, pts)
    ok = ok & (z > MIN_FORWARD_Z)
    return u, v, ok


def warp_image(src: Image, relative_pose: Pose,
               inv_depth: Union[float, np.ndarray, InverseDepthMap],
               K: CameraIntrinsics) -> Tuple[Image, np.ndarray]:
    """Warp ``src`` onto the reference grid given per-pixel inverse depth.

    For each reference pixel: back-project at z = 1/d, transform by
    ``relative_pose`` (reference-camera to source-camera), project, and
    bilinearly sample ``src``. The mask is False where depth is invalid,
    the point lands behind the camera, or the projection leaves ``src``.
    """
    valid = None
    if isinstance(inv_depth, InverseDepthMap):
        valid = inv_depth.valid
        inv_depth = inv_depth.values
    u, v, ok = _warp_coordinates(relative_pose, inv_depth, K, valid)
    samples, inside = sample_bilinear(src.values, u, v)
    mask = ok & inside
    if src.channels == 3:
        samples = np.where(mask[..., None], samples, 0.0)
    else:
        samples = np.where(mask, samples, 0.0)
    return Image(samples), mask


def flow_from_depth(inv_depth: InverseDepthMap, relative_pose: Pose,
                    K: CameraIntrinsics) -> FlowField:
    """Per-pixel displacement (projected position - source position)."""
    u, v, ok = _warp_coordinates(relative_pose, inv_depth.values, K, inv_depth.valid)
    x, y = pixel_grid(K.width, K.height)
    vecs = np.stack([u - x, v - y], axis=-1)
    return FlowField(np.where(ok[..., None], vecs, 0.0), ok)
