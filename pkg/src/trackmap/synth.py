"""Deterministic synthetic scenes with exact ground truth.

Scenes are collections of textured rectangles (planes and box walls) with
analytic smooth textures, so rendering is exact at any resolution and
depth comes from closed-form ray-plane intersection. Camera poses are
world-from-camera with z forward, x right, y down.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np

from .errors import EmptyView
from .geometry import Pose, compose, exp_twist, inverse, log_pose, Twist
from .imaging import CameraIntrinsics, Image, InverseDepthMap, pixel_grid

MIN_RAY_T = 1e-6
MIN_VIEW_FRACTION = 0.5
_COVERAGE_GRID = (24, 18)


@dataclass(frozen=True)
class TexturedRect:
    """Finite textured rectangle: center, in-plane unit axes, half extents.

    The texture is an analytic sum of sinusoids in the local (u, v)
    coordinates, kept within [0, 1] by construction.
    """

    center: np.ndarray
    u_axis: np.ndarray
    v_axis: np.ndarray
    half_u: float
    half_v: float
    amplitudes: np.ndarray
    freq_u: np.ndarray
    freq_v: np.ndarray
    phases: np.ndarray

    @property
    def normal(self) -> np.ndarray:
        return np.cross(self.u_axis, self.v_axis)

    def intensity(self, u, v):
        phase = (np.multiply.outer(u, self.freq_u)
                 + np.multiply.outer(v, self.freq_v)) * (2.0 * math.pi) + self.phases
        return np.clip(0.5 + (np.sin(phase) * self.amplitudes).sum(axis=-1), 0.0, 1.0)


def _make_texture(rng: np.random.Generator, n_waves: int = 8,
                  freq_range=(0.25, 1.6), total_amp: float = 0.42):
    angles = rng.uniform(0.0, math.pi, n_waves)
    freqs = rng.uniform(freq_range[0], freq_range[1], n_waves)
    weights = rng.uniform(0.3, 1.0, n_waves)
    amps = weights / weights.sum() * total_amp
    return (amps, freqs * np.cos(angles), freqs * np.sin(angles),
            rng.uniform(0.0, 2.0 * math.pi, n_waves))


def make_rect(rng: np.random.Generator, center, u_axis, v_axis,
              half_u: float, half_v: float) -> TexturedRect:
    amps, fu, fv, ph = _make_texture(rng)
    return TexturedRect(np.asarray(center, dtype=np.float64),
                        np.asarray(u_axis, dtype=np.float64),
                        np.asarray(v_axis, dtype=np.float64),
                        float(half_u), float(half_v), amps, fu, fv, ph)


@dataclass(frozen=True)
class SyntheticScene:
    """Scene geometry, trajectory with timestamps, and camera intrinsics.

    Construction verifies that every trajectory pose keeps at least half
    of the image covered by scene geometry.
    """

    rects: Tuple[TexturedRect, ...]
    trajectory: Tuple[Tuple[float, Pose], ...]
    intrinsics: CameraIntrinsics

    def __post_init__(self):
        gw, gh = _COVERAGE_GRID
        probe = CameraIntrinsics.simple(gw, gh, focal=self.intrinsics.fx
                                        * gw / self.intrinsics.width)
        for t, pose in self.trajectory:
            _, depth = render_scene(self, pose, probe, allow_empty=True)
            if depth.valid_fraction() < MIN_VIEW_FRACTION:
                raise ValueError(
                    f"pose at t={t} keeps only {depth.valid_fraction():.0%} "
                    "of the view on the scene (needs >= 50%)")

    @property
    def poses(self) -> List[Pose]:
        return [p for _, p in self.trajectory]

    @property
    def timestamps(self) -> List[float]:
        return [t for t, _ in self.trajectory]


def _cast_rays(scene: SyntheticScene, pose: Pose, x: np.ndarray, y: np.ndarray,
               K: CameraIntrinsics):
    """Nearest hit per ray: (intensity, depth); depth inf where nothing hits."""
    # unnormalized camera rays with z = 1, so the ray parameter equals camera depth
    dirs_cam = np.stack([(x - K.cx) / K.fx, (y - K.cy) / K.fy,
                         np.ones_like(x)], axis=-1)
    dirs_world = dirs_cam @ pose.rotation.T
    origin = pose.translation
    best_t = np.full(x.shape, np.inf)
    intensity = np.zeros(x.shape)
    for rect in scene.rects:
        n = rect.normal
        denom = dirs_world @ n
        num = float(n @ (rect.center - origin))
        with np.errstate(divide="ignore", invalid="ignore"):
            t = np.where(np.abs(denom) > 1e-12, num / denom, np.inf)
        hit_pts = origin + t[..., None] * dirs_world
        local = hit_pts - rect.center
        u = local @ rect.u_axis
        v = local @ rect.v_axis
        hit = ((t > MIN_RAY_T) & np.isfinite(t)
               & (np.abs(u) <= rect.half_u) & (np.abs(v) <= rect.half_v)
               & (t < best_t))
        if hit.any():
            intensity[hit] = rect.intensity(u[hit], v[hit])
            best_t[hit] = t[hit]
    return intensity, best_t


def render_scene(scene: SyntheticScene, pose: Pose,
                 K: CameraIntrinsics = None,
                 allow_empty: bool = False,
                 supersample: int = 2) -> Tuple[Image, InverseDepthMap]:
    """Ray-cast the scene from ``pose``; exact depth, deterministic.

    Depth comes from the exact pixel-center ray (closed-form ray-plane
    intersection); the intensity is anti-aliased by averaging a
    ``supersample`` x ``supersample`` subpixel grid, mimicking a camera's
    area integration. Pixels that hit no geometry are invalid (and black).
    Raises EmptyView if nothing is hit at all.
    """
    if K is None:
        K = scene.intrinsics
    if supersample < 1:
        raise ValueError("supersample must be >= 1")
    x, y = pixel_grid(K.width, K.height)
    center_int, best_t = _cast_rays(scene, pose, x, y, K)
    valid = np.isfinite(best_t)
    if not valid.any() and not allow_empty:
        raise EmptyView("no pixel hits the scene geometry")

    if supersample == 1:
        intensity = center_int
    else:
        s = supersample
        offsets = (np.arange(s) + 0.5) / s - 0.5
        acc = np.zeros(x.shape)
        hits = np.zeros(x.shape)
        for dy in offsets:
            for dx in offsets:
                sub_int, sub_t = _cast_rays(scene, pose, x + dx, y + dy, K)
                sub_ok = np.isfinite(sub_t)
                acc += np.where(sub_ok, sub_int, 0.0)
                hits += sub_ok
        intensity = np.where(hits > 0, acc / np.maximum(hits, 1), 0.0)
    inv_depth = np.where(valid, 1.0 / np.where(valid, best_t, 1.0), 0.0)
    return Image(np.where(valid, intensity, 0.0)), InverseDepthMap(inv_depth, valid)


def perturb_poses(poses: Sequence[Pose], rel_std: float, seed: int) -> List[Pose]:
    """Add twist-space noise scaled to each pose's motion magnitude.

    Per pose, the motion twist xi relative to the first pose receives
    additive Gaussian noise with per-component standard deviation
    ``rel_std * |xi|``; the first pose (zero motion) stays exact. The draw
    order depends only on the pose index, so a fixed seed hands identical
    noise to every consumer.
    """
    if rel_std < 0:
        raise ValueError("rel_std must be non-negative")
    poses = list(poses)
    if rel_std == 0.0 or not poses:
        return poses
    rng = np.random.default_rng(seed)
    base = poses[0]
    base_inv = inverse(base)
    out = []
    for pose in poses:
        xi = log_pose(compose(base_inv, pose)).to_vector()
        draw = rng.standard_normal(6)
        mag = float(np.linalg.norm(xi))
        if mag == 0.0:
            out.append(pose)
            continue
        noisy = xi + draw * (rel_std * mag)
        out.append(compose(base, exp_twist(Twist.from_vector(noisy))))
    return out


# -- scene library -------------------------------------------------------------

def _default_intrinsics(width: int, height: int) -> CameraIntrinsics:
    return CameraIntrinsics.simple(width, height)


def _with_trajectory(rects, trajectory, K) -> SyntheticScene:
    return SyntheticScene(tuple(rects), tuple(trajectory), K)


def _times(n: int, fps: float = 30.0) -> List[float]:
    return [i / fps for i in range(n)]


def lateral_trajectory(n: int, step: float = 0.01, axis=(1.0, 0.0, 0.0),
                       fps: float = 30.0) -> List[Tuple[float, Pose]]:
    """Identity-rotation dolly: translation i * step along ``axis``."""
    axis = np.asarray(axis, dtype=np.float64)
    return [(t, Pose(np.eye(3), axis * (i * step)))
            for i, t in enumerate(_times(n, fps))]


def yaw_orbit_trajectory(n: int, step_deg: float,
                         fps: float = 30.0) -> List[Tuple[float, Pose]]:
    """In-place rotation about the camera y axis by i * step_deg."""
    out = []
    for i, t in enumerate(_times(n, fps)):
        a = math.radians(step_deg * i)
        rot = np.array([[math.cos(a), 0.0, math.sin(a)],
                        [0.0, 1.0, 0.0],
                        [-math.sin(a), 0.0, math.cos(a)]])
        out.append((t, Pose(rot, np.zeros(3))))
    return out


def plane_scene(seed: int = 0, distance: float = 2.0,
                width: int = 64, height: int = 48,
                trajectory=None) -> SyntheticScene:
    """Single fronto-parallel textured plane at ``distance`` meters."""
    K = _default_intrinsics(width, height)
    rng = np.random.default_rng(seed)
    half = 1.6 * distance
    rect = make_rect(rng, (0.0, 0.0, distance), (1.0, 0.0, 0.0),
                     (0.0, 1.0, 0.0), half, half)
    if trajectory is None:
        trajectory = lateral_trajectory(8, 0.01)
    return _with_trajectory([rect], trajectory, K)


def tilted_plane_scene(seed: int = 0, distance: float = 2.0,
                       tilt_deg: float = 25.0,
                       width: int = 64, height: int = 48,
                       trajectory=None) -> SyntheticScene:
    """Textured plane tilted about the vertical axis (continuous depth range)."""
    K = _default_intrinsics(width, height)
    rng = np.random.default_rng(seed)
    a = math.radians(tilt_deg)
    u_axis = np.array([math.cos(a), 0.0, math.sin(a)])
    half = 2.0 * distance
    rect = make_rect(rng, (0.0, 0.0, distance), u_axis, (0.0, 1.0, 0.0),
                     half, half)
    if trajectory is None:
        trajectory = lateral_trajectory(8, 0.01)
    return _with_trajectory([rect], trajectory, K)


def two_plane_scene(seed: int = 0, near: float = 1.0, far: float = 2.0,
                    width: int = 64, height: int = 48,
                    trajectory=None) -> SyntheticScene:
    """Occlusion probe: a foreground patch in front of a large background."""
    K = _default_intrinsics(width, height)
    rng = np.random.default_rng(seed)
    bg = make_rect(rng, (0.0, 0.0, far), (1.0, 0.0, 0.0), (0.0, 1.0, 0.0),
                   1.8 * far, 1.8 * far)
    fg = make_rect(rng, (-0.25 * near, 0.0, near), (1.0, 0.0, 0.0),
                   (0.0, 1.0, 0.0), 0.35 * near, 0.45 * near)
    if trajectory is None:
        trajectory = lateral_trajectory(8, 0.01)
    return _with_trajectory([bg, fg], trajectory, K)


def box_room_scene(seed: int = 0, half_x: float = 2.0, half_y: float = 1.5,
                   z_near: float = -2.0, z_far: float = 4.0,
                   width: int = 64, height: int = 48,
                   trajectory=None) -> SyntheticScene:
    """Camera inside a textured box; geometry in every viewing direction."""
    K = _default_intrinsics(width, height)
    rng = np.random.default_rng(seed)
    zc = 0.5 * (z_near + z_far)
    hz = 0.5 * (z_far - z_near)
    rects = [
        # front and back walls
        make_rect(rng, (0.0, 0.0, z_far), (1.0, 0.0, 0.0), (0.0, 1.0, 0.0),
                  half_x, half_y),
        make_rect(rng, (0.0, 0.0, z_near), (1.0, 0.0, 0.0), (0.0, 1.0, 0.0),
                  half_x, half_y),
        # side walls
        make_rect(rng, (half_x, 0.0, zc), (0.0, 0.0, 1.0), (0.0, 1.0, 0.0),
                  hz, half_y),
        make_rect(rng, (-half_x, 0.0, zc), (0.0, 0.0, 1.0), (0.0, 1.0, 0.0),
                  hz, half_y),
        # floor and ceiling (y down)
        make_rect(rng, (0.0, half_y, zc), (1.0, 0.0, 0.0), (0.0, 0.0, 1.0),
                  half_x, hz),
        make_rect(rng, (0.0, -half_y, zc), (1.0, 0.0, 0.0), (0.0, 0.0, 1.0),
                  half_x, hz),
    ]
    if trajectory is None:
        trajectory = lateral_trajectory(8, 0.01)
    return _with_trajectory(rects, trajectory, K)


SCENE_BUILDERS = {
    "plane": plane_scene,
    "tilted-plane": tilted_plane_scene,
    "two-plane": two_plane_scene,
    "box-room": box_room_scene,
}
