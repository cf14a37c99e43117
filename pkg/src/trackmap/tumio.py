"""Dataset and result file formats.

Sequence layout follows the RGB-D benchmark convention: a directory with
``rgb.txt`` / ``depth.txt`` / ``groundtruth.txt`` index files, 8-bit PNG
images and 16-bit PNG depth with factor 5000 per meter (0 = invalid).
Trajectories are text files with one ``timestamp tx ty tz qx qy qz qw``
line per frame, written with 17 significant digits so every float
round-trips bit-exactly. Float maps can also be stored as little-endian
PFM.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image as PILImage

from .errors import MalformedLine, MissingIndexFile
from .geometry import Pose
from .imaging import CameraIntrinsics, Image, InverseDepthMap
from .metrics import associate_timestamps

DEPTH_SCALE = 5000.0
MAX_ASSOCIATION_GAP = 0.02
_FLOAT_FMT = "%.17g"


# -- quaternions ---------------------------------------------------------------

def quaternion_from_rotation(rot: np.ndarray) -> np.ndarray:
    """Unit quaternion (qx, qy, qz, qw) from a rotation matrix."""
    m = np.asarray(rot, dtype=np.float64)
    tr = m[0, 0] + m[1, 1] + m[2, 2]
    if tr > 0:
        s = math.sqrt(tr + 1.0) * 2.0
        qw = 0.25 * s
        qx = (m[2, 1] - m[1, 2]) / s
        qy = (m[0, 2] - m[2, 0]) / s
        qz = (m[1, 0] - m[0, 1]) / s
    elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
        s = math.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2.0
        qw = (m[2, 1] - m[1, 2]) / s
        qx = 0.25 * s
        qy = (m[0, 1] + m[1, 0]) / s
        qz = (m[0, 2] + m[2, 0]) / s
    elif m[1, 1] > m[2, 2]:
        s = math.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2.0
        qw = (m[0, 2] - m[2, 0]) / s
        qx = (m[0, 1] + m[1, 0]) / s
        qy = 0.25 * s
        qz = (m[1, 2] + m[2, 1]) / s
    else:
        s = math.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2.0
        qw = (m[1, 0] - m[0, 1]) / s
        qx = (m[0, 2] + m[2, 0]) / s
        qy = (m[1, 2] + m[2, 1]) / s
        qz = 0.25 * s
    q = np.array([qx, qy, qz, qw])
    q /= np.linalg.norm(q)
    if q[3] < 0:
        q = -q
    return q


def rotation_from_quaternion(q: Sequence[float]) -> np.ndarray:
    qx, qy, qz, qw = np.asarray(q, dtype=np.float64) / np.linalg.norm(q)
    return np.array([
        [1 - 2 * (qy * qy + qz * qz), 2 * (qx * qy - qz * qw), 2 * (qx * qz + qy * qw)],
        [2 * (qx * qy + qz * qw), 1 - 2 * (qx * qx + qz * qz), 2 * (qy * qz - qx * qw)],
        [2 * (qx * qz - qy * qw), 2 * (qy * qz + qx * qw), 1 - 2 * (qx * qx + qy * qy)],
    ])


# -- trajectory text format ------------------------------------------------------

def save_trajectory(path, trajectory: Sequence[Tuple[float, Pose]]) -> None:
    """Write ``timestamp tx ty tz qx qy qz qw`` lines at 17 significant digits."""
    with open(path, "w") as f:
        f.write("# timestamp tx ty tz qx qy qz qw\n")
        for t, pose in trajectory:
            q = quaternion_from_rotation(pose.rotation)
            vals = [t, *pose.translation, *q]
            f.write(" ".join(_FLOAT_FMT % v for v in vals) + "\n")


def load_trajectory(path) -> List[Tuple[float, Pose]]:
    if not os.path.exists(path):
        raise MissingIndexFile(f"trajectory file not found: {path}")
    out = []
    with open(path) as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 8:
                raise MalformedLine(path, lineno,
                                    f"expected 8 fields, got {len(parts)}")
            try:
                vals = [float(p) for p in parts]
            except ValueError as exc:
                raise MalformedLine(path, lineno, str(exc)) from exc
            rot = rotation_from_quaternion(vals[4:8])
            out.append((vals[0], Pose.orthonormalized(rot, vals[1:4])))
    return out


# -- images and depth maps -------------------------------------------------------

def save_image_png(path, img: Image) -> None:
    arr = np.round(img.values * 255.0).astype(np.uint8)
    mode = "L" if img.channels == 1 else "RGB"
    PILImage.fromarray(arr, mode=mode).save(path)


def load_image_png(path) -> Image:
    with PILImage.open(path) as pil:
        if pil.mode not in ("L", "RGB"):
            pil = pil.convert("RGB" if len(pil.getbands()) >= 3 else "L")
        arr = np.asarray(pil, dtype=np.float64) / 255.0
    return Image(arr)


def save_depth_png(path, inv_depth: InverseDepthMap) -> None:
    """16-bit PNG of metric depth, value = depth_m * 5000, 0 = invalid."""
    depth = np.where(inv_depth.valid, 1.0 / np.where(inv_depth.valid,
                                                     inv_depth.values, 1.0), 0.0)
    counts = np.round(depth * DEPTH_SCALE)
    counts = np.where((counts >= 1) & (counts <= 65535) & inv_depth.valid,
                      counts, 0).astype(np.uint16)
    PILImage.fromarray(counts, mode="I;16").save(path)


def load_depth_png(path) -> InverseDepthMap:
    with PILImage.open(path) as pil:
        arr = np.asarray(pil, dtype=np.float64)
    depth = arr / DEPTH_SCALE
    valid = arr > 0
    inv = np.where(valid, 1.0 / np.where(valid, depth, 1.0), 0.0)
    return InverseDepthMap(inv, valid)


def save_pfm(path, values: np.ndarray) -> None:
    """Little-endian grayscale PFM; rows stored bottom-to-top per the format."""
    arr = np.asarray(values, dtype="<f4")
    if arr.ndim != 2:
        raise ValueError("PFM writer expects a 2-D map")
    with open(path, "wb") as f:
        f.write(b"Pf\n")
        f.write(f"{arr.shape[1]} {arr.shape[0]}\n".encode("ascii"))
        f.write(b"-1.0\n")
        f.write(arr[::-1].tobytes())


def load_pfm(path) -> np.ndarray:
    with open(path, "rb") as f:
        if f.readline().strip() != b"Pf":
            raise MalformedLine(path, 1, "not a grayscale PFM file")
        w, h = map(int, f.readline().split())
        scale = float(f.readline())
        dtype = "<f4" if scale < 0 else ">f4"
        data = np.frombuffer(f.read(4 * w * h), dtype=dtype)
    return data.reshape(h, w)[::-1].astype(np.float64)


# -- TUM-style sequence directories ----------------------------------------------

@dataclass
class SequenceFrame:
    timestamp: float
    image: Image
    inv_depth: Optional[InverseDepthMap] = None
    depth_timestamp: Optional[float] = None


@dataclass
class SequenceData:
    frames: List[SequenceFrame]
    groundtruth: Optional[List[Tuple[float, Pose]]] = None
    dropped_depth: int = 0
    dropped_groundtruth: int = 0
    intrinsics: Optional[CameraIntrinsics] = None

    def __len__(self):
        return len(self.frames)

    @property
    def timestamps(self) -> List[float]:
        return [f.timestamp for f in self.frames]

    def groundtruth_pose(self, index: int,
                         max_gap: float = MAX_ASSOCIATION_GAP) -> Optional[Pose]:
        if not self.groundtruth:
            return None
        t = self.frames[index].timestamp
        best = min(self.groundtruth, key=lambda item: abs(item[0] - t))
        return best[1] if abs(best[0] - t) <= max_gap else None


def _read_index(path) -> List[Tuple[float, str]]:
    out = []
    with open(path) as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 2:
                raise MalformedLine(path, lineno,
                                    f"expected 'timestamp path', got {len(parts)} fields")
            try:
                t = float(parts[0])
            except ValueError as exc:
                raise MalformedLine(path, lineno, str(exc)) from exc
            out.append((t, parts[1]))
    return out


def load_tum_sequence(directory, max_gap: float = MAX_ASSOCIATION_GAP) -> SequenceData:
    """Load a sequence directory; depth associated by nearest timestamp.

    Depth entries farther than ``max_gap`` seconds from any image are
    dropped (counted in ``dropped_depth``); images without a match keep an
    empty depth slot.
    """
    directory = str(directory)
    rgb_index = os.path.join(directory, "rgb.txt")
    if not os.path.exists(rgb_index):
        raise MissingIndexFile(f"missing rgb.txt in {directory}")
    rgb = _read_index(rgb_index)
    frames = [SequenceFrame(t, load_image_png(os.path.join(directory, rel)))
              for t, rel in rgb]

    dropped_depth = 0
    depth_index = os.path.join(directory, "depth.txt")
    if os.path.exists(depth_index):
        depth = _read_index(depth_index)
        pairs = associate_timestamps([t for t, _ in rgb], [t for t, _ in depth],
                                     max_gap)
        matched = {j for _, j in pairs}
        dropped_depth = len(depth) - len(matched)
        for i, j in pairs:
            t_d, rel = depth[j]
            frames[i].inv_depth = load_depth_png(os.path.join(directory, rel))
            frames[i].depth_timestamp = t_d

    groundtruth = None
    dropped_gt = 0
    gt_path = os.path.join(directory, "groundtruth.txt")
    if os.path.exists(gt_path):
        groundtruth = load_trajectory(gt_path)

    intrinsics = None
    calib_path = os.path.join(directory, "calibration.txt")
    if os.path.exists(calib_path):
        with open(calib_path) as f:
            for lineno, raw in enumerate(f, start=1):
                line = raw.strip()
                if not line or line.startswith("#"):
                    continue
                parts = line.split()
                if len(parts) != 4:
                    raise MalformedLine(calib_path, lineno,
                                        "expected 'fx fy cx cy'")
                fx, fy, cx, cy = map(float, parts)
                h, w = frames[0].image.height, frames[0].image.width
                intrinsics = CameraIntrinsics(fx, fy, cx, cy, w, h)
                break
    return SequenceData(frames, groundtruth, dropped_depth, dropped_gt,
                        intrinsics)


def write_tum_sequence(directory, timestamps: Sequence[float],
                       images: Sequence[Image],
                       inv_depths: Sequence[Optional[InverseDepthMap]],
                       trajectory: Optional[Sequence[Tuple[float, Pose]]] = None,
                       intrinsics: Optional[CameraIntrinsics] = None) -> None:
    """Write a sequence directory consumable by ``load_tum_sequence``."""
    directory = str(directory)
    os.makedirs(os.path.join(directory, "rgb"), exist_ok=True)
    os.makedirs(os.path.join(directory, "depth"), exist_ok=True)
    rgb_lines = []
    depth_lines = []
    for t, img, dep in zip(timestamps, images, inv_depths):
        name = _FLOAT_FMT % t
        rel = f"rgb/{name}.png"
        save_image_png(os.path.join(directory, rel), img)
        rgb_lines.append(f"{name} {rel}")
        if dep is not None:
            rel_d = f"depth/{name}.png"
            save_depth_png(os.path.join(directory, rel_d), dep)
            depth_lines.append(f"{name} {rel_d}")
    with open(os.path.join(directory, "rgb.txt"), "w") as f:
        f.write("# timestamp filename\n")
        f.write("\n".join(rgb_lines) + "\n")
    if depth_lines:
        with open(os.path.join(directory, "depth.txt"), "w") as f:
            f.write("# timestamp filename\n")
            f.write("\n".join(depth_lines) + "\n")
    if trajectory is not None:
        save_trajectory(os.path.join(directory, "groundtruth.txt"), trajectory)
    if intrinsics is not None:
        with open(os.path.join(directory, "calibration.txt"), "w") as f:
            f.write("# fx fy cx cy\n")
            f.write(" ".join(_FLOAT_FMT % v for v in
                             (intrinsics.fx, intrinsics.fy,
                              intrinsics.cx, intrinsics.cy)) + "\n")
