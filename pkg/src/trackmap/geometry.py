"""SE(3) pose algebra: rigid transforms, twists, hypothesis aggregation.

Conventions
-----------
A ``Pose`` stores a world-from-camera transform: ``p_world = R p_cam + t``.
A ``Twist`` is a 6D increment ``(r, t)`` where ``r`` is angle-axis rotation
(angle = vector magnitude, radians) and ``t`` is translation in meters.
``exp_twist``/``log_pose`` are the standard SE(3) exponential/logarithm,
mutually inverse for rotation angles below pi.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import AngleOutOfRange, EmptyHypothesisSet

ORTHONORMAL_TOL = 1e-9
LOG_ANGLE_LIMIT = math.pi - 1e-6
_SMALL_ANGLE = 1e-8


def _as_readonly(arr, shape, name):
    out = np.array(arr, dtype=np.float64)
    if out.shape != shape:
        raise ValueError(f"{name} must have shape {shape}, got {out.shape}")
    if not np.all(np.isfinite(out)):
        raise ValueError(f"{name} contains non-finite values")
    out.setflags(write=False)
    return out


def rotation_drift(rot: np.ndarray) -> float:
    """Largest deviation of R from orthonormality (R^T R vs I, det vs 1)."""
    err = np.abs(rot.T @ rot - np.eye(3)).max()
    return float(max(err, abs(np.linalg.det(rot) - 1.0)))


def orthonormalize_rotation(rot: np.ndarray) -> np.ndarray:
    """Project a near-rotation matrix onto SO(3) via SVD polar factor."""
    u, _, vt = np.linalg.svd(rot)
    d = np.sign(np.linalg.det(u @ vt))
    return u @ np.diag([1.0, 1.0, d]) @ vt


@dataclass(frozen=True)
class Pose:
    """Rigid transform in SE(3); rotation 3x3, translation 3-vector (m)."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        rot = _as_readonly(self.rotation, (3, 3), "rotation")
        trans = _as_readonly(self.translation, (3,), "translation")
        if rotation_drift(rot) > ORTHONORMAL_TOL:
            raise ValueError("rotation is not orthonormal within 1e-9; "
                             "use Pose.orthonormalized to snap it")
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", trans)

    @staticmethod
    def identity() -> "Pose":
        return Pose(np.eye(3), np.zeros(3))

    @staticmethod
    def orthonormalized(rotation, translation) -> "Pose":
        rot = np.asarray(rotation, dtype=np.float64)
        if rotation_drift(rot) > ORTHONORMAL_TOL:
            rot = orthonormalize_rotation(rot)
        return Pose(rot, translation)

    def matrix(self) -> np.ndarray:
        """4x4 homogeneous matrix."""
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    @staticmethod
    def from_matrix(m) -> "Pose":
        m = np.asarray(m, dtype=np.float64)
        return Pose.orthonormalized(m[:3, :3], m[:3, 3])

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform points of shape (3,) or (n, 3)."""
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.rotation.T + self.translation


@dataclass(frozen=True)
class Twist:
    """6D pose increment: angle-axis rotation r and translation t."""

    r: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "r", _as_readonly(self.r, (3,), "r"))
        object.__setattr__(self, "t", _as_readonly(self.t, (3,), "t"))

    @staticmethod
    def zero() -> "Twist":
        return Twist(np.zeros(3), np.zeros(3))

    @staticmethod
    def from_vector(vec) -> "Twist":
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (6,):
            raise ValueError("twist vector must have shape (6,)")
        return Twist(vec[:3], vec[3:])

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.r, self.t])

    @property
    def angle(self) -> float:
        return float(np.linalg.norm(self.r))


@dataclass(frozen=True)
class HypothesisSet:
    """N twist hypotheses, their mean and 6x6 scatter covariance.

    ``error`` is ``mean - ground_truth`` (the vector fed to the
    uncertainty loss) when a ground truth was supplied at aggregation.
    """

    samples: tuple
    mean: Twist
    covariance: np.ndarray
    error: Optional[Twist] = None

    def __post_init__(self):
        cov = _as_readonly(self.covariance, (6, 6), "covariance")
        object.__setattr__(self, "covariance", cov)

    def __len__(self):
        return len(self.samples)


def identity_pose() -> Pose:
    return Pose.identity()


def compose(a: Pose, b: Pose) -> Pose:
    """Rigid transform equal to applying b then a (matrix product a*b)."""
    rot = a.rotation @ b.rotation
    if rotation_drift(rot) > ORTHONORMAL_TOL:
        rot = orthonormalize_rotation(rot)
    trans = a.rotation @ b.translation + a.translation
    return Pose(rot, trans)


def inverse(p: Pose) -> Pose:
    rot = p.rotation.T
    return Pose(rot, -(rot @ p.translation))


def relative_transform(src: Pose, dst: Pose) -> Pose:
    """Transform mapping src-camera coordinates to dst-camera coordinates."""
    return compose(inverse(dst), src)


def skew(v: np.ndarray) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def _rotation_coeffs(theta: float):
    # sin(t)/t and (1-cos t)/t^2 with series fallbacks near zero
    if theta < _SMALL_ANGLE:
        return 1.0 - theta * theta / 6.0, 0.5 - theta * theta / 24.0
    return math.sin(theta) / theta, (1.0 - math.cos(theta)) / (theta * theta)


def _v_coeffs(theta: float):
    # (1-cos t)/t^2 and (t - sin t)/t^3 with series fallbacks
    if theta < _SMALL_ANGLE:
        return 0.5 - theta * theta / 24.0, 1.0 / 6.0 - theta * theta / 120.0
    t2 = theta * theta
    return (1.0 - math.cos(theta)) / t2, (theta - math.sin(theta)) / (t2 * theta)


def exp_twist(xi: Twist) -> Pose:
    """SE(3) exponential: twist to rigid transform."""
    theta = xi.angle
    w = skew(xi.r)
    w2 = w @ w
    a, b = _rotation_coeffs(theta)
    rot = np.eye(3) + a * w + b * w2
    c, d = _v_coeffs(theta)
    vmat = np.eye(3) + c * w + d * w2
    return Pose.orthonormalized(rot, vmat @ xi.t)


def rotation_angle(rot: np.ndarray) -> float:
    """Rotation angle in radians of a rotation matrix."""
    c = 0.5 * (np.trace(rot) - 1.0)
    return math.acos(min(1.0, max(-1.0, c)))


def log_pose(p: Pose) -> Twist:
    """SE(3) logarithm: rigid transform to twist.

    Raises AngleOutOfRange for rotation angles >= pi - 1e-6, where the
    angle-axis encoding degenerates.
    """
    theta = rotation_angle(p.rotation)
    if theta >= LOG_ANGLE_LIMIT:
        raise AngleOutOfRange(f"rotation angle {theta:.6f} rad too close to pi")
    dev = p.rotation - p.rotation.T
    vee = 0.5 * np.array([dev[2, 1], dev[0, 2], dev[1, 0]])
    if theta < _SMALL_ANGLE:
        r = vee * (1.0 + theta * theta / 6.0)
    else:
        r = vee * (theta / math.sin(theta))
    w = skew(r)
    w2 = w @ w
    if theta < _SMALL_ANGLE:
        coef = 1.0 / 12.0 + theta * theta / 720.0
    else:
        coef = (1.0 - theta * math.sin(theta) / (2.0 * (1.0 - math.cos(theta)))) / (theta * theta)
    v_inv = np.eye(3) - 0.5 * w + coef * w2
    return Twist(r, v_inv @ p.translation)


def apply_increment(guess: Pose, delta: Twist) -> Pose:
    """Right-multiply a pose by a twist increment: guess * exp(delta)."""
    return compose(guess, exp_twist(delta))


def _fsum_mean(vectors: np.ndarray) -> np.ndarray:
    # fixed index order, exactly-rounded summation per component
    n = vectors.shape[0]
    return np.array([math.fsum(vectors[:, k]) / n for k in range(vectors.shape[1])])


def aggregate_hypotheses(samples: Sequence[Twist],
                         ground_truth: Optional[Twist] = None) -> HypothesisSet:
    """Componentwise mean and scatter covariance of twist hypotheses.

    mean = (1/N) sum xi_i, covariance = (1/N) sum (xi_i - mean)(xi_i - mean)^T.
    Summation uses exactly-rounded compensated sums in index order, so the
    result is invariant to sample permutation.
    """
    if len(samples) == 0:
        raise EmptyHypothesisSet("need at least one twist sample")
    vecs = np.stack([s.to_vector() for s in samples])
    mean_vec = _fsum_mean(vecs)
    dev = vecs - mean_vec
    n = dev.shape[0]
    cov = np.empty((6, 6))
    for i in range(6):
        for j in range(i, 6):
            cov[i, j] = cov[j, i] = math.fsum(dev[:, i] * dev[:, j]) / n
    mean = Twist.from_vector(mean_vec)
    error = None
    if ground_truth is not None:
        error = Twist.from_vector(mean_vec - ground_truth.to_vector())
    return HypothesisSet(tuple(samples), mean, cov, error)
