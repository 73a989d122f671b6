"""Rigid transforms in SE(3) and the frame-chaining helpers built on them.

Convention: ``a_from_b`` maps coordinates expressed in frame ``b`` into frame
``a`` (``p_a = R @ p_b + t``).  ``compose(a_from_b, b_from_c)`` is ``a_from_c``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .cloud import PointCloud
from .errors import NonUnitQuaternion

# drift tolerated before a rotation is projected back onto SO(3)
REORTHO_TOL = 1e-12
# drift beyond which a matrix is rejected outright rather than repaired
REJECT_TOL = 1e-6


def orthonormal_drift(rotation: np.ndarray) -> float:
    return float(np.max(np.abs(rotation.T @ rotation - np.eye(3))))


def project_to_so3(m: np.ndarray) -> np.ndarray:
    """Nearest rotation matrix (polar decomposition via SVD)."""
    u, _, vt = np.linalg.svd(m)
    r = u @ vt
    if np.linalg.det(r) < 0:
        u[:, -1] *= -1
        r = u @ vt
    return r


@dataclass(frozen=True, eq=False)
class SE3:
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        drift = orthonormal_drift(r)
        if drift > REJECT_TOL or np.linalg.det(r) <= 0:
            raise ValueError(f"not a proper rotation matrix (drift {drift:.3g})")
        if drift > REORTHO_TOL:
            r = project_to_so3(r)
        r.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> SE3:
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, m) -> SE3:
        m = np.asarray(m, dtype=np.float64).reshape(4, 4)
        return cls(m[:3, :3], m[:3, 3])

    @classmethod
    def from_translation(cls, t) -> SE3:
        return cls(np.eye(3), t)

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def __matmul__(self, other: SE3) -> SE3:
        return compose(self, other)

    def inverse(self) -> SE3:
        return inverse(self)

    def allclose(self, other: SE3, atol: float = 1e-9) -> bool:
        return bool(
            np.allclose(self.rotation, other.rotation, atol=atol, rtol=0)
            and np.allclose(self.translation, other.translation, atol=atol, rtol=0)
        )

    def __repr__(self) -> str:
        return f"SE3(t={self.translation.tolist()}, q={to_quaternion(self).tolist()})"


@dataclass(frozen=True)
class Pose:
    """A world-frame transform stamped in microseconds since stream start."""

    timestamp: int
    transform: SE3

    def __post_init__(self):
        if int(self.timestamp) != self.timestamp or self.timestamp < 0:
            raise ValueError(f"pose timestamp must be a non-negative integer, got {self.timestamp}")
        object.__setattr__(self, "timestamp", int(self.timestamp))


def compose(a: SE3, b: SE3) -> SE3:
    """Apply ``b`` first, then ``a``."""
    return SE3(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


def inverse(a: SE3) -> SE3:
    rt = a.rotation.T
    return SE3(rt, -rt @ a.translation)


def relative(world_from_a: SE3, world_from_b: SE3) -> SE3:
    """``a_from_b``: pose of frame b expressed in frame a."""
    return compose(inverse(world_from_a), world_from_b)


def quaternion_to_matrix(q) -> np.ndarray:
    x, y, z, w = (float(v) for v in q)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )


def from_quaternion_translation(q, t) -> SE3:
    """Build a transform from a scalar-last quaternion ``(x, y, z, w)`` and translation."""
    q = np.asarray(q, dtype=np.float64).reshape(4)
    norm = float(np.linalg.norm(q))
    if abs(norm - 1.0) > 1e-3:
        raise NonUnitQuaternion(f"quaternion norm {norm:.6g} is not within 1e-3 of 1")
    return SE3(quaternion_to_matrix(q / norm), t)


def to_quaternion(a: SE3) -> np.ndarray:
    """Scalar-last unit quaternion with non-negative ``w``."""
    m = a.rotation
    tr = m[0, 0] + m[1, 1] + m[2, 2]
    if tr > 0:
        s = math.sqrt(tr + 1.0) * 2
        q = [(m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s, 0.25 * s]
    elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
        s = math.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2
        q = [0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s, (m[2, 1] - m[1, 2]) / s]
    elif m[1, 1] > m[2, 2]:
        s = math.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2
        q = [(m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s, (m[0, 2] - m[2, 0]) / s]
    else:
        s = math.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2
        q = [(m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s, (m[1, 0] - m[0, 1]) / s]
    q = np.array(q)
    q /= np.linalg.norm(q)
    if q[3] < 0:
        q = -q
    return q


def rotvec_to_matrix(w) -> np.ndarray:
    """Rodrigues' formula."""
    w = np.asarray(w, dtype=np.float64).reshape(3)
    theta = float(np.linalg.norm(w))
    k = np.array([[0.0, -w[2], w[1]], [w[2], 0.0, -w[0]], [-w[1], w[0], 0.0]])
    if theta < 1e-12:
        return np.eye(3) + k
    k /= theta
    return np.eye(3) + math.sin(theta) * k + (1 - math.cos(theta)) * (k @ k)


def rotation_angle(r: np.ndarray) -> float:
    """Rotation angle of ``r`` in radians."""
    c = (np.trace(r) - 1.0) / 2.0
    return float(math.acos(min(1.0, max(-1.0, c))))


def rot_z(degrees: float) -> np.ndarray:
    a = math.radians(degrees)
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def random_se3(rng: np.random.Generator, max_angle: float = math.pi, max_translation: float = 1.0) -> SE3:
    """Uniform-axis rotation up to ``max_angle`` radians, translation in a cube."""
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = rng.uniform(0.0, max_angle)
    t = rng.uniform(-max_translation, max_translation, size=3)
    return SE3(rotvec_to_matrix(axis * angle), t)


def transform_error(estimate: SE3, truth: SE3) -> tuple[float, float]:
    """(translation error in meters, rotation error in degrees)."""
    d = relative(truth, estimate)
    return float(np.linalg.norm(estimate.translation - truth.translation)), math.degrees(
        rotation_angle(d.rotation)
    )


def transform_points(t: SE3, points: np.ndarray) -> np.ndarray:
    return points @ t.rotation.T + t.translation


def apply(t: SE3, cloud: PointCloud) -> PointCloud:
    """Re-express ``cloud`` through ``t``; normals are only rotated."""
    normals = None if cloud.normals is None else cloud.normals @ t.rotation.T
    return PointCloud(transform_points(t, cloud.points), normals, cloud.degenerate)
