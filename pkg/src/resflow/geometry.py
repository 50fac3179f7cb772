"""Rigid-body algebra, Euler angles, pose errors and pinhole projection.

Conventions used throughout the package:

* Euler angles are fixed-axis X-Y-Z, i.e. ``R = Rz(gamma) @ Ry(beta) @ Rx(alpha)``
  for ``angles = (alpha, beta, gamma)`` in radians.
* Absolute camera poses are camera-to-world. Relative poses map frame-1
  camera coordinates into frame-2 camera coordinates.
* Points are stored as rows, so applying ``T`` to an ``(N, 3)`` array is
  ``P @ R.T + t``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import NonPositiveDepth, NonRotationMatrix

_GIMBAL_EPS = 1e-12


def _as_vec3(x, name="vector"):
    v = np.asarray(x, dtype=np.float64)
    if v.shape != (3,):
        raise ValueError(f"{name} must have shape (3,), got {v.shape}")
    return v


@dataclass(frozen=True)
class RigidTransform:
    """Rotation ``R`` and translation ``t`` acting as ``x -> R x + t``."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.array(self.rotation, dtype=np.float64)
        if R.shape != (3, 3):
            raise ValueError(f"rotation must be 3x3, got {R.shape}")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", _as_vec3(self.translation, "translation").copy())

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, M) -> "RigidTransform":
        M = np.asarray(M, dtype=np.float64)
        return cls(M[:3, :3], M[:3, 3])

    @classmethod
    def from_euler(cls, angles, translation) -> "RigidTransform":
        return cls(euler_to_rotation(angles), translation)

    def matrix(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = self.rotation
        M[:3, 3] = self.translation
        return M

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """``self ∘ other``: apply ``other`` first, then ``self``."""
        return RigidTransform(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    __matmul__ = compose

    def inverse(self) -> "RigidTransform":
        Rt = self.rotation.T
        return RigidTransform(Rt, -(Rt @ self.translation))

    def apply(self, points) -> np.ndarray:
        P = np.asarray(points, dtype=np.float64)
        return P @ self.rotation.T + self.translation

    def rotate(self, vectors) -> np.ndarray:
        return np.asarray(vectors, dtype=np.float64) @ self.rotation.T

    def is_valid(self, tol: float = 1e-9) -> bool:
        R = self.rotation
        if not (np.all(np.isfinite(R)) and np.all(np.isfinite(self.translation))):
            return False
        ortho = np.linalg.norm(R.T @ R - np.eye(3))
        return ortho < tol and abs(np.linalg.det(R) - 1.0) < tol

    def to_euler(self) -> "EulerPose":
        return EulerPose.from_transform(self)


@dataclass(frozen=True)
class EulerPose:
    angles: np.ndarray
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "angles", _as_vec3(self.angles, "angles").copy())
        object.__setattr__(self, "translation", _as_vec3(self.translation, "translation").copy())

    @classmethod
    def from_vector(cls, v) -> "EulerPose":
        v = np.asarray(v, dtype=np.float64).reshape(6)
        return cls(v[:3], v[3:])

    @classmethod
    def from_transform(cls, T: RigidTransform) -> "EulerPose":
        return cls(rotation_to_euler(T.rotation), T.translation)

    def to_transform(self) -> RigidTransform:
        return RigidTransform(euler_to_rotation(self.angles), self.translation)

    def vector(self) -> np.ndarray:
        return np.concatenate([self.angles, self.translation])


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float = 0.0
    cy: float = 0.0

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")

    def as_tuple(self):
        return (float(self.fx), float(self.fy), float(self.cx), float(self.cy))


def rot_x(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rot_y(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rot_z(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def euler_to_rotation(angles) -> np.ndarray:
    """Rotation matrix ``Rz(g) @ Ry(b) @ Rx(a)`` for ``angles = (a, b, g)``."""
    a, b, g = (float(x) for x in _as_vec3(angles, "angles"))
    return rot_z(g) @ rot_y(b) @ rot_x(a)


def check_rotation(R, tol: float = 1e-6) -> np.ndarray:
    R = np.asarray(R, dtype=np.float64)
    if R.shape != (3, 3) or not np.all(np.isfinite(R)):
        raise NonRotationMatrix(f"expected a finite 3x3 matrix, got shape {R.shape}")
    err = np.linalg.norm(R.T @ R - np.eye(3))
    det = np.linalg.det(R)
    if err > tol or abs(det - 1.0) > tol:
        raise NonRotationMatrix(f"matrix is not in SO(3): |R^T R - I|={err:.3g}, det={det:.6g}")
    return R


def _wrap_angle(x: float) -> float:
    # atan2 may return -pi; keep angles in (-pi, pi]
    return math.pi if x == -math.pi else x


def rotation_to_euler(R) -> np.ndarray:
    """Inverse of :func:`euler_to_rotation`.

    At gimbal lock (``|R[2, 0]| == 1``) the roll angle is pinned to zero and
    the yaw absorbs the remaining in-plane rotation.
    """
    R = check_rotation(R)
    cos_b = math.hypot(R[0, 0], R[1, 0])
    beta = math.atan2(-R[2, 0], cos_b)
    if cos_b > _GIMBAL_EPS:
        alpha = math.atan2(R[2, 1], R[2, 2])
        gamma = math.atan2(R[1, 0], R[0, 0])
    else:
        alpha = 0.0
        if R[2, 0] < 0:  # beta = +pi/2
            gamma = math.atan2(-R[0, 1], R[0, 2])
        else:  # beta = -pi/2
            gamma = math.atan2(-R[0, 1], -R[0, 2])
    return np.array([_wrap_angle(alpha), beta, _wrap_angle(gamma)])


def relative_pose(pose1: RigidTransform, pose2: RigidTransform) -> RigidTransform:
    """Frame-1 to frame-2 transform from two camera-to-world poses."""
    R2t = pose2.rotation.T
    return RigidTransform(R2t @ pose1.rotation, R2t @ (pose1.translation - pose2.translation))


def rotation_error_deg(R_hat, R_gt) -> float:
    """Geodesic angle between two rotations, in degrees.

    Equal to ``arccos((trace(R_hat^T R_gt) - 1) / 2)``; evaluated through
    ``atan2`` of the skew and symmetric parts so small angles keep full
    precision and identical inputs give exactly zero.
    """
    M = np.asarray(R_hat, dtype=np.float64).T @ np.asarray(R_gt, dtype=np.float64)
    cos_t = (np.trace(M) - 1.0) / 2.0
    sin_t = 0.5 * math.sqrt(
        (M[2, 1] - M[1, 2]) ** 2 + (M[0, 2] - M[2, 0]) ** 2 + (M[1, 0] - M[0, 1]) ** 2
    )
    cos_t = min(1.0, max(-1.0, cos_t))
    return math.degrees(math.atan2(sin_t, cos_t))


def translation_error(t_hat, t_gt) -> float:
    d = _as_vec3(t_hat, "t_hat") - _as_vec3(t_gt, "t_gt")
    return float(math.sqrt(float(d @ d)))


def project(point, K: CameraIntrinsics) -> np.ndarray:
    x, y, z = _as_vec3(point, "point")
    if not z > 1e-9:
        raise NonPositiveDepth([0])
    return np.array([K.fx * x / z + K.cx, K.fy * y / z + K.cy])


def project_points(points, K: CameraIntrinsics) -> np.ndarray:
    """Vectorised :func:`project` over an ``(N, 3)`` array."""
    P = np.asarray(points, dtype=np.float64)
    z = P[:, 2]
    bad = np.flatnonzero(~(z > 1e-9))
    if bad.size:
        raise NonPositiveDepth(bad)
    return np.stack([K.fx * P[:, 0] / z + K.cx, K.fy * P[:, 1] / z + K.cy], axis=1)


def random_rotation(rng: np.random.Generator, max_angle_deg: float | None = None) -> np.ndarray:
    """Random rotation whose geodesic angle is at most ``max_angle_deg``.

    The axis is uniform on the sphere and the angle uniform in
    ``[0, max_angle_deg]``. With ``max_angle_deg=None`` the rotation is
    uniformly distributed over SO(3).
    """
    if max_angle_deg is None:
        q = rng.normal(size=4)
        q /= np.linalg.norm(q)
        w, x, y, z = q
        return np.array([
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ])
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    theta = rng.uniform(0.0, math.radians(max_angle_deg))
    K = np.array([[0.0, -axis[2], axis[1]], [axis[2], 0.0, -axis[0]], [-axis[1], axis[0], 0.0]])
    return np.eye(3) + math.sin(theta) * K + (1.0 - math.cos(theta)) * (K @ K)
