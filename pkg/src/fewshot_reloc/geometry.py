"""Rigid-body pose algebra, pinhole projection and pose-error metrics.

Conventions used throughout the package:

* A :class:`Pose` is camera-to-world: a camera-frame point ``p_c`` maps to
  world coordinates as ``R @ p_c + t``.  This matches the pose files of the
  7-Scenes-style datasets the loaders read.
* The camera frame is the usual computer-vision one: x right, y down,
  z forward (optical axis).  Pixel coordinates are ``(u, v)`` with ``u``
  along the image width.
* Twists are 6-vectors ``[wx, wy, wz, rx, ry, rz]``: rotation first,
  translation second.  ``se3_exp`` maps a twist to a pose with rotation
  ``exp([w]x)`` and translation ``V(w) @ r``.

All functions are pure; poses and intrinsics are immutable values.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "Pose",
    "Intrinsics",
    "NumericallyDegenerateError",
    "project",
    "project_many",
    "backproject",
    "backproject_many",
    "pose_error",
    "rotation_angle_deg",
    "orthonormalize_rotation",
    "se3_exp",
    "se3_log",
    "skew",
]


class NumericallyDegenerateError(ValueError):
    """Raised when an operation (e.g. se3_log near angle pi) is ill-posed."""


def skew(v) -> np.ndarray:
    """Skew-symmetric matrix [v]x such that [v]x @ u == cross(v, u)."""
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def orthonormalize_rotation(m: np.ndarray) -> np.ndarray:
    """Nearest rotation matrix (polar decomposition via SVD, det forced +1)."""
    u, _, vt = np.linalg.svd(m)
    d = np.sign(np.linalg.det(u @ vt))
    return u @ np.diag([1.0, 1.0, d]) @ vt


@dataclass(frozen=True)
class Pose:
    """Rigid camera-to-world transform: world point = rotation @ p_cam + translation."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if r.shape != (3, 3):
            raise ValueError(f"rotation must be 3x3, got {r.shape}")
        if not (np.all(np.isfinite(r)) and np.all(np.isfinite(t))):
            raise ValueError("pose entries must be finite")
        if np.max(np.abs(r @ r.T - np.eye(3))) > 1e-6 or abs(np.linalg.det(r) - 1.0) > 1e-6:
            raise ValueError("rotation is not orthonormal with det +1")
        r = r.copy()
        t = t.copy()
        r.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> "Pose":
        m = np.asarray(m, dtype=np.float64)
        if m.shape != (4, 4):
            raise ValueError(f"expected 4x4 matrix, got {m.shape}")
        return cls(m[:3, :3], m[:3, 3])

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def compose(self, other: "Pose") -> "Pose":
        """self applied after other: (self*other) @ p == self @ (other @ p)."""
        return Pose(self.rotation @ other.rotation,
                    self.rotation @ other.translation + self.translation)

    def invert(self) -> "Pose":
        rt = self.rotation.T
        return Pose(rt, -rt @ self.translation)

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Map camera-frame point(s) (…,3) to world coordinates."""
        p = np.asarray(points, dtype=np.float64)
        return p @ self.rotation.T + self.translation

    def apply_inverse(self, points: np.ndarray) -> np.ndarray:
        """Map world point(s) (…,3) into the camera frame."""
        p = np.asarray(points, dtype=np.float64)
        return (p - self.translation) @ self.rotation


@dataclass(frozen=True)
class Intrinsics:
    """Pinhole calibration: focal lengths and principal point in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx],
                         [0.0, self.fy, self.cy],
                         [0.0, 0.0, 1.0]])


# Depth below this value counts as "behind the camera" for projection.
MIN_PROJECTION_DEPTH = 1e-9


def project(point, pose: Pose, k: Intrinsics):
    """Project a world point to pixel coordinates.

    Returns an ``(u, v)`` array, or ``None`` when the point is behind the
    camera (camera-frame z <= 1e-9).  Non-finite input is rejected.
    """
    p = np.asarray(point, dtype=np.float64).reshape(3)
    if not np.all(np.isfinite(p)):
        raise ValueError("point must be finite")
    pc = pose.apply_inverse(p)
    if pc[2] <= MIN_PROJECTION_DEPTH:
        return None
    return np.array([k.fx * pc[0] / pc[2] + k.cx, k.fy * pc[1] / pc[2] + k.cy])


def project_many(points: np.ndarray, pose: Pose, k: Intrinsics):
    """Vectorized projection of (N,3) world points.

    Returns ``(pixels, in_front)``: pixels is (N,2) with NaN rows where the
    point lies behind the camera, in_front the boolean validity mask.
    """
    pc = pose.apply_inverse(np.asarray(points, dtype=np.float64).reshape(-1, 3))
    in_front = pc[:, 2] > MIN_PROJECTION_DEPTH
    z = np.where(in_front, pc[:, 2], 1.0)
    pix = np.empty((pc.shape[0], 2))
    pix[:, 0] = k.fx * pc[:, 0] / z + k.cx
    pix[:, 1] = k.fy * pc[:, 1] / z + k.cy
    pix[~in_front] = np.nan
    return pix, in_front


def backproject(pix, depth: float, pose: Pose, k: Intrinsics) -> np.ndarray:
    """Lift a pixel at the given z-depth (meters) to a world point."""
    if not depth > 0:
        raise ValueError(f"depth must be positive, got {depth}")
    u, v = float(pix[0]), float(pix[1])
    pc = np.array([(u - k.cx) / k.fx * depth, (v - k.cy) / k.fy * depth, depth])
    return pose.apply(pc)


def backproject_many(pixels: np.ndarray, depths: np.ndarray, pose: Pose,
                     k: Intrinsics) -> np.ndarray:
    """Vectorized backprojection of (N,2) pixels with (N,) depths."""
    uv = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    d = np.asarray(depths, dtype=np.float64).reshape(-1)
    pc = np.empty((uv.shape[0], 3))
    pc[:, 0] = (uv[:, 0] - k.cx) / k.fx * d
    pc[:, 1] = (uv[:, 1] - k.cy) / k.fy * d
    pc[:, 2] = d
    return pose.apply(pc)


def rotation_angle_deg(r: np.ndarray) -> float:
    """Rotation angle of a rotation matrix in degrees, clamped to [0, 180].

    Equals acos((trace-1)/2); evaluated via atan2 of the skew part so tiny
    angles are resolved to full precision instead of the ~1e-6 deg floor of
    a bare arccos.
    """
    c = (np.trace(r) - 1.0) / 2.0
    s = 0.5 * math.sqrt((r[2, 1] - r[1, 2]) ** 2
                        + (r[0, 2] - r[2, 0]) ** 2
                        + (r[1, 0] - r[0, 1]) ** 2)
    return math.degrees(math.atan2(s, min(1.0, max(-1.0, c))))


def pose_error(estimate: Pose, truth: Pose) -> tuple[float, float]:
    """(translation error in meters, rotation error in degrees)."""
    trans = float(np.linalg.norm(estimate.translation - truth.translation))
    rot = rotation_angle_deg(estimate.rotation.T @ truth.rotation)
    return trans, rot


# ---------------------------------------------------------------------------
# SE(3) exponential / logarithm, used by the Gauss-Newton pose refinement.

def _so3_exp(w: np.ndarray) -> np.ndarray:
    theta = float(np.linalg.norm(w))
    s = skew(w)
    s2 = s @ s
    if theta < 1e-8:
        # 4th-order series keeps the round trip at ~1e-16 for tiny angles
        return np.eye(3) + s + 0.5 * s2
    return np.eye(3) + (math.sin(theta) / theta) * s + ((1.0 - math.cos(theta)) / theta ** 2) * s2


def _so3_log(r: np.ndarray) -> np.ndarray:
    c = (np.trace(r) - 1.0) / 2.0
    theta = math.acos(min(1.0, max(-1.0, c)))
    if theta > math.pi - 1e-6:
        raise NumericallyDegenerateError(
            f"rotation angle {theta:.6f} too close to pi for a stable log")
    vee = 0.5 * np.array([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]])
    if theta < 1e-7:
        return vee * (1.0 + theta ** 2 / 6.0)
    return vee * (theta / math.sin(theta))


def _so3_left_jacobian(w: np.ndarray) -> np.ndarray:
    theta = float(np.linalg.norm(w))
    s = skew(w)
    s2 = s @ s
    if theta < 1e-4:
        t2 = theta * theta
        a = 0.5 - t2 / 24.0 + t2 * t2 / 720.0
        b = 1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0
    else:
        a = (1.0 - math.cos(theta)) / theta ** 2
        b = (theta - math.sin(theta)) / theta ** 3
    return np.eye(3) + a * s + b * s2


def _so3_left_jacobian_inv(w: np.ndarray) -> np.ndarray:
    theta = float(np.linalg.norm(w))
    s = skew(w)
    s2 = s @ s
    if theta < 1e-4:
        t2 = theta * theta
        c = 1.0 / 12.0 + t2 / 720.0 + t2 * t2 / 30240.0
    else:
        c = (1.0 - theta * math.sin(theta) / (2.0 * (1.0 - math.cos(theta)))) / theta ** 2
    return np.eye(3) - 0.5 * s + c * s2


def se3_exp(twist) -> Pose:
    """Exponential map: twist [w, r] -> Pose(exp([w]x), V(w) @ r)."""
    t = np.asarray(twist, dtype=np.float64).reshape(6)
    w, rho = t[:3], t[3:]
    return Pose(orthonormalize_rotation(_so3_exp(w)), _so3_left_jacobian(w) @ rho)


def se3_log(pose: Pose) -> np.ndarray:
    """Logarithm map, inverse of :func:`se3_exp` for rotation angles < pi."""
    w = _so3_log(pose.rotation)
    rho = _so3_left_jacobian_inv(w) @ pose.translation
    return np.concatenate([w, rho])
