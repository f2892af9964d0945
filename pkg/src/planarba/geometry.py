"""Pinhole projection, rigid transforms, and robust-cost kernels.

Conventions used throughout the package:

- Camera frame: x right, y down, z forward (optical axis). A point is in
  front of the camera iff its camera-frame z coordinate is positive.
- Pixel coordinates: x along image width, y along height; integer
  coordinates are pixel centers; origin is the top-left pixel center.
- A pose is a rotation matrix plus a translation vector. Whether it maps
  world->camera or camera->world is stated at every point of use; nothing
  in this module assumes one direction globally.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

# Uncertainty values are clamped below 1 so the (1 - u) information weight
# stays positive and 1/(1 - u) stays finite.
U_MAX = 0.99

# Default Huber threshold for pixel-domain residual energies.
HUBER_DELTA = 1.345


class PointBehindCamera(ValueError):
    """Raised when projecting a point whose camera-frame depth is <= 0."""


class InvalidDepth(ValueError):
    """Raised when back-projecting with a non-positive depth."""


@dataclass(frozen=True)
class Intrinsics:
    """Pinhole camera intrinsics (no distortion)."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if not (0 < self.cx < self.width) or not (0 < self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx],
                         [0.0, self.fy, self.cy],
                         [0.0, 0.0, 1.0]])

    def inv_matrix(self) -> np.ndarray:
        return np.array([[1.0 / self.fx, 0.0, -self.cx / self.fx],
                         [0.0, 1.0 / self.fy, -self.cy / self.fy],
                         [0.0, 0.0, 1.0]])

    def contains(self, pixel) -> bool:
        x, y = float(pixel[0]), float(pixel[1])
        return 0.0 <= x <= self.width - 1 and 0.0 <= y <= self.height - 1


def skew(v: np.ndarray) -> np.ndarray:
    """Cross-product matrix: skew(v) @ w == cross(v, w)."""
    return np.array([[0.0, -v[2], v[1]],
                     [v[2], 0.0, -v[0]],
                     [-v[1], v[0], 0.0]])


def so3_exp(w: np.ndarray) -> np.ndarray:
    """Rotation matrix from a rotation vector (Rodrigues)."""
    w = np.asarray(w, dtype=float)
    theta = float(np.linalg.norm(w))
    S = skew(w)
    if theta < 1e-10:
        # second-order series; accurate and stable near identity
        return np.eye(3) + S + 0.5 * (S @ S)
    return (np.eye(3)
            + S * (math.sin(theta) / theta)
            + (S @ S) * ((1.0 - math.cos(theta)) / theta ** 2))


def so3_log(R: np.ndarray) -> np.ndarray:
    """Rotation vector from a rotation matrix; inverse of so3_exp."""
    R = np.asarray(R, dtype=float)
    cos_theta = float(np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0))
    theta = math.acos(cos_theta)
    if theta < 1e-10:
        return np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]]) / 2.0
    if theta > math.pi - 1e-6:
        # near pi the antisymmetric part degenerates; recover axis from R + I
        A = (R + np.eye(3)) / 2.0
        axis = np.sqrt(np.clip(np.diag(A), 0.0, None))
        # fix signs using the largest component
        k = int(np.argmax(axis))
        if axis[k] > 0:
            for i in range(3):
                if i != k and A[k, i] < 0:
                    axis[i] = -axis[i]
        axis = axis / np.linalg.norm(axis)
        return theta * axis
    v = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    return v * (theta / (2.0 * math.sin(theta)))


def orthonormalize_rotation(R: np.ndarray) -> np.ndarray:
    """Project a near-rotation matrix back onto SO(3)."""
    U, _, Vt = np.linalg.svd(R)
    D = np.eye(3)
    if np.linalg.det(U @ Vt) < 0:
        D[2, 2] = -1.0
    return U @ D @ Vt


@dataclass
class Pose:
    """Rigid transform X_out = rotation @ X_in + translation."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=float)
        self.translation = np.asarray(self.translation, dtype=float).reshape(3)
        err = float(np.abs(self.rotation.T @ self.rotation - np.eye(3)).max())
        if err > 1e-6:
            raise ValueError(f"rotation is not orthonormal (max deviation {err:.3e})")
        if np.linalg.det(self.rotation) < 0:
            raise ValueError("rotation has negative determinant")

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    def transform(self, points: np.ndarray) -> np.ndarray:
        """Apply to a (3,) point or (N, 3) array of points."""
        p = np.asarray(points, dtype=float)
        if p.ndim == 1:
            return self.rotation @ p + self.translation
        return p @ self.rotation.T + self.translation

    def compose(self, other: "Pose") -> "Pose":
        """self after other: (self o other)(x) = self(other(x))."""
        return Pose(self.rotation @ other.rotation,
                    self.rotation @ other.translation + self.translation)

    def inverse(self) -> "Pose":
        Rt = self.rotation.T
        return Pose(Rt, -Rt @ self.translation)

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T

    def copy(self) -> "Pose":
        return Pose(self.rotation.copy(), self.translation.copy())

    def orthonormalized(self) -> "Pose":
        return Pose(orthonormalize_rotation(self.rotation), self.translation.copy())


@dataclass(frozen=True)
class GravityVector:
    """Unit 'down' direction in world coordinates."""

    direction: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.direction, dtype=float).reshape(3)
        n = float(np.linalg.norm(d))
        if abs(n - 1.0) > 1e-9:
            raise ValueError(f"gravity direction must be unit norm, got |g|={n}")
        object.__setattr__(self, "direction", d)


@dataclass
class MapPoint:
    """A 3D landmark with an optionally fused surface normal.

    ``last_observed_distance`` is the camera-to-point distance of the most
    recent depth observation that contributed to the normal.
    """

    id: int
    position: np.ndarray
    normal: Optional[np.ndarray] = None
    last_observed_distance: float = 0.0

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=float).reshape(3)
        if self.normal is not None:
            self.normal = np.asarray(self.normal, dtype=float).reshape(3)
            n = float(np.linalg.norm(self.normal))
            if abs(n - 1.0) > 1e-6:
                raise ValueError(f"map point normal must be unit norm, got {n}")
            if self.last_observed_distance <= 0:
                raise ValueError("a fused normal requires a positive observation distance")


@dataclass(frozen=True)
class Observation:
    """A 2D keypoint measurement of a map point in one frame."""

    frame_id: int
    point_id: int
    pixel: np.ndarray
    uncertainty: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "pixel", np.asarray(self.pixel, dtype=float).reshape(2))
        u = float(self.uncertainty)
        if not (0.0 <= u <= U_MAX):
            raise ValueError(f"observation uncertainty must lie in [0, {U_MAX}], got {u}")


def transform_point(rotation: np.ndarray, translation: np.ndarray, point: np.ndarray) -> np.ndarray:
    """rotation @ point + translation, accumulated column-wise.

    Column-wise accumulation keeps the floating-point operation order
    identical to a scalar left-to-right evaluation, which the cost
    reference checks rely on.
    """
    return (rotation[:, 0] * point[0] + rotation[:, 1] * point[1]
            + rotation[:, 2] * point[2] + translation)


def project(point: np.ndarray, intrinsics: Intrinsics) -> np.ndarray:
    """Project a camera-frame point to pixel coordinates.

    Raises PointBehindCamera if the point's z is not positive.
    """
    x, y, z = float(point[0]), float(point[1]), float(point[2])
    if z <= 0.0:
        raise PointBehindCamera(f"point has non-positive depth z={z}")
    return np.array([intrinsics.fx * x / z + intrinsics.cx,
                     intrinsics.fy * y / z + intrinsics.cy])


def unproject(pixel: np.ndarray, depth: float, intrinsics: Intrinsics) -> np.ndarray:
    """Back-project a pixel at a given depth into the camera frame."""
    if depth <= 0.0:
        raise InvalidDepth(f"depth must be positive, got {depth}")
    x = (float(pixel[0]) - intrinsics.cx) / intrinsics.fx
    y = (float(pixel[1]) - intrinsics.cy) / intrinsics.fy
    return np.array([depth * x, depth * y, depth])


def reprojection_residual(pose_world_to_cam: Pose, point_world: np.ndarray,
                          pixel_obs: np.ndarray, intrinsics: Intrinsics) -> np.ndarray:
    """Observation minus predicted projection, in pixels.

    Raises PointBehindCamera when the transformed point is not in front of
    the camera; callers that accumulate costs catch this and count the
    exclusion.
    """
    p_cam = transform_point(pose_world_to_cam.rotation, pose_world_to_cam.translation,
                            np.asarray(point_world, dtype=float))
    proj = project(p_cam, intrinsics)
    return np.asarray(pixel_obs, dtype=float) - proj


def huber(energy: float, delta: float = HUBER_DELTA) -> float:
    """Robust cost of a squared residual energy.

    Quadratic (identity) for energy <= delta^2, linear in the residual
    magnitude above; continuous with continuous first derivative at the
    threshold.
    """
    if energy < 0.0:
        raise ValueError(f"huber is defined for non-negative energies, got {energy}")
    d2 = delta * delta
    if energy <= d2:
        return energy
    return 2.0 * delta * math.sqrt(energy) - d2


def huber_weight(energy: float, delta: float = HUBER_DELTA) -> float:
    """d huber / d energy; the IRLS weight for Gauss-Newton."""
    d2 = delta * delta
    if energy <= d2:
        return 1.0
    return delta / math.sqrt(energy)


def huber_array(energy: np.ndarray, delta: float) -> np.ndarray:
    """Vectorized huber() over an array of energies."""
    e = np.asarray(energy, dtype=float)
    d2 = delta * delta
    out = np.where(e <= d2, e, 2.0 * delta * np.sqrt(np.maximum(e, 0.0)) - d2)
    return out


def huber_weight_array(energy: np.ndarray, delta: float) -> np.ndarray:
    """Vectorized huber_weight() over an array of energies."""
    e = np.asarray(energy, dtype=float)
    d2 = delta * delta
    with np.errstate(divide="ignore"):
        w = np.where(e <= d2, 1.0, delta / np.sqrt(np.maximum(e, d2)))
    return w


def angle_between(a: np.ndarray, b: np.ndarray) -> float:
    """Angle in radians between two vectors (not assumed unit)."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    c = float(np.dot(a, b) / (np.linalg.norm(a) * np.linalg.norm(b)))
    return math.acos(np.clip(c, -1.0, 1.0))
