"""
Rigid Geometry Primitives
Camera poses, pinhole intrinsics and SE(3) rigid transforms shared by the
dataset, NeRF and registration modules.
"""

from dataclasses import dataclass
from typing import Iterable, List, Tuple

import numpy as np

from .errors import InvalidArgumentError

ORTHONORMAL_TOL = 1e-9


def check_rotation(rotation: np.ndarray, tol: float = ORTHONORMAL_TOL, name: str = "rotation") -> np.ndarray:
    """Validate a 3x3 proper rotation and return it as float64."""
    R = np.asarray(rotation, dtype=np.float64)
    if R.shape != (3, 3):
        raise InvalidArgumentError(f"{name} must be 3x3, got {R.shape}")
    if not np.allclose(R.T @ R, np.eye(3), atol=tol) or abs(np.linalg.det(R) - 1.0) > tol:
        raise InvalidArgumentError(f"{name} is not a proper rotation matrix")
    return R


@dataclass(frozen=True)
class RigidTransform:
    """Rotation + translation with unit scale; maps x to R x + t."""
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=np.float64).reshape(3, 3))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64).reshape(3))

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, matrix) -> "RigidTransform":
        M = np.asarray(matrix, dtype=np.float64).reshape(4, 4)
        return cls(M[:3, :3], M[:3, 3])

    def matrix(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = self.rotation
        M[:3, 3] = self.translation
        return M

    def inverse(self) -> "RigidTransform":
        R_inv = self.rotation.T
        return RigidTransform(R_inv, -R_inv @ self.translation)

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """Return self ∘ other (apply other first)."""
        return RigidTransform(self.rotation @ other.rotation,
                              self.rotation @ other.translation + self.translation)

    def apply(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.rotation.T + self.translation

    def is_valid(self, tol: float = ORTHONORMAL_TOL) -> bool:
        try:
            check_rotation(self.rotation, tol)
        except InvalidArgumentError:
            return False
        return bool(np.all(np.isfinite(self.translation)))

    def to_list(self) -> List[float]:
        """Row-major 16 floats."""
        return [float(v) for v in self.matrix().reshape(-1)]


@dataclass(frozen=True)
class CameraPose:
    """Camera-to-world pose: world = rotation @ cam + center."""
    rotation: np.ndarray
    center: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=np.float64).reshape(3, 3))
        object.__setattr__(self, "center", np.asarray(self.center, dtype=np.float64).reshape(3))

    @classmethod
    def from_matrix(cls, matrix) -> "CameraPose":
        M = np.asarray(matrix, dtype=np.float64).reshape(4, 4)
        return cls(M[:3, :3], M[:3, 3])

    def matrix(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = self.rotation
        M[:3, 3] = self.center
        return M

    def transformed(self, transform: RigidTransform) -> "CameraPose":
        """Left-multiply the pose by a rigid transform (change of world frame)."""
        return CameraPose(transform.rotation @ self.rotation, transform.apply(self.center))

    def to_list(self) -> List[float]:
        return [float(v) for v in self.matrix().reshape(-1)]


@dataclass(frozen=True)
class Intrinsics:
    """Pinhole intrinsics in pixels."""
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise InvalidArgumentError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise InvalidArgumentError("principal point must lie inside the image")

    @classmethod
    def from_fov(cls, width: int, height: int, fov_degrees: float) -> "Intrinsics":
        """Square pixels, centered principal point, horizontal field of view."""
        focal = 0.5 * width / np.tan(0.5 * np.radians(fov_degrees))
        return cls(float(focal), float(focal), width / 2.0, height / 2.0, int(width), int(height))

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "w": self.width, "h": self.height}

    @classmethod
    def from_dict(cls, data: dict) -> "Intrinsics":
        return cls(float(data["fx"]), float(data["fy"]), float(data["cx"]), float(data["cy"]),
                   int(data["w"]), int(data["h"]))


def look_at(center, target=(0.0, 0.0, 0.0), up=(0.0, 0.0, 1.0)) -> CameraPose:
    """Pose at `center` whose -z axis points at `target`."""
    center = np.asarray(center, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - center
    norm = np.linalg.norm(forward)
    if norm < 1e-12:
        raise InvalidArgumentError("camera center coincides with the look-at target")
    forward /= norm
    right = np.cross(forward, np.asarray(up, dtype=np.float64))
    if np.linalg.norm(right) < 1e-9:
        raise InvalidArgumentError("viewing direction is parallel to the up vector")
    right /= np.linalg.norm(right)
    cam_up = np.cross(right, forward)
    rotation = np.stack([right, cam_up, -forward], axis=1)
    return CameraPose(rotation, center)


def camera_rays(pose: CameraPose, intr: Intrinsics) -> Tuple[np.ndarray, np.ndarray]:
    """
    World-space rays through every pixel center, row-major over the image.

    Returns:
        (origins, directions), each (height * width, 3); directions are unit length
    """
    u, v = np.meshgrid(np.arange(intr.width) + 0.5, np.arange(intr.height) + 0.5, indexing="xy")
    cam_dirs = np.stack([(u - intr.cx) / intr.fx, -(v - intr.cy) / intr.fy, -np.ones_like(u)], axis=-1)
    cam_dirs = cam_dirs.reshape(-1, 3)
    dirs = cam_dirs @ pose.rotation.T
    dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
    origins = np.broadcast_to(pose.center, dirs.shape).copy()
    return origins, dirs


def project(points, pose: CameraPose, intr: Intrinsics) -> np.ndarray:
    """Pixel coordinates (u, v) of world points; points must be in front of the camera."""
    cam = (np.asarray(points, dtype=np.float64) - pose.center) @ pose.rotation
    depth = -cam[..., 2]
    u = intr.fx * cam[..., 0] / depth + intr.cx
    v = -intr.fy * cam[..., 1] / depth + intr.cy
    return np.stack([u, v], axis=-1)


def camera_centers(poses: Iterable[CameraPose]) -> np.ndarray:
    centers = [p.center for p in poses]
    return np.stack(centers) if centers else np.zeros((0, 3))
