"""Pinhole multi-camera rig and 3D box projection.

World frame: x forward, y left, z up (metres). Camera frame: x right,
y down, z forward (the optical axis), so depth is the camera z coordinate.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

EPS_DEPTH = 0.1


@dataclass(frozen=True)
class Camera:
    extrinsic: np.ndarray  # 4x4 world -> camera
    intrinsic: np.ndarray  # 3x3
    width: int
    height: int

    def __post_init__(self):
        ext = np.asarray(self.extrinsic, dtype=np.float64)
        K = np.asarray(self.intrinsic, dtype=np.float64)
        if ext.shape != (4, 4) or K.shape != (3, 3):
            raise ValueError("extrinsic must be 4x4 and intrinsic 3x3")
        R = ext[:3, :3]
        if not np.allclose(R @ R.T, np.eye(3), atol=1e-9) or np.linalg.det(R) < 0:
            raise ValueError("extrinsic rotation must be orthonormal with det +1")
        if not np.allclose(ext[3], [0, 0, 0, 1]):
            raise ValueError("extrinsic last row must be (0, 0, 0, 1)")
        if K[0, 0] <= 0 or K[1, 1] <= 0 or K[0, 1] != 0:
            raise ValueError("intrinsic needs fx, fy > 0 and zero skew")
        object.__setattr__(self, "extrinsic", ext)
        object.__setattr__(self, "intrinsic", K)

    @classmethod
    def from_pose(cls, position, yaw: float, fx: float, fy: float, width: int, height: int) -> "Camera":
        """Horizontal camera at ``position`` looking along world heading ``yaw``."""
        c, s = np.cos(yaw), np.sin(yaw)
        # rows: camera x (right), y (down), z (forward) in world coordinates
        R = np.array([[s, -c, 0.0], [0.0, 0.0, -1.0], [c, s, 0.0]])
        ext = np.eye(4)
        ext[:3, :3] = R
        ext[:3, 3] = -R @ np.asarray(position, dtype=np.float64)
        K = np.array([[fx, 0.0, width / 2.0], [0.0, fy, height / 2.0], [0.0, 0.0, 1.0]])
        return cls(ext, K, width, height)


@dataclass(frozen=True)
class Box3D:
    center: tuple[float, float, float]
    size: tuple[float, float, float]  # length (along heading), width, height
    yaw: float
    class_id: int = 0

    def __post_init__(self):
        if min(self.size) <= 0:
            raise ValueError("box sizes must be positive")
        if not -np.pi < self.yaw <= np.pi:
            raise ValueError("yaw must lie in (-pi, pi]")


@dataclass(frozen=True)
class CropRect:
    camera: int
    u_min: float
    v_min: float
    u_max: float
    v_max: float
    depth: float

    @property
    def width(self) -> float:
        return self.u_max - self.u_min

    @property
    def area(self) -> float:
        return (self.u_max - self.u_min) * (self.v_max - self.v_min)


# corner i has local signs CORNER_SIGNS[i] along (length, width, height)
CORNER_SIGNS = np.array(list(itertools.product((-1, 1), repeat=3)), dtype=np.float64)


def _yaw_matrix(yaw: float) -> np.ndarray:
    c, s = np.cos(yaw), np.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def box_corners(box: Box3D) -> np.ndarray:
    """The 8 corners (8 x 3), ordered as ``CORNER_SIGNS``: (-,-,-), (-,-,+), ..., (+,+,+)."""
    local = CORNER_SIGNS * (np.asarray(box.size) / 2.0)
    return local @ _yaw_matrix(box.yaw).T + np.asarray(box.center)


def project_to_camera(points, cam: Camera) -> tuple[np.ndarray, np.ndarray]:
    """Project world points; returns (N x 3 array of u, v, depth) and a validity mask.

    Points with depth <= EPS_DEPTH are flagged invalid (their u, v are NaN).
    """
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    p_cam = pts @ cam.extrinsic[:3, :3].T + cam.extrinsic[:3, 3]
    depth = p_cam[:, 2]
    valid = depth > EPS_DEPTH
    uvw = p_cam @ cam.intrinsic.T
    out = np.full((len(pts), 3), np.nan)
    out[:, 2] = depth
    out[valid, 0] = uvw[valid, 0] / depth[valid]
    out[valid, 1] = uvw[valid, 1] / depth[valid]
    return out, valid


def crop_rect(box: Box3D, cam: Camera, camera_index: int = 0) -> CropRect | None:
    uvd, valid = project_to_camera(box_corners(box), cam)
    if valid.sum() < 2:
        return None
    uv = uvd[valid, :2]
    u0 = float(np.clip(uv[:, 0].min(), 0, cam.width))
    u1 = float(np.clip(uv[:, 0].max(), 0, cam.width))
    v0 = float(np.clip(uv[:, 1].min(), 0, cam.height))
    v1 = float(np.clip(uv[:, 1].max(), 0, cam.height))
    if u1 <= u0 or v1 <= v0 or (u1 - u0) * (v1 - v0) < 1.0:
        return None
    return CropRect(camera_index, u0, v0, u1, v1, float(uvd[valid, 2].mean()))


def flatten_extrinsics(rig) -> np.ndarray:
    if len(rig) < 1:
        raise ValueError("rig needs at least one camera")
    return np.stack([cam.extrinsic.reshape(16) for cam in rig])


def unflatten_extrinsics(E: np.ndarray) -> np.ndarray:
    return np.asarray(E, dtype=np.float64).reshape(-1, 4, 4)


def default_rig(
    n_cameras: int = 6,
    height: float = 1.5,
    width_px: int = 800,
    height_px: int = 450,
    hfov_deg: float = 70.0,
) -> list[Camera]:
    """Cameras evenly spaced in heading around the ego origin."""
    f = width_px / (2.0 * np.tan(np.radians(hfov_deg) / 2.0))
    return [
        Camera.from_pose((0.0, 0.0, height), 2 * np.pi * i / n_cameras, f, f, width_px, height_px)
        for i in range(n_cameras)
    ]
