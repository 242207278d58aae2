"""Pinhole cameras (world-to-camera rigid transform + intrinsics).

Convention: x_cam = R(q) @ x_world + t, camera looks down +z, image u axis
right, v axis down.  Correction deltas are so(3) tangent vectors plus
translation offsets applied on the world-to-camera transform; the
differentiable application lives in the rasterizer.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import quats


@dataclass(frozen=True)
class Camera:
    rotation: np.ndarray  # (4,) unit quaternion, world -> camera
    translation: np.ndarray  # (3,)
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    near: float = 0.05

    def __post_init__(self):
        q = quats.normalize(np.asarray(self.rotation, np.float64).reshape(4))
        object.__setattr__(self, "rotation", q)
        object.__setattr__(self, "translation", np.asarray(self.translation, np.float64).reshape(3))
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be strictly positive")

    def world_to_cam(self, points: np.ndarray) -> np.ndarray:
        return quats.rotate(self.rotation, points) + self.translation

    def project(self, points: np.ndarray):
        """Project world points; returns (uv (N,2), depth (N,))."""
        pc = self.world_to_cam(np.atleast_2d(points))
        z = pc[:, 2]
        zs = np.where(np.abs(z) < 1e-9, 1e-9, z)
        u = self.fx * pc[:, 0] / zs + self.cx
        v = self.fy * pc[:, 1] / zs + self.cy
        return np.stack([u, v], axis=1), z

    def with_delta(self, rot_delta: np.ndarray, trans_delta: np.ndarray) -> "Camera":
        """Value-level application of a correction delta (left-composed rotation)."""
        dq = quats.from_axis_angle(np.asarray(rot_delta, np.float64))
        return replace(
            self,
            rotation=quats.normalize(quats.multiply(dq, self.rotation)),
            translation=self.translation + np.asarray(trans_delta, np.float64),
        )

    def resized(self, width: int, height: int) -> "Camera":
        sx, sy = width / self.width, height / self.height
        return replace(self, width=width, height=height, fx=self.fx * sx, fy=self.fy * sy, cx=self.cx * sx, cy=self.cy * sy)


def look_at(eye, target, up=(0.0, 1.0, 0.0), *, width=128, height=128, fov_deg=45.0, near=0.05) -> Camera:
    """Camera at `eye` looking toward `target`."""
    eye = np.asarray(eye, np.float64)
    target = np.asarray(target, np.float64)
    fwd = target - eye
    fwd = fwd / np.linalg.norm(fwd)
    upv = np.asarray(up, np.float64)
    right = np.cross(fwd, upv)
    if np.linalg.norm(right) < 1e-8:
        upv = np.array([0.0, 0.0, 1.0])
        right = np.cross(fwd, upv)
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    # camera axes: x=right, y=down (image v), z=forward
    R = np.stack([right, down, fwd], axis=0)
    q = quats.from_matrix(R)
    t = -R @ eye
    f = 0.5 * width / np.tan(np.deg2rad(fov_deg) / 2)
    fy = 0.5 * height / np.tan(np.deg2rad(fov_deg) / 2)
    return Camera(q, t, f, fy, width / 2, height / 2, width, height, near=near)


def orbit(target, radius: float, yaw: float, elevation: float = 0.0, **kwargs) -> Camera:
    """Camera on a horizontal circle around `target`; yaw 0 faces the +z side."""
    target = np.asarray(target, np.float64)
    eye = target + np.array([radius * np.sin(yaw), elevation, radius * np.cos(yaw)])
    return look_at(eye, target, **kwargs)


def canonical_ring(target, radius: float, **kwargs) -> list[Camera]:
    """Front/back/left/right orthogonal views of a subject at `target`."""
    return [orbit(target, radius, yaw, **kwargs) for yaw in (0.0, np.pi, np.pi / 2, -np.pi / 2)]
