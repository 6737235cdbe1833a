"""Pinhole camera geometry, frustum tests, keyframe selection and view sampling.

Poses are world-from-camera: ``p_world = R @ p_cam + t``. The camera looks
down +z, with +x to the right and +y down in the image. Pixel ``(i, j)`` has
its centre at ``u = i, v = j`` and covers ``[i - 0.5, i + 0.5)``.
"""
from __future__ import annotations

from dataclasses import dataclass
from itertools import product
from pathlib import Path
from typing import Sequence

import numpy as np

DEFAULT_DEPTH_RANGE = (0.1, 3.0)
FRUSTUM_EPS = 1e-6


class GeometryError(ValueError):
    """Invalid camera geometry (degenerate direction, bad rotation, ...)."""


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise GeometryError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise GeometryError(
                f"principal point ({self.cx}, {self.cy}) outside {self.width}x{self.height} image")

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @classmethod
    def from_matrix(cls, K, width: int, height: int) -> Intrinsics:
        K = np.asarray(K, dtype=float)
        return cls(float(K[0, 0]), float(K[1, 1]), float(K[0, 2]), float(K[1, 2]), int(width), int(height))


@dataclass(frozen=True)
class Pose:
    R: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.R, dtype=float).reshape(3, 3)
        t = np.asarray(self.t, dtype=float).reshape(3)
        if not np.allclose(R.T @ R, np.eye(3), atol=1e-6) or abs(np.linalg.det(R) - 1) > 1e-6:
            raise GeometryError("rotation must be orthonormal with det(R) = 1")
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)

    @classmethod
    def identity(cls) -> Pose:
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, T) -> Pose:
        T = np.asarray(T, dtype=float)
        return cls(T[:3, :3], T[:3, 3])

    @property
    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.R
        T[:3, 3] = self.t
        return T

    @property
    def center(self) -> np.ndarray:
        return self.t

    def world_to_camera(self, pts: np.ndarray) -> np.ndarray:
        return (np.asarray(pts, dtype=float) - self.t) @ self.R

    def camera_to_world(self, pts: np.ndarray) -> np.ndarray:
        return np.asarray(pts, dtype=float) @ self.R.T + self.t


@dataclass(frozen=True)
class Aabb:
    min: np.ndarray
    max: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.min, dtype=float).reshape(3)
        hi = np.asarray(self.max, dtype=float).reshape(3)
        if np.any(lo > hi):
            raise GeometryError(f"box min {lo} exceeds max {hi}")
        object.__setattr__(self, "min", lo)
        object.__setattr__(self, "max", hi)

    @property
    def size(self) -> np.ndarray:
        return self.max - self.min

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.min + self.max)

    def corners(self) -> np.ndarray:
        lh = np.stack([self.min, self.max])
        return np.array([[lh[i, 0], lh[j, 1], lh[k, 2]] for i, j, k in product((0, 1), repeat=3)])

    def contains(self, pts: np.ndarray) -> np.ndarray:
        pts = np.asarray(pts, dtype=float)
        return np.all((pts >= self.min) & (pts <= self.max), axis=-1)


# -- projection -----------------------------------------------------------------

def project_points(K: Intrinsics, pose: Pose, pts) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorised :func:`project`: returns (u, v, depth) arrays.

    Points with depth <= 0 get NaN pixel coordinates.
    """
    cam = pose.world_to_camera(np.atleast_2d(pts))
    z = cam[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        safe = np.where(z > 0, z, np.nan)
        u = K.fx * cam[:, 0] / safe + K.cx
        v = K.fy * cam[:, 1] / safe + K.cy
    return u, v, z


def project(K: Intrinsics, pose: Pose, p) -> tuple[float, float, float]:
    """Pixel coordinates and camera-frame depth of one world point.

    For points behind the camera the depth is still returned; (u, v) are then
    computed from the (negative) depth and are meaningless.
    """
    cam = pose.world_to_camera(np.asarray(p, dtype=float).reshape(1, 3))[0]
    z = cam[2]
    if z == 0:
        return float("nan"), float("nan"), 0.0
    return float(K.fx * cam[0] / z + K.cx), float(K.fy * cam[1] / z + K.cy), float(z)


def backproject(K: Intrinsics, pose: Pose, u, v, depth) -> np.ndarray:
    """World point(s) at pixel (u, v) with camera-frame depth ``depth``."""
    u, v, depth = np.broadcast_arrays(np.asarray(u, float), np.asarray(v, float), np.asarray(depth, float))
    cam = np.stack([(u - K.cx) / K.fx * depth, (v - K.cy) / K.fy * depth, depth], axis=-1)
    return pose.camera_to_world(cam.reshape(-1, 3)).reshape(cam.shape)


def pixel_rays(K: Intrinsics, pose: Pose) -> np.ndarray:
    """Unit world-space ray directions through every pixel centre, shape (H, W, 3)."""
    vv, uu = np.mgrid[0:K.height, 0:K.width].astype(float)
    d = np.stack([(uu - K.cx) / K.fx, (vv - K.cy) / K.fy, np.ones_like(uu)], axis=-1)
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    return d @ pose.R.T


def camera_to_voxel(pose: Pose, voxel_centers) -> tuple[np.ndarray, np.ndarray]:
    """Unit world-frame direction from camera centre to each voxel, and camera-frame depth."""
    pts = np.asarray(voxel_centers, dtype=float)
    single = pts.ndim == 1
    pts = np.atleast_2d(pts)
    diff = pts - pose.center
    norm = np.linalg.norm(diff, axis=-1, keepdims=True)
    if np.any(norm < 1e-12):
        raise GeometryError("voxel centre coincides with the camera centre")
    dirs = diff / norm
    depth = (diff @ pose.R)[:, 2]
    if single:
        return dirs[0], depth[0]
    return dirs, depth


# -- frustum ------------------------------------------------------------------------

def frustum_corners(K: Intrinsics, pose: Pose, depth_range=DEFAULT_DEPTH_RANGE) -> np.ndarray:
    """Eight world-space corners, near plane first, each plane in image-corner order TL, TR, BR, BL."""
    w, h = K.width - 0.5, K.height - 0.5
    us = np.array([-0.5, w, w, -0.5])
    vs = np.array([-0.5, -0.5, h, h])
    corners = [backproject(K, pose, us, vs, np.full(4, d)) for d in depth_range]
    return np.concatenate(corners, axis=0)


def _separated(axis: np.ndarray, a: np.ndarray, b: np.ndarray, eps: float) -> bool:
    n = np.linalg.norm(axis)
    if n < 1e-9:
        return False
    axis = axis / n
    pa, pb = a @ axis, b @ axis
    return pa.max() < pb.min() - eps or pb.max() < pa.min() - eps


def frustum_intersects(K: Intrinsics, pose: Pose, depth_range, box: Aabb, eps: float = FRUSTUM_EPS) -> bool:
    """Separating-axis test between the truncated view pyramid and a box.

    Tests box face normals, frustum face normals and all cross products of
    edge directions, so it is exact up to ``eps`` (positive results within
    ``eps`` of touching are kept: the test never misses an overlap).
    """
    near, far = depth_range
    if not 0 < near < far:
        raise GeometryError(f"depth range must satisfy 0 < near < far, got {depth_range}")
    fc = frustum_corners(K, pose, depth_range)
    bc = box.corners()
    box_axes = list(np.eye(3))
    n0, f0 = fc[:4], fc[4:]
    lateral = [f0[i] - n0[i] for i in range(4)]
    cam_x, cam_y, cam_z = pose.R[:, 0], pose.R[:, 1], pose.R[:, 2]
    face_normals = [cam_z] + [np.cross(lateral[i], n0[(i + 1) % 4] - n0[i]) for i in range(4)]
    edge_dirs = lateral + [cam_x, cam_y]
    axes = box_axes + face_normals + [np.cross(a, e) for a in box_axes for e in edge_dirs]
    return not any(_separated(ax, fc, bc, eps) for ax in axes)


# -- view selection ----------------------------------------------------------------

def rotation_angle_deg(Ra: np.ndarray, Rb: np.ndarray) -> float:
    """Geodesic angle between two rotations, in degrees."""
    R = Ra.T @ Rb
    cos = (np.trace(R) - 1.0) / 2.0
    w = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    sin = np.linalg.norm(w) / 2.0
    return float(np.degrees(np.arctan2(sin, cos)))


def select_keyframes(poses: Sequence[Pose], r_max: float = 15.0, t_max: float = 0.1) -> list[int]:
    """Drop frames too close in pose to the last kept keyframe.

    Frame 0 is always kept; a later frame is kept when its rotation relative
    to the last keyframe exceeds ``r_max`` degrees or its translation exceeds
    ``t_max`` metres.
    """
    if len(poses) == 0:
        raise ValueError("select_keyframes needs at least one pose")
    keep = [0]
    last = poses[0]
    for i in range(1, len(poses)):
        p = poses[i]
        # tolerance absorbs rounding in trajectories built from exact angle steps
        rot = rotation_angle_deg(last.R, p.R) > r_max + 1e-9
        trans = np.linalg.norm(p.t - last.t) > t_max + 1e-12
        if rot or trans:
            keep.append(i)
            last = p
    return keep


def sample_views(cameras: Sequence[tuple[Intrinsics, Pose]], tile: Aabb, n: int,
                 rng: np.random.Generator, depth_range=DEFAULT_DEPTH_RANGE) -> np.ndarray:
    """Up to ``n`` indices of cameras whose frustum meets ``tile``, drawn without replacement.

    Returned indices are sorted. Empty when no frustum intersects the tile.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    hits = np.array([i for i, (K, pose) in enumerate(cameras)
                     if frustum_intersects(K, pose, depth_range, tile)], dtype=np.int64)
    if len(hits) <= n:
        return hits
    return np.sort(rng.choice(hits, size=n, replace=False))


# -- files ---------------------------------------------------------------------------

def read_pose(path) -> Pose:
    T = np.loadtxt(path, dtype=float)
    if T.shape != (4, 4):
        raise GeometryError(f"{path}: expected a 4x4 matrix, got shape {T.shape}")
    return Pose.from_matrix(T)


def write_pose(path, pose: Pose) -> None:
    np.savetxt(path, pose.matrix, fmt="%.9f")


def read_intrinsics(path, width: int, height: int) -> Intrinsics:
    K = np.loadtxt(path, dtype=float)
    if K.shape != (3, 3):
        raise GeometryError(f"{path}: expected a 3x3 matrix, got shape {K.shape}")
    return Intrinsics.from_matrix(K, width, height)


def write_intrinsics(path, K: Intrinsics) -> None:
    Path(path).write_text("\n".join(" ".join(f"{x:.9f}" for x in row) for row in K.matrix) + "\n")


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> Pose:
    """World-from-camera pose at ``eye`` looking toward ``target`` (image y points away from ``up``)."""
    eye = np.asarray(eye, dtype=float)
    z = np.asarray(target, dtype=float) - eye
    z /= np.linalg.norm(z)
    x = np.cross(z, np.asarray(up, dtype=float))
    if np.linalg.norm(x) < 1e-9:
        raise GeometryError("viewing direction parallel to up vector")
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    return Pose(np.stack([x, y, z], axis=1), eye)
