"""Projective SDF, projective occupancy and visibility targets.

For a voxel seen by one camera, the projective SDF is the observed surface
depth at the voxel's (nearest) pixel minus the voxel's own camera depth.
Targets are tri-state: 1, 0, or -1 for "not supervised" (voxel off-image,
behind the camera, or on a pixel without a usable depth).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geom import Intrinsics, Pose, project_points

MAX_DEPTH = 3.0
UNSUPERVISED = -1


@dataclass(frozen=True)
class ProjectiveSample:
    S: float
    d: float
    d_v: float
    valid: bool


def nearest_pixel(u: np.ndarray, v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Round half up to the nearest pixel index; NaN maps to -1."""
    with np.errstate(invalid="ignore"):
        iu = np.where(np.isfinite(u), np.floor(u + 0.5), -1).astype(np.int64)
        iv = np.where(np.isfinite(v), np.floor(v + 0.5), -1).astype(np.int64)
    return iu, iv


def projective_sdf_batch(depth: np.ndarray, K: Intrinsics, pose: Pose, centers,
                         max_depth: float = MAX_DEPTH) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Vectorised projective SDF: returns ``(S, d, d_v, valid)`` arrays.

    ``S`` and ``d`` are NaN where ``valid`` is false.
    """
    depth = np.asarray(depth)
    h, w = depth.shape
    u, v, d_v = project_points(K, pose, centers)
    iu, iv = nearest_pixel(u, v)
    inside = (d_v > 0) & (iu >= 0) & (iu < w) & (iv >= 0) & (iv < h)
    d = np.full(d_v.shape, np.nan)
    d[inside] = depth[iv[inside], iu[inside]]
    valid = inside & (d > 0) & (d <= max_depth)
    S = np.where(valid, d - d_v, np.nan)
    d = np.where(valid, d, np.nan)
    return S, d, d_v, valid


def projective_sdf(depth: np.ndarray, K: Intrinsics, pose: Pose, voxel_center,
                   max_depth: float = MAX_DEPTH) -> ProjectiveSample:
    S, d, d_v, valid = projective_sdf_batch(depth, K, pose, np.asarray(voxel_center, float).reshape(1, 3), max_depth)
    return ProjectiveSample(float(S[0]), float(d[0]), float(d_v[0]), bool(valid[0]))


def occupancy_from_sdf(S: np.ndarray, valid: np.ndarray, t: float) -> np.ndarray:
    """1 where ``|S| < t``, 0 where ``|S| >= t``, -1 where not valid."""
    if t <= 0:
        raise ValueError("truncation must be positive")
    with np.errstate(invalid="ignore"):
        occ = (np.abs(S) < t).astype(np.int8)
    return np.where(valid, occ, UNSUPERVISED).astype(np.int8)


def visibility_from_sdf(S: np.ndarray, valid: np.ndarray, t: float) -> np.ndarray:
    """1 where ``S > -t`` (free space in front of the surface, or inside the band), else 0; -1 where not valid."""
    if t <= 0:
        raise ValueError("truncation must be positive")
    with np.errstate(invalid="ignore"):
        vis = (S > -t).astype(np.int8)
    return np.where(valid, vis, UNSUPERVISED).astype(np.int8)


def projective_occupancy(sample: ProjectiveSample, t: float) -> int | None:
    """1 or 0 for a valid sample; ``None`` when the sample is excluded from supervision."""
    out = occupancy_from_sdf(np.array([sample.S]), np.array([sample.valid]), t)[0]
    return None if out == UNSUPERVISED else int(out)


def visibility(sample: ProjectiveSample, t: float) -> int | None:
    out = visibility_from_sdf(np.array([sample.S]), np.array([sample.valid]), t)[0]
    return None if out == UNSUPERVISED else int(out)
