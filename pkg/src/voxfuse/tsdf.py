"""Depth-map TSDF fusion, ground-truth targets and training subcrops.

TSDF values are stored normalised by the truncation distance, in [-1, 1].
Accumulation is done in 2**-30 fixed point so that integrating the same
depth maps in any order gives bit-identical volumes.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from . import grid
from .geom import Aabb, Intrinsics, Pose, project_points
from .projective import MAX_DEPTH, nearest_pixel

TRUNCATION = 0.12
FIXED_ONE = 1 << 30
MIN_INCIDENCE_COSINE = 0.4
SUBCROP_SIZE = (96, 96, 48)
_ALIGN = 4  # fine voxels per coarse voxel


# -- depth maps on disk -----------------------------------------------------------

def read_depth_png(path) -> np.ndarray:
    """16-bit PNG in millimetres -> float32 metres (0 = invalid)."""
    arr = np.array(Image.open(path))
    return (arr.astype(np.float32) / 1000.0)


def write_depth_png(path, depth: np.ndarray) -> None:
    mm = np.clip(np.rint(np.nan_to_num(np.asarray(depth, float), nan=0.0) * 1000.0), 0, 65535).astype(np.uint16)
    Image.fromarray(mm).save(path)


# -- volume -----------------------------------------------------------------------------

def snap_bounds(bounds: Aabb, level: str = "fine") -> tuple[np.ndarray, tuple[int, int, int]]:
    """Origin key and shape of a fine-level block covering ``bounds``, aligned to coarse voxels."""
    s = grid.voxel_size(level)
    lo = np.floor(bounds.min / s / _ALIGN + 1e-9).astype(np.int64) * _ALIGN
    hi = np.ceil(bounds.max / s / _ALIGN - 1e-9).astype(np.int64) * _ALIGN
    shape = tuple(int(x) for x in np.maximum(hi - lo, 0))
    return lo, shape


@dataclass
class TsdfVolume:
    """Dense block of fine voxels addressed by the global voxel keys.

    ``origin_key`` is the key of array index (0, 0, 0); world centres follow
    the shared-origin convention of :mod:`voxfuse.grid`.
    """

    origin_key: np.ndarray
    shape: tuple[int, int, int]
    trunc: float = TRUNCATION
    level: str = "fine"
    tsdf_sum: np.ndarray = field(default=None, repr=False)
    weight: np.ndarray = field(default=None, repr=False)
    empty_columns: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        self.origin_key = np.asarray(self.origin_key, dtype=np.int64).reshape(3)
        self.shape = tuple(int(s) for s in self.shape)
        if self.tsdf_sum is None:
            self.tsdf_sum = np.zeros(self.shape, dtype=np.int64)
        if self.weight is None:
            self.weight = np.zeros(self.shape, dtype=np.int32)
        if self.empty_columns is None:
            self.empty_columns = np.zeros(self.shape, dtype=bool)

    @classmethod
    def covering(cls, bounds: Aabb, trunc: float = TRUNCATION, level: str = "fine") -> TsdfVolume:
        origin, shape = snap_bounds(bounds, level)
        return cls(origin, shape, trunc, level)

    @property
    def voxel_size(self) -> float:
        return grid.voxel_size(self.level)

    @property
    def observed(self) -> np.ndarray:
        return self.weight > 0

    @property
    def tsdf(self) -> np.ndarray:
        """Normalised TSDF; +1 where nothing was integrated."""
        out = np.ones(self.shape, dtype=np.float64)
        obs = self.weight > 0
        out[obs] = self.tsdf_sum[obs] / (self.weight[obs].astype(np.float64) * FIXED_ONE)
        return out

    def keys(self) -> np.ndarray:
        idx = np.stack(np.meshgrid(*[np.arange(n) for n in self.shape], indexing="ij"), axis=-1)
        return idx.reshape(-1, 3) + self.origin_key

    def centers(self) -> np.ndarray:
        return grid.key_to_center(self.keys(), self.level)

    def bounds(self) -> Aabb:
        s = self.voxel_size
        return Aabb(self.origin_key * s, (self.origin_key + np.array(self.shape)) * s)

    def to_sparse(self) -> grid.SparseVoxelGrid:
        """Observed voxels as a sparse grid with payload columns (tsdf, weight)."""
        obs = self.observed.reshape(-1)
        vals = np.stack([self.tsdf.reshape(-1), self.weight.reshape(-1).astype(np.float64)], axis=-1)
        return grid.SparseVoxelGrid(self.keys()[obs], vals[obs], self.level)

    def dump(self, path) -> None:
        self.to_sparse().dump(path)


def incidence_cosine(depth: np.ndarray, K: Intrinsics, max_jump: float = 0.1) -> np.ndarray:
    """Per-pixel |cos| between the viewing ray and the surface normal of a depth map.

    Normals come from central differences of the back-projected points. Pixels
    without a usable normal (border, invalid neighbour, depth jump larger than
    ``max_jump`` times the depth) get 1.
    """
    depth = np.asarray(depth, dtype=np.float64)
    h, w = depth.shape
    vv, uu = np.mgrid[0:h, 0:w].astype(np.float64)
    pts = np.stack([(uu - K.cx) / K.fx * depth, (vv - K.cy) / K.fy * depth, depth], axis=-1)
    valid = depth > 0
    dx = np.zeros_like(pts)
    dy = np.zeros_like(pts)
    dx[:, 1:-1] = pts[:, 2:] - pts[:, :-2]
    dy[1:-1] = pts[2:] - pts[:-2]
    ok = np.zeros_like(valid)
    ok[1:-1, 1:-1] = (valid[1:-1, 2:] & valid[1:-1, :-2] & valid[2:, 1:-1] & valid[:-2, 1:-1]
                      & valid[1:-1, 1:-1])
    jump = np.maximum(np.abs(dx[..., 2]), np.abs(dy[..., 2])) > max_jump * np.maximum(depth, 1e-9)
    n = np.cross(dx, dy)
    norm = np.linalg.norm(n, axis=-1)
    ok &= ~jump & (norm > 0)
    ray = pts / np.maximum(np.linalg.norm(pts, axis=-1, keepdims=True), 1e-12)
    cos = np.abs((n * ray).sum(-1)) / np.maximum(norm, 1e-300)
    return np.where(ok, cos, 1.0)


def integrate_depth(vol: TsdfVolume, depth: np.ndarray, K: Intrinsics, pose: Pose,
                    max_depth: float = MAX_DEPTH, distance: str = "plane",
                    min_cosine: float = MIN_INCIDENCE_COSINE) -> None:
    """Fuse one depth map (metres, 0 = invalid) into ``vol`` in place.

    For each voxel whose nearest pixel holds a depth ``d`` in (0, max_depth],
    the projective distance ``s = d - d_v`` is formed. With
    ``distance="plane"`` (default) it is converted to the distance to the
    local tangent plane (ray length times the incidence cosine), and
    pixels seen at a cosine below ``min_cosine`` are ignored;
    ``distance="projective"`` uses ``s`` unchanged. Voxels with ``s > -t``
    gain one unit of weight and add ``clamp(s / t, -1, 1)``; voxels further
    behind the surface are left untouched.
    """
    if distance not in ("plane", "projective"):
        raise ValueError(f"unknown distance mode {distance!r}")
    depth = np.asarray(depth, dtype=np.float64)
    h, w = depth.shape
    u, v, d_v = project_points(K, pose, vol.centers())
    iu, iv = nearest_pixel(u, v)
    ok = (d_v > 0) & (iu >= 0) & (iu < w) & (iv >= 0) & (iv < h)
    idx = np.flatnonzero(ok)
    iu, iv = iu[idx], iv[idx]
    d = depth[iv, iu]
    good = (d > 0) & (d <= max_depth)
    s = d - d_v[idx]
    if distance == "plane":
        cos = incidence_cosine(depth, K)[iv, iu]
        good &= cos >= min_cosine
        # s is a z-depth difference: convert to ray length, then project onto the normal
        axis_cos = 1.0 / np.sqrt(((iu - K.cx) / K.fx) ** 2 + ((iv - K.cy) / K.fy) ** 2 + 1.0)
        s = s * cos / axis_cos
    keep = good & (s > -vol.trunc)
    idx, s = idx[keep], s[keep]
    val = np.rint(np.clip(s / vol.trunc, -1.0, 1.0) * FIXED_ONE).astype(np.int64)
    flat_sum = vol.tsdf_sum.reshape(-1)
    flat_w = vol.weight.reshape(-1)
    flat_sum[idx] += val
    flat_w[idx] += 1


def mask_unobserved_columns(vol: TsdfVolume) -> None:
    """Mark every (x, y) column with no observed voxel as known empty space.

    The gravity axis is the grid z axis. Those voxels read as tsdf = +1 (the
    default for unobserved voxels) and are flagged in ``vol.empty_columns``.
    """
    col_seen = vol.observed.any(axis=2)
    vol.empty_columns[:] = ~col_seen[:, :, None]


# -- ground truth ----------------------------------------------------------------------

@dataclass
class LevelTarget:
    """Dense per-level targets on a block starting at ``origin_key``."""

    level: str
    origin_key: np.ndarray
    occupied: np.ndarray
    known: np.ndarray

    def to_sparse(self) -> grid.SparseVoxelGrid:
        keys = np.argwhere(self.known) + self.origin_key
        return grid.SparseVoxelGrid(keys, self.occupied[self.known], self.level)


@dataclass
class GroundTruth:
    volume: TsdfVolume
    levels: dict[str, LevelTarget]

    @property
    def tsdf(self) -> np.ndarray:
        return self.volume.tsdf

    @property
    def known(self) -> np.ndarray:
        return self.levels["fine"].known


def fine_occupancy(vol: TsdfVolume) -> np.ndarray:
    """Voxels within the truncation band of an observed surface: ``observed & |tsdf| < 1``."""
    return vol.observed & (np.abs(vol.tsdf) < 1.0)


def _dense_downsample(target: LevelTarget) -> LevelTarget:
    """Coarser level via :func:`grid.downsample_occupancy` on the occupied set."""
    level = grid.coarser(target.level)
    shape = tuple(s // 2 for s in target.occupied.shape)
    origin = target.origin_key // 2
    occ = np.zeros(shape, dtype=bool)
    keys = np.argwhere(target.occupied) + target.origin_key
    if len(keys):
        down = grid.downsample_occupancy(grid.SparseVoxelGrid(keys, np.ones(len(keys), bool), target.level))
        idx = down.keys - origin
        occ[tuple(idx.T)] = down.values
    k = target.known
    known = k.reshape(shape[0], 2, shape[1], 2, shape[2], 2).any(axis=(1, 3, 5))
    return LevelTarget(level, origin, occ, known)


def make_gt(depths: Sequence[np.ndarray], cameras: Sequence[tuple[Intrinsics, Pose]], bounds: Aabb,
            trunc: float = TRUNCATION, max_depth: float = MAX_DEPTH) -> GroundTruth:
    """Fine TSDF plus fine/medium/coarse occupancy targets for one scene."""
    vol = TsdfVolume.covering(bounds, trunc)
    for depth, (K, pose) in zip(depths, cameras):
        integrate_depth(vol, depth, K, pose, max_depth)
    if len(depths):
        mask_unobserved_columns(vol)
    fine = LevelTarget("fine", vol.origin_key, fine_occupancy(vol), vol.observed | vol.empty_columns)
    medium = _dense_downsample(fine)
    coarse = _dense_downsample(medium)
    return GroundTruth(vol, {"coarse": coarse, "medium": medium, "fine": fine})


def save_gt(gt: GroundTruth, path) -> None:
    vol = gt.volume
    np.savez_compressed(
        path, origin_key=vol.origin_key, trunc=vol.trunc, tsdf_sum=vol.tsdf_sum, weight=vol.weight,
        empty_columns=vol.empty_columns)


def load_gt(path) -> GroundTruth:
    z = np.load(path)
    vol = TsdfVolume(z["origin_key"], z["weight"].shape, float(z["trunc"]), "fine",
                     z["tsdf_sum"], z["weight"], z["empty_columns"])
    fine = LevelTarget("fine", vol.origin_key, fine_occupancy(vol), vol.observed | vol.empty_columns)
    medium = _dense_downsample(fine)
    return GroundTruth(vol, {"coarse": _dense_downsample(medium), "medium": medium, "fine": fine})


# -- subcrops and augmentation ------------------------------------------------------------

@dataclass
class Subcrop:
    """Cropped, augmented targets plus the world -> crop transform ``x' = A x + b``.

    In crop coordinates voxel ``(0, 0, 0)`` of every level sits at the origin,
    so crop keys are plain array indices.
    """

    tsdf: np.ndarray
    levels: dict[str, LevelTarget]
    A: np.ndarray
    b: np.ndarray
    reflect: bool
    size: tuple[int, int, int]

    def transform_points(self, pts) -> np.ndarray:
        return np.asarray(pts, float) @ self.A.T + self.b

    def transform_camera(self, K: Intrinsics, pose: Pose) -> tuple[Intrinsics, Pose]:
        """Camera in crop coordinates; a reflection also mirrors the image horizontally."""
        if not self.reflect:
            return K, Pose(self.A @ pose.R, self.A @ pose.t + self.b)
        F = np.diag([-1.0, 1.0, 1.0])
        K2 = Intrinsics(K.fx, K.fy, K.width - 1 - K.cx, K.cy, K.width, K.height)
        return K2, Pose(self.A @ pose.R @ F, self.A @ pose.t + self.b)

    def transform_image(self, img: np.ndarray) -> np.ndarray:
        return np.ascontiguousarray(img[:, ::-1]) if self.reflect else img


def _augment_array(arr: np.ndarray, reflect: bool, k: int) -> np.ndarray:
    if reflect:
        arr = arr[::-1]
    return np.ascontiguousarray(np.rot90(arr, k, axes=(0, 1)))


def _augment_transform(extent: np.ndarray, reflect: bool, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Affine map of crop-local metric coordinates matching :func:`_augment_array`."""
    A = np.eye(3)
    b = np.zeros(3)
    ext = extent.astype(float).copy()
    if reflect:
        A = np.diag([-1.0, 1.0, 1.0]) @ A
        b = np.array([ext[0], 0.0, 0.0]) + np.diag([-1.0, 1.0, 1.0]) @ b
    rot = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    for _ in range(k % 4):
        # array rot90 on axes (0, 1): (x, y) -> (Ly - y, x)
        A = rot @ A
        b = rot @ b + np.array([ext[1], 0.0, 0.0])
        ext = ext[[1, 0, 2]]
    return A, b


def _crop_block(arr: np.ndarray, start: np.ndarray, size, fill) -> np.ndarray:
    out = np.full(tuple(size), fill, dtype=arr.dtype)
    stop = np.minimum(start + np.array(size), arr.shape)
    n = stop - start
    out[:n[0], :n[1], :n[2]] = arr[start[0]:stop[0], start[1]:stop[1], start[2]:stop[2]]
    return out


def random_subcrop(gt: GroundTruth, rng: np.random.Generator, size=SUBCROP_SIZE,
                   augment: bool = True, reflect: bool | None = None, rotations: int | None = None) -> Subcrop:
    """Random coarse-aligned crop of ``size`` fine voxels with optional reflection / z-rotation.

    Crop origins are drawn uniformly among placements aligned to coarse
    voxels, so the three levels stay nested. Parts of the crop beyond the
    scene are padded as unknown. ``reflect`` / ``rotations`` override the
    random augmentation draw.
    """
    size = np.asarray(size, dtype=np.int64)
    if np.any(size % _ALIGN):
        raise ValueError(f"crop size must be a multiple of {_ALIGN} fine voxels")
    fine = gt.levels["fine"]
    shape = np.array(fine.occupied.shape)
    slack = np.maximum(shape - size, 0) // _ALIGN
    start = np.array([rng.integers(0, s + 1) for s in slack]) * _ALIGN
    if augment:
        do_reflect = bool(rng.integers(0, 2)) if reflect is None else reflect
        k = int(rng.integers(0, 4)) if rotations is None else rotations
    else:
        do_reflect = bool(reflect) if reflect is not None else False
        k = rotations or 0

    tsdf = _augment_array(_crop_block(gt.tsdf, start, size, 1.0), do_reflect, k)
    levels = {}
    for name, lt in gt.levels.items():
        f = 1 << (2 - grid.LEVELS.index(name))  # fine voxels per voxel at this level
        st, sz = start // f, size // f
        occ = _augment_array(_crop_block(lt.occupied, st, sz, False), do_reflect, k)
        known = _augment_array(_crop_block(lt.known, st, sz, False), do_reflect, k)
        levels[name] = LevelTarget(name, np.zeros(3, np.int64), occ, known)

    vs = grid.voxel_size("fine")
    crop_origin = (fine.origin_key + start) * vs
    A, b_local = _augment_transform(size * vs, do_reflect, k)
    b = b_local - A @ crop_origin
    out_size = tuple(int(x) for x in tsdf.shape)
    return Subcrop(tsdf, levels, A, b, do_reflect, out_size)
