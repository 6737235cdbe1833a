"""Coarse-to-fine inference over a scene.

Every resolution is processed tile by tile for view sampling and fusion,
then the level's sparse CNN runs once over the merged active set. Voxels
predicted occupied are refined at the next level; the fine level's TSDF is
meshed with marching cubes.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import grid
from ..geom import Aabb, sample_views, select_keyframes
from ..nn import sigmoid
from ..surface import TriMesh, marching_cubes
from .dataset import Scene
from .model import LevelOutput, ModelBundle, View, backproject, merge_samples, run_level


@dataclass
class Reconstruction:
    mesh: TriMesh
    levels: dict[str, LevelOutput]
    keyframes: list[int]

    def tsdf_grid(self) -> grid.SparseVoxelGrid:
        fine = self.levels.get("fine")
        if fine is None:
            return grid.SparseVoxelGrid.empty("fine", (2,))
        vals = np.stack([fine.pred.data.astype(np.float64), np.ones(len(fine.keys))], axis=1)
        return grid.SparseVoxelGrid(fine.keys, vals, "fine")


def coarse_keys(bounds: Aabb) -> np.ndarray:
    """Coarse voxels covering ``bounds``."""
    s = grid.voxel_size("coarse")
    lo = np.floor(bounds.min / s + 1e-9).astype(np.int64)
    hi = np.ceil(bounds.max / s - 1e-9).astype(np.int64)
    axes = [np.arange(lo[i], hi[i]) for i in range(3)]
    return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)


def tile_assignment(centers: np.ndarray, origin: np.ndarray, tile_size: float) -> np.ndarray:
    """Integer tile coordinates of each point; every voxel belongs to exactly one tile."""
    return np.floor((centers - origin) / tile_size).astype(np.int64)


def reconstruct_views(views: list[View], bounds: Aabb, bundle: ModelBundle, seed: int = 0,
                      n_views: int | None = None, tile_size: float | None = None) -> Reconstruction:
    """Run every level over the coarse voxels covering ``bounds``, using the given ``views``."""
    cfg = bundle.config
    n_views = cfg.n_views_test if n_views is None else n_views
    tile_size = cfg.tile_size if tile_size is None else tile_size
    cams = [(v.K, v.pose) for v in views]
    keys = coarse_keys(bounds)
    origin = keys.min(axis=0) * grid.voxel_size("coarse") if len(keys) else bounds.min
    levels: dict[str, LevelOutput] = {}
    view_cache: dict[tuple, np.ndarray] = {}
    parent = None
    for level in grid.LEVELS:
        if len(keys) == 0:
            break
        centers = grid.key_to_center(keys, level)
        tiles = tile_assignment(centers, origin, tile_size)
        uniq, inverse = np.unique(tiles, axis=0, return_inverse=True)
        inverse = inverse.reshape(-1)
        parts = []
        for t, tile in enumerate(uniq):
            tkey = tuple(int(x) for x in tile)
            if tkey not in view_cache:
                # tile views depend only on (seed, tile), never on iteration order
                lo = origin + tile * tile_size
                box = Aabb(lo, lo + tile_size)
                rng = np.random.default_rng([seed] + [x + (1 << 20) for x in tkey])
                view_cache[tkey] = sample_views(cams, box, n_views, rng, cfg.depth_range)
            members = np.flatnonzero(inverse == t)
            parts.append(backproject(bundle, level, centers, members, views, view_cache[tkey]))
        parts = [p for p in parts if len(p)]
        if not parts:
            break
        samples = merge_samples(parts)
        out = run_level(bundle, level, keys, samples, bundle.fusion_mode, parent)
        levels[level] = out
        parent = out
        if level != "fine":
            prob = sigmoid(out.pred).data
            keys = grid.children_of(keys[prob >= cfg.occ_threshold])
    rec = Reconstruction(TriMesh.empty(), levels, [])
    if "fine" in levels:
        rec.mesh = marching_cubes(rec.tsdf_grid())
    return rec


def reconstruct(scene: Scene, bundle: ModelBundle, seed: int = 0, n_views: int | None = None,
                tile_size: float | None = None) -> Reconstruction:
    """Keyframe selection, tiled coarse-to-fine fusion and meshing for one scene."""
    cfg = bundle.config
    kf = select_keyframes(scene.poses, cfg.r_max, cfg.t_max_test)
    views = [View(scene.K, scene.poses[i], scene.image(i)) for i in kf]
    rec = reconstruct_views(views, scene.bounds, bundle, seed, n_views, tile_size)
    rec.keyframes = kf
    return rec
