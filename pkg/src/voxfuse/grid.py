"""Sparse three-level voxel hierarchy (16 / 8 / 4 cm).

All levels share one world origin, so lattices nest exactly: fine voxel
``(2i + a, 2j + b, 2k + c)`` with ``a, b, c`` in {0, 1} is a child of medium
voxel ``(i, j, k)``, and likewise medium to coarse.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from itertools import product
from pathlib import Path
from typing import Iterator

import numpy as np

from .geom import Aabb

LEVELS = ("coarse", "medium", "fine")
VOXEL_SIZES = {"coarse": 0.16, "medium": 0.08, "fine": 0.04}
DEFAULT_TILE_SIZE = 3.84

_BITS = 21
_OFFSET = 1 << (_BITS - 1)
_MASK = (1 << _BITS) - 1
CHILD_OFFSETS = np.array(list(product((0, 1), repeat=3)), dtype=np.int64)


def voxel_size(level: str) -> float:
    try:
        return VOXEL_SIZES[level]
    except KeyError:
        raise ValueError(f"unknown level {level!r}; expected one of {LEVELS}") from None


def finer(level: str) -> str:
    i = LEVELS.index(level)
    if i == len(LEVELS) - 1:
        raise ValueError("fine is the finest level")
    return LEVELS[i + 1]


def coarser(level: str) -> str:
    i = LEVELS.index(level)
    if i == 0:
        raise ValueError("coarse is the coarsest level")
    return LEVELS[i - 1]


def pack_keys(keys: np.ndarray) -> np.ndarray:
    """Pack (n, 3) signed coordinates (|c| < 2**20) into sortable int64 codes."""
    k = np.asarray(keys, dtype=np.int64).reshape(-1, 3) + _OFFSET
    if np.any(k < 0) or np.any(k > _MASK):
        raise OverflowError("voxel coordinate outside the packable range (|c| < 2**20)")
    return (k[:, 0] << (2 * _BITS)) | (k[:, 1] << _BITS) | k[:, 2]


def unpack_keys(codes: np.ndarray) -> np.ndarray:
    c = np.asarray(codes, dtype=np.int64)
    out = np.stack([(c >> (2 * _BITS)) & _MASK, (c >> _BITS) & _MASK, c & _MASK], axis=-1)
    return out - _OFFSET


def key_to_center(keys, level: str, origin=(0.0, 0.0, 0.0)) -> np.ndarray:
    return np.asarray(origin, float) + (np.asarray(keys, dtype=np.float64) + 0.5) * voxel_size(level)


def point_to_key(pts, level: str, origin=(0.0, 0.0, 0.0)) -> np.ndarray:
    return np.floor((np.asarray(pts, float) - np.asarray(origin, float)) / voxel_size(level)).astype(np.int64)


def children_of(keys: np.ndarray) -> np.ndarray:
    """All 8 children of each key, (n*8, 3), grouped per parent."""
    keys = np.asarray(keys, dtype=np.int64).reshape(-1, 3)
    return (2 * keys[:, None, :] + CHILD_OFFSETS[None]).reshape(-1, 3)


def parents_of(keys: np.ndarray) -> np.ndarray:
    return np.floor_divide(np.asarray(keys, dtype=np.int64), 2)


def keys_in_box(box: Aabb, level: str, origin=(0.0, 0.0, 0.0)) -> np.ndarray:
    """Keys of every voxel whose centre lies in ``box`` (half-open on the max side)."""
    s = voxel_size(level)
    o = np.asarray(origin, float)
    lo = np.ceil((box.min - o) / s - 0.5 - 1e-9).astype(np.int64)
    hi = np.ceil((box.max - o) / s - 0.5 - 1e-9).astype(np.int64)
    if np.any(hi <= lo):
        return np.zeros((0, 3), dtype=np.int64)
    axes = [np.arange(lo[i], hi[i]) for i in range(3)]
    return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)


@dataclass
class SparseVoxelGrid:
    """Map from integer voxel keys at one level to per-voxel payload rows.

    Keys are kept sorted by their packed code; lookups are vectorised binary
    searches over that sorted code array.
    """

    keys: np.ndarray
    values: np.ndarray
    level: str
    origin: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        voxel_size(self.level)
        keys = np.asarray(self.keys, dtype=np.int64).reshape(-1, 3)
        values = np.asarray(self.values)
        if len(values) != len(keys):
            raise ValueError(f"{len(keys)} keys but {len(values)} payload rows")
        codes = pack_keys(keys)
        order = np.argsort(codes, kind="stable")
        codes = codes[order]
        if len(codes) > 1 and np.any(codes[1:] == codes[:-1]):
            raise ValueError("duplicate voxel keys")
        self.keys = keys[order]
        self.values = values[order]
        self.origin = np.asarray(self.origin, dtype=float).reshape(3)
        self._codes = codes

    @classmethod
    def empty(cls, level: str, payload_shape=(), dtype=np.float32) -> SparseVoxelGrid:
        return cls(np.zeros((0, 3), np.int64), np.zeros((0,) + tuple(payload_shape), dtype), level)

    def __len__(self) -> int:
        return len(self.keys)

    @property
    def num_active(self) -> int:
        return len(self.keys)

    @property
    def voxel_size(self) -> float:
        return voxel_size(self.level)

    def centers(self) -> np.ndarray:
        return key_to_center(self.keys, self.level, self.origin)

    def lookup(self, keys) -> np.ndarray:
        """Row index for each query key, -1 where absent."""
        q = pack_keys(keys)
        if len(self._codes) == 0:
            return np.full(len(q), -1, dtype=np.int64)
        pos = np.searchsorted(self._codes, q)
        pos = np.minimum(pos, len(self._codes) - 1)
        return np.where(self._codes[pos] == q, pos, -1).astype(np.int64)

    def contains(self, keys) -> np.ndarray:
        return self.lookup(keys) >= 0

    def get(self, key, default=None):
        i = self.lookup(np.asarray(key).reshape(1, 3))[0]
        return default if i < 0 else self.values[i]

    def with_values(self, values) -> SparseVoxelGrid:
        out = SparseVoxelGrid.__new__(SparseVoxelGrid)
        values = np.asarray(values)
        if len(values) != len(self.keys):
            raise ValueError("payload length mismatch")
        out.keys, out.values, out.level, out.origin, out._codes = self.keys, values, self.level, self.origin, self._codes
        return out

    def subset(self, mask_or_index) -> SparseVoxelGrid:
        idx = np.asarray(mask_or_index)
        return SparseVoxelGrid(self.keys[idx], self.values[idx], self.level, self.origin)

    def items(self) -> Iterator[tuple[tuple[int, int, int], np.ndarray]]:
        for k, v in zip(self.keys, self.values):
            yield tuple(int(c) for c in k), v

    # -- debug text format: "ix iy iz level value..." -------------------------
    def dump(self, path) -> None:
        lines = []
        vals = self.values.reshape(len(self), -1)
        for k, v in zip(self.keys, vals):
            lines.append(" ".join([str(int(c)) for c in k] + [self.level] + [repr(float(x)) for x in v]))
        Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))

    @classmethod
    def load(cls, path, level: str | None = None) -> SparseVoxelGrid:
        keys, vals, levels = [], [], set()
        for line in Path(path).read_text().splitlines():
            if not line.strip():
                continue
            parts = line.split()
            keys.append([int(p) for p in parts[:3]])
            levels.add(parts[3])
            vals.append([float(p) for p in parts[4:]])
        if len(levels) > 1:
            raise ValueError(f"{path}: mixed levels {sorted(levels)}")
        lvl = levels.pop() if levels else level
        if lvl is None:
            raise ValueError(f"{path}: empty dump and no level given")
        values = np.array(vals, dtype=np.float64)
        if values.ndim == 2 and values.shape[1] == 1:
            values = values[:, 0]
        return cls(np.array(keys, dtype=np.int64).reshape(-1, 3), values.reshape(len(keys), *values.shape[1:]), lvl)


@dataclass
class TilePlan:
    tiles: list[Aabb]

    def __len__(self) -> int:
        return len(self.tiles)

    def __iter__(self):
        return iter(self.tiles)


def tile_volume(bounds: Aabb, tile_size: float = DEFAULT_TILE_SIZE) -> TilePlan:
    """Cover ``bounds`` with disjoint axis-aligned tiles; edge tiles are clipped."""
    if tile_size <= 0:
        raise ValueError("tile_size must be positive")
    size = bounds.size
    if np.any(size <= 0):
        return TilePlan([])
    counts = [max(1, math.ceil(s / tile_size - 1e-9)) for s in size]
    tiles = []
    for idx in product(*(range(c) for c in counts)):
        lo = bounds.min + np.array(idx) * tile_size
        hi = np.minimum(lo + tile_size, bounds.max)
        tiles.append(Aabb(lo, hi))
    return TilePlan(tiles)


def downsample_occupancy(grid: SparseVoxelGrid) -> SparseVoxelGrid:
    """Morphological dilation to the next coarser level: a parent is occupied
    iff any of its children present in ``grid`` is occupied."""
    level = coarser(grid.level)
    if len(grid) == 0:
        return SparseVoxelGrid.empty(level, dtype=bool)
    parents = parents_of(grid.keys)
    codes = pack_keys(parents)
    uniq, inverse = np.unique(codes, return_inverse=True)
    occ = np.zeros(len(uniq), dtype=bool)
    np.logical_or.at(occ, inverse, np.asarray(grid.values, dtype=bool))
    return SparseVoxelGrid(unpack_keys(uniq), occ, level, grid.origin)


def expand_active(probs: SparseVoxelGrid, threshold: float = 0.5) -> SparseVoxelGrid:
    """Children (at the next finer level) of every voxel with probability >= threshold."""
    if not 0 < threshold < 1:
        raise ValueError("threshold must lie in (0, 1)")
    level = finer(probs.level)
    keep = np.asarray(probs.values) >= threshold
    kids = children_of(probs.keys[keep])
    return SparseVoxelGrid(kids, np.ones(len(kids), dtype=bool), level, probs.origin)
