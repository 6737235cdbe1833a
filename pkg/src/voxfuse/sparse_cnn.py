"""Submanifold sparse 3D convolutions and the per-level prediction networks.

A convolution reads the 27 neighbours of every active voxel (missing
neighbours read as zero) and writes only to the active voxels, so the
active set never grows. The neighbour table is computed once per active set
and shared by all layers of a level.
"""
from __future__ import annotations

from itertools import product

import numpy as np

from .grid import LEVELS, SparseVoxelGrid, coarser, parents_of
from .nn import (
    HEAD_INIT_SCALE,
    Linear,
    Module,
    Parameter,
    Tensor,
    add,
    as_tensor,
    clamp,
    concat,
    gather_rows,
    glorot_uniform,
    matmul,
    relu,
    reshape,
    scale,
    tanh,
)

KERNEL_OFFSETS = np.array(list(product((-1, 0, 1), repeat=3)), dtype=np.int64)
TSDF_GAIN = 1.05


def neighbor_table(keys: np.ndarray, level: str = "fine") -> np.ndarray:
    """``(V, 27)`` row index of each neighbour in :data:`KERNEL_OFFSETS` order; ``V`` marks a missing one."""
    keys = np.asarray(keys, dtype=np.int64).reshape(-1, 3)
    n = len(keys)
    if n == 0:
        return np.zeros((0, 27), dtype=np.int64)
    g = SparseVoxelGrid(keys, np.arange(n), level)
    q = (keys[:, None, :] + KERNEL_OFFSETS[None]).reshape(-1, 3)
    rows = g.lookup(q)
    rows = np.where(rows >= 0, g.values[np.maximum(rows, 0)], n)  # map sorted rows back to input order
    return rows.reshape(n, 27)


class SparseConvLayer(Module):
    """3x3x3 kernel stored as ``(27, C_in, C_out)`` plus a bias."""

    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator, relu: bool = True, dtype=np.float32):
        self.weight = Parameter(glorot_uniform(rng, 27 * c_in, c_out, shape=(27, c_in, c_out), dtype=dtype))
        self.bias = Parameter(np.zeros(c_out, dtype=dtype))
        self.relu = relu

    def __call__(self, feats: Tensor, nbr: np.ndarray) -> Tensor:
        return sparse_conv3(feats, nbr, self)


def sparse_conv3(feats, nbr: np.ndarray, layer: SparseConvLayer) -> Tensor:
    """``out[i] = bias + sum_o W[o]^T feats[nbr[i, o]]`` over active neighbours.

    ``feats`` is ``(V, C_in)`` and ``nbr`` comes from :func:`neighbor_table`.
    The layer's nonlinearity flag is *not* applied here.
    """
    w = layer.weight
    feats = feats if isinstance(feats, Tensor) else as_tensor(feats, w.dtype)
    V, c_in = feats.shape
    c_out = w.shape[2]
    if V == 0:
        return as_tensor(np.zeros((0, c_out), dtype=w.dtype))
    padded = concat([feats, as_tensor(np.zeros((1, c_in), dtype=feats.dtype))], axis=0)
    cols = reshape(gather_rows(padded, nbr), (V, 27 * c_in))
    return add(matmul(cols, reshape(w, (27 * c_in, c_out))), layer.bias)


class LevelNetwork(Module):
    """``K`` sparse conv layers (relu after each) and an affine head to one channel.

    Coarse and medium heads output occupancy logits; the fine head outputs a
    normalised TSDF ``clamp(1.05 * tanh(x), -1, 1)``.
    """

    def __init__(self, level: str, c_in: int, n_layers: int = 3, hidden: int | None = None,
                 rng: np.random.Generator | None = None, dtype=np.float32):
        if level not in LEVELS:
            raise ValueError(f"unknown level {level!r}")
        rng = np.random.default_rng(0) if rng is None else rng
        hidden = c_in if hidden is None else hidden
        self.level = level
        widths = [c_in] + [hidden] * n_layers
        self.convs = [SparseConvLayer(widths[i], widths[i + 1], rng, dtype=dtype) for i in range(n_layers)]
        # occupancy logits start near 0; the TSDF head keeps the full scale
        head_scale = 1.0 if level == "fine" else HEAD_INIT_SCALE
        self.head = Linear(widths[-1], 1, rng, dtype, init_scale=head_scale)

    @property
    def kind(self) -> str:
        return "tsdf" if self.level == "fine" else "occupancy"

    def __call__(self, feats, keys: np.ndarray, nbr: np.ndarray | None = None) -> Tensor:
        """Per-voxel prediction, shape ``(V,)``."""
        if nbr is None:
            nbr = neighbor_table(keys, self.level)
        x = feats if isinstance(feats, Tensor) else as_tensor(feats, self.head.weight.dtype)
        for conv in self.convs:
            x = sparse_conv3(x, nbr, conv)
            if conv.relu:
                x = relu(x)
        out = reshape(self.head(x), (-1,))
        if self.kind == "tsdf":
            out = clamp(scale(tanh(out), TSDF_GAIN), -1.0, 1.0)
        return out


def level_network(feats, keys: np.ndarray, net: LevelNetwork) -> Tensor:
    return net(feats, keys)


def parent_features(keys: np.ndarray, parent_keys: np.ndarray, parent_feats, level: str) -> Tensor:
    """Rows of ``parent_feats`` for the parent of every key (zero when the parent is absent).

    Used only when levels are configured to pass features down the hierarchy.
    """
    parent_feats = parent_feats if isinstance(parent_feats, Tensor) else as_tensor(parent_feats)
    n_par, c = parent_feats.shape
    g = SparseVoxelGrid(parent_keys, np.arange(len(parent_keys)), coarser(level))
    rows = g.lookup(parents_of(keys))
    rows = np.where(rows >= 0, g.values[np.maximum(rows, 0)], n_par)
    padded = concat([parent_feats, as_tensor(np.zeros((1, c), dtype=parent_feats.dtype))], axis=0)
    return gather_rows(padded, rows)
