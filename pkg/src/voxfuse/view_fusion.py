"""Per-voxel transformer fusion of back-projected view features.

Every voxel receives one token per view that sees it. A small transformer
encoder mixes those tokens, a shared affine head predicts a projective
occupancy logit per view, and the fused voxel feature is a softmax-weighted
sum of the encoder outputs in which an extra zero-logit, zero-feature entry
lets the model fall back to "no information".

Voxels are grouped by their view count ``N`` and each group runs as one
dense ``(B, N, C)`` batch, so no padding or masking is ever needed.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import (
    HEAD_INIT_SCALE,
    LayerNormAffine,
    Linear,
    Module,
    Tensor,
    add,
    as_tensor,
    concat,
    gather_rows,
    getitem,
    matmul,
    mean,
    mul,
    relu,
    reshape,
    scale,
    softmax,
    transpose,
    tsum,
)

N_FREQ = 6
D_MAX = 5.0
UNWEIGHTED = "unweighted"
WEIGHTED = "weighted"
MODES = (UNWEIGHTED, WEIGHTED)


def pose_encoding(dirs, n_freq: int = N_FREQ) -> np.ndarray:
    """Sinusoidal encoding of unit directions, ``(..., 6 * n_freq)``.

    Per direction component ``x`` the pairs ``(sin 2^k pi x, cos 2^k pi x)``
    for ``k = 0 .. n_freq - 1``, component-major and frequency-minor.
    """
    d = np.asarray(dirs, dtype=np.float64)
    if d.shape[-1] != 3:
        raise ValueError(f"directions must have 3 components, got shape {d.shape}")
    norms = np.linalg.norm(d, axis=-1)
    if d.size and np.any(np.abs(norms - 1) > 1e-3):
        raise ValueError("directions must be unit vectors")
    ang = d[..., :, None] * (np.pi * 2.0 ** np.arange(n_freq))  # (..., 3, F)
    enc = np.stack([np.sin(ang), np.cos(ang)], axis=-1)  # (..., 3, F, 2)
    return enc.reshape(d.shape[:-1] + (6 * n_freq,))


class EncoderLayer(Module):
    """Post-norm encoder layer: multi-head self-attention then a 2-layer FFN."""

    def __init__(self, c: int, heads: int, rng: np.random.Generator, dtype=np.float32):
        if c % heads:
            raise ValueError(f"channels {c} not divisible by {heads} heads")
        self.heads = heads
        self.q = Linear(c, c, rng, dtype)
        self.k = Linear(c, c, rng, dtype)
        self.v = Linear(c, c, rng, dtype)
        self.o = Linear(c, c, rng, dtype)
        self.ff1 = Linear(c, 2 * c, rng, dtype)
        self.ff2 = Linear(2 * c, c, rng, dtype)
        self.ln1 = LayerNormAffine(c, dtype=dtype)
        self.ln2 = LayerNormAffine(c, dtype=dtype)

    def attention(self, x: Tensor) -> Tensor:
        B, N, C = x.shape
        H = self.heads
        dh = C // H

        def split(t):
            return transpose(reshape(t, (B, N, H, dh)), (0, 2, 1, 3))  # (B, H, N, dh)

        q, k, v = split(self.q(x)), split(self.k(x)), split(self.v(x))
        scores = scale(matmul(q, transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
        att = matmul(softmax(scores, axis=-1), v)
        return self.o(reshape(transpose(att, (0, 2, 1, 3)), (B, N, C)))

    def __call__(self, x: Tensor) -> Tensor:
        x = self.ln1(add(x, self.attention(x)))
        return self.ln2(add(x, self.ff2(relu(self.ff1(x)))))


class FusionModel(Module):
    """Token layers, encoder stack and occupancy head for one resolution."""

    def __init__(self, channels: int, n_layers: int = 2, heads: int = 2, n_freq: int = N_FREQ,
                 d_max: float = D_MAX, rng: np.random.Generator | None = None, dtype=np.float32):
        rng = np.random.default_rng(0) if rng is None else rng
        self.channels = channels
        self.n_freq = n_freq
        self.d_max = d_max
        self.fc1 = Linear(channels + 6 * n_freq, channels, rng, dtype)
        self.fc2 = Linear(channels + 1, channels, rng, dtype)
        self.layers = [EncoderLayer(channels, heads, rng, dtype) for _ in range(n_layers)]
        self.head = Linear(channels, 1, rng, dtype, init_scale=HEAD_INIT_SCALE)

    @property
    def dtype(self):
        return self.fc1.weight.dtype

    def build_tokens(self, features, dirs, d_v) -> Tensor:
        """``fc2([fc1([feature, pose_encoding(dir)]), clamp(d_v / d_max, 0, 1)])`` over the last axis."""
        features = features if isinstance(features, Tensor) else as_tensor(features, self.dtype)
        enc = pose_encoding(dirs, self.n_freq).astype(self.dtype)
        depth = np.clip(np.asarray(d_v, dtype=np.float64) / self.d_max, 0.0, 1.0)[..., None]
        h = self.fc1(concat([features, as_tensor(enc)], axis=-1))
        return self.fc2(concat([h, as_tensor(depth.astype(self.dtype))], axis=-1))

    def encode(self, tokens: Tensor) -> Tensor:
        """Transformer over axis -2 of a ``(B, N, C)`` batch."""
        x = tokens
        for layer in self.layers:
            x = layer(x)
        return x

    def occupancy_logits(self, fused: Tensor) -> Tensor:
        B, N, _ = fused.shape
        return reshape(self.head(fused), (B, N))


def transformer_encode(model: FusionModel, tokens) -> Tensor:
    """``(N, C)`` or ``(B, N, C)`` tokens -> same-shaped encoder outputs."""
    t = tokens if isinstance(tokens, Tensor) else as_tensor(tokens, model.dtype)
    if t.ndim == 2:
        if t.shape[0] == 0:
            return t
        return reshape(model.encode(reshape(t, (1,) + t.shape)), t.shape)
    return model.encode(t)


def aggregation_weights(logits: Tensor) -> Tensor:
    """``softmax([X_1 .. X_N, 0])`` per row of a ``(B, N)`` logit batch, shape ``(B, N + 1)``."""
    B = logits.shape[0]
    zero = as_tensor(np.zeros((B, 1), dtype=logits.dtype))
    return softmax(concat([logits, zero], axis=1), axis=1)


def aggregate(fused: Tensor, logits: Tensor) -> Tensor:
    """Weighted sum of ``(B, N, C)`` encoder outputs with the zero-padded softmax of ``(B, N)`` logits."""
    B, N, C = fused.shape
    if N == 0:
        return as_tensor(np.zeros((B, C), dtype=fused.dtype))
    w = getitem(aggregation_weights(logits), (slice(None), slice(0, N)))
    return tsum(mul(fused, reshape(w, (B, N, 1))), axis=1)


@dataclass
class FusionOutput:
    """``features`` is ``(V, C)`` in voxel order; ``logits`` is ``(M,)`` in sample order."""

    features: Tensor
    logits: Tensor
    counts: np.ndarray


def fuse_voxels(model: FusionModel, voxel_index: np.ndarray, n_voxels: int, features, dirs, d_v,
                mode: str = WEIGHTED) -> FusionOutput:
    """Fuse per-(voxel, view) samples into one feature per voxel.

    Args:
        model: fusion parameters for this resolution.
        voxel_index: ``(M,)`` voxel id of every sample.
        n_voxels: number of voxels ``V``; voxels without samples get a zero feature.
        features: ``(M, C)`` back-projected image features.
        dirs: ``(M, 3)`` unit camera-to-voxel directions.
        d_v: ``(M,)`` camera-frame voxel depths.
        mode: ``"weighted"`` aggregates with the occupancy softmax; ``"unweighted"``
            averages the encoder outputs (logits are still returned for supervision).
    """
    if mode not in MODES:
        raise ValueError(f"unknown fusion mode {mode!r}; expected one of {MODES}")
    vi = np.asarray(voxel_index, dtype=np.int64).reshape(-1)
    M = len(vi)
    C = model.channels
    dt = model.dtype
    counts = np.bincount(vi, minlength=n_voxels) if M else np.zeros(n_voxels, np.int64)
    if M == 0:
        return FusionOutput(as_tensor(np.zeros((n_voxels, C), dt)), as_tensor(np.zeros(0, dt)), counts)

    tokens = model.build_tokens(features, dirs, d_v)
    order = np.argsort(vi, kind="stable")  # samples grouped by voxel, view order kept
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])

    pieces, logit_pieces = [], []
    voxel_row = np.full(n_voxels, -1, dtype=np.int64)
    sample_row = np.empty(M, dtype=np.int64)
    n_rows = n_logits = 0
    for n in np.unique(counts[counts > 0]):
        vox = np.flatnonzero(counts == n)
        idx = order[starts[vox][:, None] + np.arange(n)]  # (B, n)
        enc = model.encode(gather_rows(tokens, idx))
        X = model.occupancy_logits(enc)
        pooled = aggregate(enc, X) if mode == WEIGHTED else mean(enc, axis=1)
        pieces.append(pooled)
        logit_pieces.append(reshape(X, (-1,)))
        voxel_row[vox] = n_rows + np.arange(len(vox))
        sample_row[idx.reshape(-1)] = n_logits + np.arange(idx.size)
        n_rows += len(vox)
        n_logits += idx.size
    pieces.append(as_tensor(np.zeros((1, C), dt)))
    voxel_row[voxel_row < 0] = n_rows  # the trailing zero row
    feats = gather_rows(concat(pieces, axis=0), voxel_row)
    logits = gather_rows(concat(logit_pieces, axis=0) if len(logit_pieces) > 1 else logit_pieces[0], sample_row)
    return FusionOutput(feats, logits, counts)
