"""Per-image feature pyramids from a trainable patch-linear embedding.

Each resolution cuts the image into non-overlapping ``stride x stride``
patches and maps every flattened patch to ``C`` channels with one affine
layer. Features can also be read from precomputed ``.npz`` archives, so a
stronger 2D network can be swapped in without touching the rest of the
pipeline.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .nn import Linear, Module, Tensor, add, as_tensor, gather_rows, mul, reshape

STRIDES = {"coarse": 16, "medium": 8, "fine": 4}
DEFAULT_CHANNELS = {"coarse": 32, "medium": 16, "fine": 8}


@dataclass
class FeaturePyramid:
    """Feature maps of shape ``(ceil(H / s), ceil(W / s), C)`` per level."""

    maps: dict[str, Tensor]
    image_size: tuple[int, int]  # (H, W)

    def shape(self, level: str) -> tuple[int, ...]:
        return self.maps[level].shape

    def save(self, path) -> None:
        np.savez(path, height=self.image_size[0], width=self.image_size[1],
                 **{lvl: m.data for lvl, m in self.maps.items()})

    @classmethod
    def load(cls, path) -> FeaturePyramid:
        """Read a precomputed pyramid (one float array per level)."""
        z = np.load(path)
        maps = {}
        for lvl in STRIDES:
            if lvl not in z:
                raise KeyError(f"{path}: missing feature map {lvl!r}")
            maps[lvl] = as_tensor(np.asarray(z[lvl], dtype=np.float32))
        size = (int(z["height"]), int(z["width"]))
        for lvl, m in maps.items():
            want = tuple(math.ceil(d / STRIDES[lvl]) for d in size)
            if m.shape[:2] != want:
                raise ValueError(f"{path}: {lvl} map is {m.shape[:2]}, expected {want} for image {size}")
        return cls(maps, size)


def pyramid_shape(height: int, width: int, level: str) -> tuple[int, int]:
    s = STRIDES[level]
    return math.ceil(height / s), math.ceil(width / s)


def patchify(image: np.ndarray, stride: int) -> np.ndarray:
    """``(h, w, stride * stride * ch)`` patch rows; edges are padded by replication."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = img[:, :, None]
    H, W, ch = img.shape
    h, w = math.ceil(H / stride), math.ceil(W / stride)
    img = np.pad(img, ((0, h * stride - H), (0, w * stride - W), (0, 0)), mode="edge")
    p = img.reshape(h, stride, w, stride, ch).transpose(0, 2, 1, 3, 4)
    return p.reshape(h, w, stride * stride * ch)


class PatchFeatures(Module):
    """Trainable stand-in for the 2D backbone: one patch embedding per level."""

    def __init__(self, channels: dict[str, int] | None = None, in_channels: int = 1,
                 rng: np.random.Generator | None = None, dtype=np.float32):
        channels = dict(DEFAULT_CHANNELS if channels is None else channels)
        rng = np.random.default_rng(0) if rng is None else rng
        self.in_channels = in_channels
        self.channels = channels
        self.embed = {lvl: Linear(STRIDES[lvl] ** 2 * in_channels, channels[lvl], rng, dtype)
                      for lvl in STRIDES}

    def extract(self, image: np.ndarray) -> FeaturePyramid:
        img = np.asarray(image)
        ch = 1 if img.ndim == 2 else img.shape[2]
        if ch != self.in_channels:
            raise ValueError(f"image has {ch} channels, extractor expects {self.in_channels}")
        maps = {}
        for lvl, s in STRIDES.items():
            lin = self.embed[lvl]
            maps[lvl] = lin(patchify(img, s).astype(lin.weight.dtype))
        return FeaturePyramid(maps, (img.shape[0], img.shape[1]))


def extract(image: np.ndarray, params: PatchFeatures) -> FeaturePyramid:
    return params.extract(image)


def sample_features(fmap: Tensor, stride: int, image_size: tuple[int, int],
                    u: np.ndarray, v: np.ndarray) -> tuple[Tensor, np.ndarray]:
    """Bilinear lookup of ``fmap`` at pixel coordinates ``(u, v)``.

    Pixel ``i`` has its centre at ``u = i`` and map cell ``j`` covers pixels
    ``[j * stride, (j + 1) * stride)``, so the continuous cell coordinate is
    ``(u + 0.5) / stride - 0.5``. Queries beyond the outer cell centres use
    the border cells. Returns ``(features (n, C), valid)``, where ``valid`` is
    false for points outside the image; their rows are zero.
    """
    u = np.asarray(u, dtype=np.float64).reshape(-1)
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    H, W = image_size
    h, w, C = fmap.shape
    with np.errstate(invalid="ignore"):
        valid = (u >= -0.5) & (u < W - 0.5) & (v >= -0.5) & (v < H - 0.5)
    x = np.where(valid, (u + 0.5) / stride - 0.5, 0.0)
    y = np.where(valid, (v + 0.5) / stride - 0.5, 0.0)
    x = np.clip(x, 0.0, w - 1)
    y = np.clip(y, 0.0, h - 1)
    x0 = np.minimum(np.floor(x).astype(np.int64), w - 1)
    y0 = np.minimum(np.floor(y).astype(np.int64), h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx, fy = x - x0, y - y0
    flat = reshape(fmap, (h * w, C))
    dt = fmap.dtype
    out = None
    for yi, xi, wt in ((y0, x0, (1 - fx) * (1 - fy)), (y0, x1, fx * (1 - fy)),
                       (y1, x0, (1 - fx) * fy), (y1, x1, fx * fy)):
        term = mul(gather_rows(flat, yi * w + xi), (wt * valid)[:, None].astype(dt))
        out = term if out is None else add(out, term)
    return out, valid


def sample_feature(pyramid: FeaturePyramid, level: str, u: float, v: float) -> np.ndarray | None:
    """Single-point :func:`sample_features`; ``None`` outside the image."""
    feats, valid = sample_features(pyramid.maps[level], STRIDES[level], pyramid.image_size, [u], [v])
    return feats.data[0] if valid[0] else None


def load_image(path) -> np.ndarray:
    """Grayscale float image in [0, 1] from an 8- or 16-bit PNG."""
    arr = np.asarray(Image.open(Path(path)))
    scale = 65535.0 if arr.dtype == np.uint16 else 255.0
    if arr.ndim == 3:
        arr = arr[..., :3].mean(axis=-1)
    return (arr.astype(np.float32) / scale)
