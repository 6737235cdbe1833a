"""Training losses."""
from __future__ import annotations

from typing import Sequence

import numpy as np

from .tensor import Tensor, _make, add, as_tensor


def _mask_or_ones(mask, shape) -> np.ndarray:
    if mask is None:
        return np.ones(shape, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != shape:
        raise ValueError(f"mask shape {mask.shape} does not match {shape}")
    return mask


def bce_loss(logits: Tensor, targets, mask=None) -> Tensor:
    """Mean binary cross-entropy over unmasked entries, in logit form.

    Uses ``max(x, 0) - x*y + log(1 + exp(-|x|))`` so it stays finite for
    any finite logit. An all-masked input gives 0 with a zero gradient.
    """
    logits = as_tensor(logits)
    x = logits.data
    y = np.asarray(targets, dtype=x.dtype)
    if y.shape != x.shape:
        raise ValueError(f"bce_loss: logits {x.shape} vs targets {y.shape}")
    m = _mask_or_ones(mask, x.shape)
    n = int(m.sum())
    if n == 0:
        return _make(np.zeros((), dtype=x.dtype), (logits,), lambda g: (np.zeros_like(x),))
    per = np.maximum(x, 0) - x * y + np.log1p(np.exp(-np.abs(x)))
    value = np.asarray(per[m].sum() / n, dtype=x.dtype)
    e = np.exp(-np.abs(x))
    sig = np.where(x >= 0, 1 / (1 + e), e / (1 + e))

    def backward(g):
        return ((g * (sig - y) * m / n).astype(x.dtype),)

    return _make(value, (logits,), backward)


def log_transform(s: np.ndarray) -> np.ndarray:
    """Odd, monotone compression ``sign(s) * log(|s| + 1)``."""
    return np.sign(s) * np.log1p(np.abs(s))


def log_tsdf_l1(pred: Tensor, gt, mask=None) -> Tensor:
    """Mean ``|phi(pred) - phi(gt)|`` over unmasked entries (phi = :func:`log_transform`)."""
    pred = as_tensor(pred)
    p = pred.data
    gt = np.asarray(gt, dtype=p.dtype)
    if gt.shape != p.shape:
        raise ValueError(f"log_tsdf_l1: pred {p.shape} vs gt {gt.shape}")
    m = _mask_or_ones(mask, p.shape)
    n = int(m.sum())
    if n == 0:
        return _make(np.zeros((), dtype=p.dtype), (pred,), lambda g: (np.zeros_like(p),))
    diff = log_transform(p) - log_transform(gt)
    value = np.asarray(np.abs(diff)[m].sum() / n, dtype=p.dtype)
    dphi = 1.0 / (1.0 + np.abs(p))

    def backward(g):
        return ((g * np.sign(diff) * dphi * m / n).astype(p.dtype),)

    return _make(value, (pred,), backward)


def total_loss(proj_occ: Sequence[Tensor], occ: Sequence[Tensor], tsdf: Tensor) -> Tensor:
    """Unweighted sum of the three projective-occupancy terms, the two
    coarse/medium occupancy terms and the fine TSDF term."""
    if len(proj_occ) != 3 or len(occ) != 2:
        raise ValueError("expected 3 projective-occupancy terms and 2 occupancy terms")
    out = as_tensor(tsdf)
    for term in list(proj_occ) + list(occ):
        out = add(out, term)
    return out

