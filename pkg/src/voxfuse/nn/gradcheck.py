"""Central finite-difference gradient checking."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tape, Tensor


def numeric_grad(fn: Callable[[], Tensor], arr: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """d fn() / d arr by central differences; ``arr`` is perturbed in place."""
    grad = np.zeros_like(arr, dtype=np.float64)
    flat = arr.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = float(np.sum(fn().data))
        flat[i] = orig - h
        down = float(np.sum(fn().data))
        flat[i] = orig
        gflat[i] = (up - down) / (2 * h)
    return grad


GRAD_FLOOR = 1e-6


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = GRAD_FLOOR) -> float:
    """``||a - n|| / max(||a||, ||n||, floor)``.

    The floor keeps gradients that vanish exactly (for example a key bias under
    softmax attention) from turning finite-difference round-off, about 1e-11
    at h=1e-5, into a relative error of 1.
    """
    denom = max(np.linalg.norm(analytic), np.linalg.norm(numeric), floor)
    return float(np.linalg.norm(analytic - numeric) / denom)


def check_gradients(fn: Callable[[], Tensor], tensors: Sequence[Tensor], h: float = 1e-5) -> float:
    """Largest relative error over ``tensors`` between tape and finite-difference gradients.

    ``fn`` must rebuild the graph from the current ``tensor.data`` each call.
    Non-scalar outputs are reduced by summation.
    """
    for t in tensors:
        t.grad = None
        t.requires_grad = True
    with Tape() as tape:
        out = fn()
        loss = out if out.data.size == 1 else out.sum()
    tape.backward(loss)
    worst = 0.0
    for t in tensors:
        analytic = np.zeros(t.shape) if t.grad is None else t.grad
        numeric = numeric_grad(fn, t.data, h)
        worst = max(worst, relative_error(analytic, numeric))
    return worst
