from __future__ import annotations

from typing import Sequence

import numpy as np

from .tensor import Parameter


def warmup_lr(lr: float, step: int, warmup_steps: int) -> float:
    """Linear ramp from 0 to ``lr`` over ``warmup_steps`` (1-based step)."""
    if warmup_steps <= 0:
        return lr
    return lr * min(1.0, step / warmup_steps)


def _update(p: Parameter, g: np.ndarray, m: np.ndarray, v: np.ndarray, t: int,
            lr: float, beta1: float, beta2: float, eps: float) -> None:
    g = np.asarray(g, dtype=np.float64)
    m *= beta1
    m += (1 - beta1) * g
    v *= beta2
    v += (1 - beta2) * g * g
    m_hat = m / (1 - beta1 ** t)
    v_hat = v / (1 - beta2 ** t)
    p.data = (p.data - lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.dtype)


def adam_step(params: Sequence[Parameter], grads: Sequence[np.ndarray], lr: float,
              state: dict, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
              step: int = 1, warmup_steps: int = 2000) -> None:
    """Functional Adam update; ``state`` carries the moments between calls."""
    lr_eff = warmup_lr(lr, step, warmup_steps)
    for i, (p, g) in enumerate(zip(params, grads)):
        if i not in state:
            state[i] = (np.zeros(p.shape), np.zeros(p.shape))
        m, v = state[i]
        _update(p, g, m, v, step, lr_eff, beta1, beta2, eps)


class Adam:
    """Bias-corrected Adam with linear warm-up.

    Moments are keyed by parameter identity, so parameters may join later
    (unfrozen in a second training phase) and start from zero moments.
    """

    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8, warmup_steps: int = 2000):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.warmup_steps = warmup_steps
        self.step_count = 0
        self._state: dict[int, list] = {}

    def effective_lr(self) -> float:
        return warmup_lr(self.lr, self.step_count, self.warmup_steps)

    def step(self, params: Sequence[Parameter]) -> None:
        self.step_count += 1
        lr = self.effective_lr()
        for p in params:
            if p.grad is None:
                continue
            st = self._state.get(id(p))
            if st is None:
                st = self._state[id(p)] = [np.zeros(p.shape), np.zeros(p.shape), 0]
            st[2] += 1
            _update(p, p.grad, st[0], st[1], st[2], lr, self.beta1, self.beta2, self.eps)
