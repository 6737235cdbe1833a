"""Parameter containers and the affine layer."""
from __future__ import annotations

from typing import Iterator

import numpy as np

from .tensor import Parameter, Tensor, add, as_tensor, layer_norm, matmul, mul


HEAD_INIT_SCALE = 0.1  # shrinks logit heads so initial predictions sit near p = 0.5


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None, dtype=np.float32):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    shape = (fan_in, fan_out) if shape is None else shape
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


class Module:
    """Base class: parameters and child modules are discovered from attributes.

    Attribute order is insertion order, so ``named_parameters`` is stable and
    checkpoints are reproducible.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Parameter):
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")
            elif isinstance(value, dict):
                for k, item in value.items():
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{k}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def astype(self, dtype) -> Module:
        """Cast every parameter in place (64-bit for gradient checks)."""
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self

    def state_dict(self, prefix: str = "") -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters(prefix)}

    def load_state_dict(self, state: dict[str, np.ndarray], prefix: str = "") -> None:
        for name, p in self.named_parameters(prefix):
            if name not in state:
                raise KeyError(f"missing parameter {name!r}")
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ValueError(f"{name}: checkpoint shape {arr.shape} != model shape {p.shape}")
            p.data = arr.astype(p.dtype)


class Linear(Module):
    """``y = x @ W + b`` over the last axis."""

    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, dtype=np.float32,
                 init_scale: float = 1.0):
        w = glorot_uniform(rng, n_in, n_out, dtype=dtype) * init_scale
        self.weight = Parameter(w.astype(dtype))
        self.bias = Parameter(np.zeros(n_out, dtype=dtype))

    @property
    def n_in(self) -> int:
        return self.weight.shape[0]

    @property
    def n_out(self) -> int:
        return self.weight.shape[1]

    def __call__(self, x) -> Tensor:
        if not isinstance(x, Tensor):
            x = as_tensor(x, self.weight.dtype)
        return add(matmul(x, self.weight), self.bias)


class LayerNormAffine(Module):
    def __init__(self, n: int, eps: float = 1e-5, dtype=np.float32):
        self.gain = Parameter(np.ones(n, dtype=dtype))
        self.shift = Parameter(np.zeros(n, dtype=dtype))
        self.eps = eps

    def __call__(self, x) -> Tensor:
        return add(mul(layer_norm(x, self.eps), self.gain), self.shift)
