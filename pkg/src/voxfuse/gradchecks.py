"""Finite-difference gradient suites for the release gate (``voxfuse gradcheck``).

Every suite runs in 64-bit floats and returns one :class:`CheckResult` per
case. Primitive ops are held to a relative error of 1e-4, composites to 1e-3.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import nn
from .features import STRIDES, PatchFeatures, sample_features
from .nn import Tensor, check_gradients
from .sparse_cnn import LevelNetwork, SparseConvLayer, neighbor_table, sparse_conv3
from .view_fusion import FusionModel, aggregate, transformer_encode

PRIMITIVE_TOL = 1e-4
COMPOSITE_TOL = 1e-3
CASES_PER_OP = 50


@dataclass
class CheckResult:
    suite: str
    case: str
    error: float
    tol: float

    @property
    def ok(self) -> bool:
        return bool(np.isfinite(self.error) and self.error < self.tol)


def _shape(rng, ndim=None, lo=1, hi=4) -> tuple[int, ...]:
    nd = int(rng.integers(1, 4)) if ndim is None else ndim
    return tuple(int(x) for x in rng.integers(lo, hi + 1, nd))


def _away_from_zero(rng, shape, margin=0.05):
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * margin, x)


def _t(x) -> Tensor:
    return Tensor(np.array(x, dtype=np.float64), requires_grad=True)


def _unary(fn, sampler=None):
    def make(rng):
        x = _t(rng.normal(size=_shape(rng)) if sampler is None else sampler(rng, _shape(rng)))
        return (lambda: fn(x)), [x]
    return make


def _binary_broadcast(fn):
    def make(rng):
        shape = _shape(rng, ndim=int(rng.integers(1, 4)))
        other = tuple(1 if rng.random() < 0.3 else s for s in shape)
        a, b = _t(rng.normal(size=shape)), _t(rng.normal(size=other))
        return (lambda: fn(a, b)), [a, b]
    return make


def _matmul(rng):
    n, k, m = (int(x) for x in rng.integers(1, 5, 3))
    batch = () if rng.random() < 0.5 else (int(rng.integers(1, 3)),)
    a, b = _t(rng.normal(size=batch + (n, k))), _t(rng.normal(size=(k, m)))
    return (lambda: nn.matmul(a, b)), [a, b]


def _concat(rng):
    shape = _shape(rng, ndim=2)
    ax = int(rng.integers(0, 2))
    other = list(shape)
    other[ax] = int(rng.integers(1, 4))
    a, b = _t(rng.normal(size=shape)), _t(rng.normal(size=other))
    return (lambda: nn.concat([a, b], axis=ax)), [a, b]


def _slice(rng):
    shape = _shape(rng, ndim=2, lo=2, hi=5)
    x = _t(rng.normal(size=shape))
    i0 = int(rng.integers(0, shape[0]))
    idx = (slice(i0, shape[0]), rng.integers(0, shape[1], 3))
    return (lambda: nn.getitem(x, idx)), [x]


def _gather(rng):
    x = _t(rng.normal(size=_shape(rng, ndim=2)))
    idx = rng.integers(0, x.shape[0], 6)
    return (lambda: nn.gather_rows(x, idx)), [x]


def _weighted(fn):
    """Random linear functional of ``fn``'s output, so symmetric outputs still test every path."""
    def make(rng):
        x = _t(rng.normal(size=_shape(rng, ndim=2, lo=2)))
        w = rng.normal(size=x.shape)
        return (lambda: nn.tsum(nn.mul(fn(x), w))), [x]
    return make


def _reshape(rng):
    x = _t(rng.normal(size=(2, 3, 2)))
    return (lambda: nn.mul(nn.reshape(x, (3, 4)), np.arange(12.0).reshape(3, 4))), [x]


def _transpose(rng):
    x = _t(rng.normal(size=_shape(rng, ndim=3)))
    w = rng.normal(size=(x.shape[2], x.shape[0], x.shape[1]))
    return (lambda: nn.mul(nn.transpose(x, (2, 0, 1)), w)), [x]


def _reduce(fn):
    def make(rng):
        x = _t(rng.normal(size=_shape(rng, ndim=2)))
        axis = [None, 0, 1][int(rng.integers(0, 3))]
        w = rng.normal(size=np.sum(x.data, axis=axis).shape)
        return (lambda: nn.mul(fn(x, axis=axis), w)), [x]
    return make


def _bce(rng):
    n = int(rng.integers(1, 8))
    x = _t(rng.normal(scale=3.0, size=n))
    y = rng.integers(0, 2, n)
    m = rng.random(n) < 0.8
    m[0] = True
    return (lambda: nn.bce_loss(x, y, m)), [x]


def _log_l1(rng):
    n = int(rng.integers(1, 8))
    gt = rng.uniform(-1, 1, n)
    # keep |pred - gt| and |pred| clear of the kinks
    pred = gt + np.where(rng.random(n) < 0.5, -1, 1) * rng.uniform(0.05, 0.3, n)
    pred = np.where(np.abs(pred) < 0.05, 0.1, pred)
    p = _t(pred)
    return (lambda: nn.log_tsdf_l1(p, gt)), [p]


def _total(rng):
    terms = [_t(rng.normal(size=())) for _ in range(6)]
    return (lambda: nn.total_loss(terms[:3], terms[3:5], terms[5])), terms


PRIMITIVES: dict[str, Callable] = {
    "add": _binary_broadcast(nn.add),
    "mul": _binary_broadcast(nn.mul),
    "neg": _unary(nn.neg),
    "scale": _unary(lambda x: nn.scale(x, 1.7)),
    "matmul": _matmul,
    "concat": _concat,
    "slice": _slice,
    "gather_rows": _gather,
    "reshape": _reshape,
    "transpose": _transpose,
    "relu": _unary(nn.relu, _away_from_zero),
    "abs": _unary(nn.tabs, _away_from_zero),
    "clamp": _unary(lambda x: nn.clamp(x, -0.5, 0.5),
                    lambda rng, s: np.where(rng.random(s) < 0.5, rng.uniform(-0.45, 0.45, s), 2 * rng.normal(size=s))),
    "sigmoid": _unary(nn.sigmoid),
    "tanh": _unary(nn.tanh),
    "exp": _unary(nn.exp),
    "log": _unary(nn.log, lambda rng, s: rng.uniform(0.2, 3.0, s)),
    "softmax": _weighted(lambda x: nn.softmax(x, axis=-1)),
    "layer_norm": _weighted(nn.layer_norm),
    "sum": _reduce(nn.tsum),
    "mean": _reduce(nn.mean),
}

LOSSES: dict[str, Callable] = {"bce_loss": _bce, "log_tsdf_l1": _log_l1, "total_loss": _total}


def _run_cases(suite: str, makers: dict[str, Callable], n_cases: int, tol: float, seed: int) -> list[CheckResult]:
    out = []
    for name, make in makers.items():
        rng = np.random.default_rng([seed, sum(map(ord, name))])
        worst = 0.0
        for _ in range(n_cases):
            fn, tensors = make(rng)
            worst = max(worst, check_gradients(fn, tensors))
        out.append(CheckResult(suite, name, worst, tol))
    return out


def check_primitives(seed: int = 0, n_cases: int = CASES_PER_OP) -> list[CheckResult]:
    return _run_cases("primitives", PRIMITIVES, n_cases, PRIMITIVE_TOL, seed)


def check_losses(seed: int = 0, n_cases: int = CASES_PER_OP) -> list[CheckResult]:
    return _run_cases("losses", LOSSES, n_cases, PRIMITIVE_TOL, seed)


def _params(module) -> list[Tensor]:
    return [p for _, p in module.named_parameters()]


def check_fusion(seed: int = 0, n_cases: int = 3) -> list[CheckResult]:
    """``build_tokens -> transformer -> aggregate`` w.r.t. features and every fusion parameter."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_cases):
        C, N = 4, int(rng.integers(1, 5))
        model = FusionModel(C, n_layers=2, heads=2, n_freq=2, rng=rng, dtype=np.float64)
        feats = _t(rng.normal(size=(N, C)))
        dirs = rng.normal(size=(N, 3))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        d_v = rng.uniform(0.3, 3.0, N)
        w = rng.normal(size=(1, C))

        def fn():
            tok = model.build_tokens(feats, dirs, d_v)
            fused = transformer_encode(model, nn.reshape(tok, (1, N, C)))
            logits = model.occupancy_logits(fused)
            return nn.tsum(nn.mul(aggregate(fused, logits), w))

        worst = max(worst, check_gradients(fn, [feats] + _params(model)))
    return [CheckResult("fusion", "build_tokens->transformer->aggregate", worst, COMPOSITE_TOL)]


def check_sparse_conv(seed: int = 0, n_cases: int = 5) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    worst_conv, worst_net = 0.0, 0.0
    for _ in range(n_cases):
        keys = np.argwhere(rng.random((3, 3, 3)) < 0.5)
        if len(keys) == 0:
            keys = np.zeros((1, 3), np.int64)
        nbr = neighbor_table(keys, "fine")
        layer = SparseConvLayer(2, 3, rng, dtype=np.float64)
        x = _t(rng.normal(size=(len(keys), 2)))
        w = rng.normal(size=(len(keys), 3))
        worst_conv = max(worst_conv, check_gradients(lambda: nn.mul(sparse_conv3(x, nbr, layer), w),
                                                     [x, layer.weight, layer.bias]))
        net = LevelNetwork("fine", 2, n_layers=2, hidden=3, rng=rng, dtype=np.float64)
        worst_net = max(worst_net, check_gradients(lambda: nn.mul(net(x, keys, nbr), w[:, 0]),
                                                   [x] + _params(net)))
    return [CheckResult("sparse_conv", "sparse_conv3", worst_conv, PRIMITIVE_TOL),
            CheckResult("sparse_conv", "level_network", worst_net, COMPOSITE_TOL)]


def check_features(seed: int = 0) -> list[CheckResult]:
    """Patch embedding followed by bilinear sampling, w.r.t. the embedding parameters."""
    rng = np.random.default_rng(seed)
    feats = PatchFeatures({"coarse": 2, "medium": 2, "fine": 2}, rng=rng, dtype=np.float64)
    image = rng.random((20, 24))
    u, v = rng.uniform(-0.5, 23.4, 7), rng.uniform(-0.5, 19.4, 7)
    w = rng.normal(size=(7, 2))

    def fn():
        pyr = feats.extract(image)
        out = None
        for lvl in ("coarse", "medium", "fine"):
            f, _ = sample_features(pyr.maps[lvl], STRIDES[lvl], pyr.image_size, u, v)
            term = nn.tsum(nn.mul(f, w))
            out = term if out is None else nn.add(out, term)
        return out

    return [CheckResult("features", "extract->sample_features", check_gradients(fn, _params(feats)),
                        COMPOSITE_TOL)]


SUITES: dict[str, Callable[..., list[CheckResult]]] = {
    "primitives": check_primitives,
    "losses": check_losses,
    "fusion": check_fusion,
    "sparse_conv": check_sparse_conv,
    "features": check_features,
}


def run_suites(names=None, seed: int = 0) -> list[CheckResult]:
    """Run the named suites (all by default); a primitive or loss name runs just that op."""
    if not names:
        names = list(SUITES)
    results = []
    for name in names:
        if name in SUITES:
            results += SUITES[name](seed)
        elif name in PRIMITIVES:
            results += _run_cases("primitives", {name: PRIMITIVES[name]}, CASES_PER_OP, PRIMITIVE_TOL, seed)
        elif name in LOSSES:
            results += _run_cases("losses", {name: LOSSES[name]}, CASES_PER_OP, PRIMITIVE_TOL, seed)
        else:
            raise KeyError(f"unknown gradcheck suite or op {name!r}; choose from "
                           f"{sorted(SUITES) + sorted(PRIMITIVES) + sorted(LOSSES)}")
    return results
