from __future__ import annotations

import numpy as np
import pytest

from voxfuse.gradchecks import check_fusion
from voxfuse.nn import Tensor
from voxfuse.view_fusion import (UNWEIGHTED, WEIGHTED, FusionModel, aggregate, aggregation_weights, fuse_voxels,
                                 pose_encoding, transformer_encode)


def _unit(rng, n):
    d = rng.normal(size=(n, 3))
    return d / np.linalg.norm(d, axis=1, keepdims=True)


def test_pose_encoding_layout():
    d = np.array([[1.0, 0.0, 0.0]])
    enc = pose_encoding(d, 2)
    assert enc.shape == (1, 12)
    # x component: sin(pi), cos(pi), sin(2pi), cos(2pi)
    assert np.allclose(enc[0, :4], [0, -1, 0, 1], atol=1e-12)
    assert np.allclose(enc[0, 4:8], [0, 1, 0, 1])


def test_pose_encoding_rejects_non_unit():
    with pytest.raises(ValueError):
        pose_encoding(np.array([[1.0, 1.0, 0.0]]))


def test_weights_include_zero_entry():
    w = aggregation_weights(Tensor(np.zeros((1, 3)))).data
    assert np.allclose(w, 0.25)


def test_single_view_matches_sigmoid_weight():
    rng = np.random.default_rng(0)
    fused = Tensor(rng.normal(size=(1, 1, 4)))
    x = 0.7
    out = aggregate(fused, Tensor(np.array([[x]]))).data
    assert np.allclose(out, fused.data[0] / (1 + np.exp(-x)))


def test_encoder_is_permutation_equivariant():
    rng = np.random.default_rng(1)
    model = FusionModel(8, rng=rng, dtype=np.float64)
    tok = rng.normal(size=(6, 8))
    perm = rng.permutation(6)
    a = transformer_encode(model, tok).data
    b = transformer_encode(model, tok[perm]).data
    assert np.allclose(a[perm], b, atol=1e-12)


def test_fuse_voxels_matches_per_voxel_loop():
    rng = np.random.default_rng(2)
    model = FusionModel(4, rng=rng, dtype=np.float64)
    M, V = 23, 7
    vi = rng.integers(0, V - 1, M)  # voxel V-1 gets no samples
    feats = rng.normal(size=(M, 4))
    dirs = _unit(rng, M)
    dv = rng.uniform(0.2, 3, M)
    for mode in (WEIGHTED, UNWEIGHTED):
        out = fuse_voxels(model, vi, V, feats, dirs, dv, mode)
        assert out.features.shape == (V, 4) and out.logits.shape == (M,)
        tok = model.build_tokens(feats, dirs, dv).data
        for v in range(V):
            idx = np.flatnonzero(vi == v)
            if len(idx) == 0:
                assert np.all(out.features.data[v] == 0)
                continue
            enc = model.encode(Tensor(tok[idx][None]))
            logits = model.occupancy_logits(enc)
            want = aggregate(enc, logits).data[0] if mode == WEIGHTED else enc.data[0].mean(axis=0)
            assert np.allclose(out.features.data[v], want, atol=1e-12)
            assert np.allclose(out.logits.data[idx], logits.data[0], atol=1e-12)
    assert list(out.counts) == list(np.bincount(vi, minlength=V))


def test_fuse_voxels_no_samples():
    model = FusionModel(4, rng=np.random.default_rng(0))
    out = fuse_voxels(model, np.zeros(0, int), 3, np.zeros((0, 4)), np.zeros((0, 3)), np.zeros(0))
    assert out.features.shape == (3, 4) and not out.features.data.any()


def test_unknown_mode():
    model = FusionModel(4, rng=np.random.default_rng(0))
    with pytest.raises(ValueError):
        fuse_voxels(model, np.zeros(1, int), 1, np.zeros((1, 4)), np.array([[1.0, 0, 0]]), np.ones(1), "max")


def test_modes_differ():
    rng = np.random.default_rng(3)
    model = FusionModel(4, rng=rng, dtype=np.float64)
    args = (np.zeros(5, int), 1, rng.normal(size=(5, 4)), _unit(rng, 5), rng.uniform(0.5, 2, 5))
    a = fuse_voxels(model, *args, mode=WEIGHTED).features.data
    b = fuse_voxels(model, *args, mode=UNWEIGHTED).features.data
    assert a.tobytes() != b.tobytes()


def test_fusion_composite_gradients():
    (r,) = check_fusion(n_cases=2)
    assert r.ok, r.error
