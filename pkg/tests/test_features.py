from __future__ import annotations

import numpy as np
import pytest

from voxfuse.features import (STRIDES, FeaturePyramid, PatchFeatures, patchify, pyramid_shape, sample_feature,
                              sample_features)
from voxfuse.gradchecks import check_features
from voxfuse.nn import Tensor


def test_shapes_64():
    pyr = PatchFeatures().extract(np.zeros((64, 64)))
    assert {k: pyr.shape(k)[:2] for k in STRIDES} == {"coarse": (4, 4), "medium": (8, 8), "fine": (16, 16)}


def test_stride_law_random_sizes():
    rng = np.random.default_rng(0)
    fx = PatchFeatures({"coarse": 2, "medium": 2, "fine": 2})
    for _ in range(100):
        H, W = (int(x) for x in rng.integers(1, 90, 2))
        pyr = fx.extract(rng.random((H, W)))
        for lvl, s in STRIDES.items():
            assert pyr.shape(lvl) == (-(-H // s), -(-W // s), 2) == pyramid_shape(H, W, lvl) + (2,)


def test_tiny_image_single_padded_patch():
    pyr = PatchFeatures().extract(np.full((3, 2), 0.5))
    assert pyr.shape("coarse")[:2] == (1, 1)
    assert np.allclose(patchify(np.full((3, 2), 0.5), 16), 0.5)


def test_constant_image_constant_maps():
    pyr = PatchFeatures().extract(np.full((40, 56), 0.3))
    for lvl in STRIDES:
        m = pyr.maps[lvl].data
        assert np.allclose(m, m[0, 0])


def test_sampling_cell_center_and_midpoint():
    fmap = Tensor(np.arange(12.0).reshape(3, 4, 1))
    s = 4
    # cell (j, i) centre sits at pixel ((i + 0.5) * s - 0.5)
    u = np.array([1 * s + 1.5])
    v = np.array([2 * s + 1.5])
    f, valid = sample_features(fmap, s, (12, 16), u, v)
    assert valid.all()
    assert f.data[0, 0] == pytest.approx(9.0)
    mid, _ = sample_features(fmap, s, (12, 16), np.array([1.5 + s / 2]), np.array([1.5]))
    assert mid.data[0, 0] == pytest.approx(0.5)


def test_sampling_constant_map_and_out_of_bounds():
    fmap = Tensor(np.full((3, 4, 2), 7.0))
    f, valid = sample_features(fmap, 4, (12, 16), np.array([0.0, 15.4, -0.6, 3.0]), np.array([0.0, 11.4, 0.0, 12.0]))
    assert list(valid) == [True, True, False, False]
    assert np.allclose(f.data[:2], 7.0) and np.allclose(f.data[2:], 0.0)
    pyr = FeaturePyramid({"coarse": fmap, "medium": fmap, "fine": fmap}, (12, 16))
    assert sample_feature(pyr, "fine", -1.0, 3.0) is None


def test_sampling_lipschitz():
    rng = np.random.default_rng(1)
    data = rng.normal(size=(5, 6, 3))
    fmap = Tensor(data)
    lip = max(np.abs(np.diff(data, axis=0)).max(), np.abs(np.diff(data, axis=1)).max()) / 8
    u = rng.uniform(0, 47, 200)
    v = rng.uniform(0, 39, 200)
    eps = 1e-3
    a, _ = sample_features(fmap, 8, (40, 48), u, v)
    b, _ = sample_features(fmap, 8, (40, 48), u + eps, v - eps)
    assert np.abs(a.data - b.data).max() <= 2 * lip * eps + 1e-12


def test_pyramid_archive_round_trip(tmp_path):
    pyr = PatchFeatures().extract(np.random.default_rng(0).random((30, 50)))
    pyr.save(tmp_path / "f.npz")
    back = FeaturePyramid.load(tmp_path / "f.npz")
    assert back.image_size == (30, 50)
    for lvl in STRIDES:
        assert np.array_equal(back.maps[lvl].data, pyr.maps[lvl].data)


def test_pyramid_archive_shape_checked(tmp_path):
    np.savez(tmp_path / "bad.npz", height=30, width=50, coarse=np.zeros((1, 1, 2)), medium=np.zeros((4, 7, 2)),
             fine=np.zeros((8, 13, 2)))
    with pytest.raises(ValueError, match="coarse"):
        FeaturePyramid.load(tmp_path / "bad.npz")


def test_feature_gradients():
    (r,) = check_features()
    assert r.ok, r.error
