from __future__ import annotations

import numpy as np
import pytest

from conftest import sphere_cameras, sphere_depth
from voxfuse import grid
from voxfuse.geom import Aabb, Intrinsics, Pose, project_points
from voxfuse.tsdf import (TsdfVolume, integrate_depth, load_gt, make_gt, random_subcrop, read_depth_png, save_gt,
                          write_depth_png)

K = Intrinsics(48.0, 48.0, 31.5, 23.5, 64, 48)
BOX = Aabb([-0.6] * 3, [0.6] * 3)


@pytest.fixture(scope="module")
def sphere_views():
    cams = sphere_cameras(12, 1.5, K)
    return cams, [sphere_depth(k, p, (0, 0, 0), 0.4) for k, p in cams]


def test_depth_png_round_trip(tmp_path):
    d = np.array([[0.0, 1.2345], [2.0, 65.535]])
    write_depth_png(tmp_path / "d.png", d)
    assert np.allclose(read_depth_png(tmp_path / "d.png"), np.round(d * 1000) / 1000)


def test_fronto_parallel_wall_values():
    vol = TsdfVolume.covering(Aabb([-0.2, -0.2, 0.8], [0.2, 0.2, 1.4]))
    integrate_depth(vol, np.full((48, 64), 1.0), K, Pose.identity())
    z = vol.centers()[:, 2].reshape(vol.shape)
    obs = vol.observed
    expect = np.clip((1.0 - z) / vol.trunc, -1, 1)
    assert np.allclose(vol.tsdf[obs], expect[obs], atol=1e-8)
    # nothing deeper than one truncation behind the wall is touched
    assert not obs[z > 1.0 + vol.trunc].any()


def test_permutation_invariance_bit_exact(sphere_views):
    cams, depths = sphere_views
    order = np.random.default_rng(0).permutation(len(cams))
    a, b = TsdfVolume.covering(BOX), TsdfVolume.covering(BOX)
    for (k, p), d in zip(cams, depths):
        integrate_depth(a, d, k, p)
    for i in order:
        integrate_depth(b, depths[i], *cams[i])
    assert np.array_equal(a.tsdf_sum, b.tsdf_sum) and np.array_equal(a.weight, b.weight)
    assert a.tsdf.tobytes() == b.tsdf.tobytes()


def test_projective_mode_available(sphere_views):
    cams, depths = sphere_views
    vol = TsdfVolume.covering(BOX)
    integrate_depth(vol, depths[0], *cams[0], distance="projective")
    assert vol.observed.any()
    with pytest.raises(ValueError):
        integrate_depth(vol, depths[0], *cams[0], distance="bogus")


def test_gt_occupancy_matches_brute_force(sphere_views):
    cams, depths = sphere_views
    gt = make_gt(depths, cams, BOX)
    vol = gt.volume
    fine = np.zeros(vol.shape, bool)
    for idx in np.ndindex(*vol.shape):
        fine[idx] = vol.weight[idx] > 0 and abs(vol.tsdf[idx]) < 1.0
    assert np.array_equal(gt.levels["fine"].occupied, fine)
    # a parent is occupied iff any child is
    for name, child in (("medium", "fine"), ("coarse", "medium")):
        c = gt.levels[child].occupied
        s = tuple(n // 2 for n in c.shape)
        brute = c.reshape(s[0], 2, s[1], 2, s[2], 2).any(axis=(1, 3, 5))
        assert np.array_equal(gt.levels[name].occupied, brute)


def test_gt_save_load(tmp_path, sphere_views):
    cams, depths = sphere_views
    gt = make_gt(depths, cams, BOX)
    save_gt(gt, tmp_path / "gt.npz")
    back = load_gt(tmp_path / "gt.npz")
    assert np.array_equal(back.tsdf, gt.tsdf)
    for lvl in grid.LEVELS:
        assert np.array_equal(back.levels[lvl].occupied, gt.levels[lvl].occupied)


def test_subcrop_identity_is_shifted_gt(sphere_views):
    cams, depths = sphere_views
    gt = make_gt(depths, cams, BOX)
    crop = random_subcrop(gt, np.random.default_rng(0), (16, 16, 16), augment=False)
    start = np.round(crop.transform_points(np.zeros(3)) / -0.04).astype(int) - gt.volume.origin_key
    assert np.array_equal(crop.tsdf, gt.tsdf[start[0]:start[0] + 16, start[1]:start[1] + 16, start[2]:start[2] + 16])


@pytest.mark.parametrize("reflect", [False, True])
@pytest.mark.parametrize("k", [0, 1, 2, 3])
def test_subcrop_transform_consistent(sphere_views, reflect, k):
    cams, depths = sphere_views
    gt = make_gt(depths, cams, BOX)
    crop = random_subcrop(gt, np.random.default_rng(k), (16, 16, 16), reflect=reflect, rotations=k)
    keys = gt.volume.keys()
    centers = grid.key_to_center(keys, "fine")
    local = np.floor(crop.transform_points(centers) / 0.04).astype(int)
    inside = np.all((local >= 0) & (local < 16), axis=1)
    assert inside.sum() == 16**3
    flat = gt.tsdf.reshape(-1)
    assert np.array_equal(crop.tsdf[tuple(local[inside].T)], flat[inside])
    # the transformed camera sees the transformed point at the mirrored pixel
    Kc, pc = crop.transform_camera(*cams[0])
    u, v, z = project_points(cams[0][0], cams[0][1], centers[inside][:20])
    u2, v2, z2 = project_points(Kc, pc, crop.transform_points(centers[inside][:20]))
    assert np.allclose(z, z2) and np.allclose(v, v2)
    assert np.allclose(u2, (K.width - 1 - u) if reflect else u)


def test_rotation_twice_180_is_identity(sphere_views):
    cams, depths = sphere_views
    gt = make_gt(depths, cams, BOX)
    a = random_subcrop(gt, np.random.default_rng(5), (16, 16, 16), reflect=False, rotations=2)
    rot = np.rot90(a.tsdf, 2, axes=(0, 1))
    b = random_subcrop(gt, np.random.default_rng(5), (16, 16, 16), reflect=False, rotations=0)
    assert np.array_equal(rot, b.tsdf)
