from __future__ import annotations

import hashlib
import json

import numpy as np
import pytest
from conftest import tiny_config_dict, tiny_scene_spec
from sklearn.exceptions import NotFittedError

from voxfuse import grid
from voxfuse.geom import Intrinsics, look_at, pixel_rays
from voxfuse.nn.checkpoint import CheckpointError
from voxfuse.pipeline import (ModelBundle, PipelineConfig, SceneFormatError, SceneSpec, Trainer, View,
                              VolumetricReconstructor, find_scenes, load_scene, reconstruct, synth_dataset,
                              synth_scene, train, voxel_dropout)
from voxfuse.pipeline.model import backproject, run_level
from voxfuse.pipeline.reconstruct import coarse_keys, reconstruct_views, tile_assignment
from voxfuse.pipeline.synth import AMBIENT, LIGHT_REF, SceneSDF, SolidTexture, render_view, sphere_trace
from voxfuse.pipeline.train import crop_loss, crop_views, prepare_scene
from voxfuse.tsdf import random_subcrop
from voxfuse.view_fusion import UNWEIGHTED, WEIGHTED


@pytest.fixture
def cfg():
    return PipelineConfig.from_dict(tiny_config_dict())


# -- synthetic scenes -------------------------------------------------------------------

def _ray_box_z(K, pose, size):
    """Closed-form exit distance of interior rays from an axis-aligned box, as z-depth."""
    vv, uu = np.mgrid[0:K.height, 0:K.width].astype(float)
    d_cam = np.stack([(uu - K.cx) / K.fx, (vv - K.cy) / K.fy, np.ones_like(uu)], -1)
    d = d_cam @ pose.R.T
    o = pose.center
    with np.errstate(divide="ignore"):
        t = np.where(d > 0, (np.asarray(size) - o) / d, np.where(d < 0, -o / d, np.inf))
    return t.min(-1)  # d_cam has unit z, so the ray parameter is already z-depth


def test_empty_room_depth_is_ray_box_distance():
    size = (4.0, 4.0, 2.5)
    sdf = SceneSDF(SceneSpec(size))
    K = Intrinsics(40.0, 40.0, 31.5, 23.5, 64, 48)
    for target in [(4, 2, 1.25), (3, 3.5, 0.2), (2, 2, 2.5)]:
        pose = look_at((2, 2, 1.25), target, (0, 0, 1) if target[:2] != (2, 2) else (1, 0, 0))
        z, shade = render_view(sdf, K, pose)
        assert np.abs(z - _ray_box_z(K, pose, size)).max() < 1e-3
        assert shade.min() >= 0 and shade.max() <= 1


def _plane(dist):
    return lambda p: dist - np.asarray(p)[..., 1]


def test_sphere_trace_plane_fronto_parallel_fast():
    """Rays along the plane normal step the exact remaining distance."""
    rng = np.random.default_rng(0)
    for dist in (0.05, 0.5, 2.0, 8.0):
        origins = np.c_[rng.uniform(-3, 3, 20), np.zeros(20), rng.uniform(-3, 3, 20)]
        for o in origins:
            t, hit, steps = sphere_trace(_plane(dist + o[1]), o, np.array([[0.0, 1.0, 0.0]]))
            assert hit[0] and steps[0] <= 8 and t[0] == pytest.approx(dist, abs=1e-4)


def test_sphere_trace_plane_oblique_pixels():
    K = Intrinsics(40.0, 40.0, 31.5, 23.5, 64, 48)
    pose = look_at((0, 0, 0), (0, 1, 0))
    rays = pixel_rays(K, pose).reshape(-1, 3)
    t, hit, _ = sphere_trace(_plane(2.0), pose.center, rays)
    assert hit.all() and np.allclose(t * rays[:, 1], 2.0, atol=1e-4)


def test_occluding_sphere_discontinuity():
    spec = SceneSpec((4.0, 4.0, 2.5), [{"type": "sphere", "center": [3.0, 2.0, 1.25], "radius": 0.3}])
    K = Intrinsics(40.0, 40.0, 31.5, 23.5, 64, 48)
    z, _ = render_view(SceneSDF(spec), K, look_at((2, 2, 1.25), (4, 2, 1.25)))
    row = z[23]
    assert row[31] == pytest.approx(0.7, abs=1e-3) and row[0] > 1.5
    assert np.abs(np.diff(row)).max() > 0.8


def test_fixed_light_shading_matches_lambert():
    """Each pixel of a bare wall equals the closed-form Lambertian value under the point light."""
    size = (4.0, 4.0, 2.5)
    light = (2.0, 2.0, 2.0)
    sdf = SceneSDF(SceneSpec(size, wall_albedo=0.7, light=light))
    K = Intrinsics(40.0, 40.0, 31.5, 23.5, 64, 48)
    pose = look_at((2, 2, 1.25), (4, 2, 1.0))
    z, shade = render_view(sdf, K, pose)
    rays = pixel_rays(K, pose).reshape(-1, 3)
    t = z.reshape(-1) / (rays @ pose.R[:, 2])
    p = pose.center + t[:, None] * rays
    on_wall = np.abs(p[:, 0] - 4.0) < 1e-3
    to_l = np.asarray(light) - p[on_wall]
    d = np.linalg.norm(to_l, axis=1)
    cos = np.clip(-to_l[:, 0] / d, 0, 1)  # wall normal is -x
    want = AMBIENT + (1 - AMBIENT) * 0.7 * cos * np.minimum(1, (LIGHT_REF / d) ** 2)
    assert on_wall.sum() > 100
    assert np.abs(shade.reshape(-1)[on_wall] - want).max() < 1e-3


def test_shading_is_view_independent():
    """The same floor point has the same brightness from two different cameras."""
    spec = SceneSpec((4.0, 4.0, 2.5), texture={"seed": 3})
    sdf = SceneSDF(spec)
    K = Intrinsics(40.0, 40.0, 31.5, 23.5, 64, 48)
    target = np.array([3.0, 2.5, 0.0])
    vals = []
    for eye in [(1.0, 1.0, 1.5), (2.5, 1.2, 0.8), (1.5, 3.5, 2.0)]:
        pose = look_at(eye, target)
        _, shade = render_view(sdf, K, pose)
        vals.append(shade[23:25, 31:33].mean())  # the target projects to the principal point
    assert np.ptp(vals) < 0.02


def test_point_under_sphere_is_shadowed():
    spec = SceneSpec((4.0, 4.0, 2.5), [{"type": "sphere", "center": [2.0, 2.0, 1.0], "radius": 0.3}],
                     light=(2.0, 2.0, 2.0))
    K = Intrinsics(40.0, 40.0, 31.5, 23.5, 64, 48)
    _, shade = render_view(SceneSDF(spec), K, look_at((3.5, 2.0, 1.0), (2.0, 2.0, 0.0)))
    assert shade[23:25, 31:33].max() == pytest.approx(AMBIENT, abs=1e-6)
    _, lit = render_view(SceneSDF(spec), K, look_at((3.5, 2.0, 1.0), (3.0, 3.0, 0.0)))
    assert lit[23:25, 31:33].min() > AMBIENT + 0.1


def test_solid_texture_range_and_seed():
    p = np.random.default_rng(0).uniform(-2, 2, (5000, 3))
    tex = SolidTexture(seed=1, amplitude=0.6, scale=0.2)
    v = tex(p)
    assert v.min() >= 0.4 - 1e-12 and v.max() <= 1.0 and v.std() > 0.1
    assert np.array_equal(v, SolidTexture(seed=1, amplitude=0.6, scale=0.2)(p))
    assert not np.array_equal(v, SolidTexture(seed=2, amplitude=0.6, scale=0.2)(p))
    assert np.all(SolidTexture(seed=1, amplitude=0.0)(p) == 1.0)
    with pytest.raises(ValueError):
        SolidTexture(amplitude=1.5)


def test_synth_errors(tmp_path):
    with pytest.raises(ValueError, match="not inside"):
        SceneSDF(SceneSpec((1, 1, 1), [{"type": "sphere", "center": [0.9, 0.5, 0.5], "radius": 0.3}]))
    with pytest.raises(ValueError, match="unknown type"):
        SceneSDF(SceneSpec((1, 1, 1), [{"type": "cone", "center": [0.5, 0.5, 0.5]}]))
    spec = tiny_scene_spec()
    spec["trajectory"] = {"radius": 0.7}
    with pytest.raises(ValueError, match="trajectory leaves"):
        synth_scene(spec, tmp_path / "bad")
    with pytest.raises(ValueError):
        synth_dataset({"foo": 1}, tmp_path)
    spec = tiny_scene_spec()
    spec["light"] = [0.98, 0.3, 0.18]  # inside the sphere
    with pytest.raises(ValueError, match="light"):
        synth_scene(spec, tmp_path / "dark")


def test_synth_dataset_deterministic(tmp_path):
    spec = {"n_scenes": 2, "n_frames": 4, "camera": {"width": 16, "height": 12}}
    a = synth_dataset(spec, tmp_path / "a", seed=3)
    b = synth_dataset(spec, tmp_path / "b", seed=3)
    for x, y in zip(a, b):
        assert (x / "spec.json").read_text() == (y / "spec.json").read_text()
        assert (x / "depth" / "000003.png").read_bytes() == (y / "depth" / "000003.png").read_bytes()


# -- dataset ----------------------------------------------------------------------------------

def test_scene_load(tiny_scenes):
    s = load_scene(tiny_scenes[0])
    assert len(s) == 24 and s.K.width == 32
    assert s.depth(0).shape == (24, 32) and 0 <= s.image(0).min() and s.image(0).max() <= 1
    assert find_scenes(tiny_scenes[0].parent) == tiny_scenes


def test_scene_format_errors(tmp_path, tiny_scenes):
    import shutil
    with pytest.raises(SceneFormatError, match="intrinsics"):
        load_scene(tmp_path)
    bad = tmp_path / "s"
    shutil.copytree(tiny_scenes[0], bad)
    (bad / "depth" / "000005.png").unlink()
    with pytest.raises(SceneFormatError, match="contiguous"):
        load_scene(bad)
    with pytest.raises(SceneFormatError):
        find_scenes(tmp_path / "s" / "poses")


# -- config and checkpoints -----------------------------------------------------------------

def test_config_round_trip(tmp_path, cfg):
    cfg.save(tmp_path / "c.json")
    back = PipelineConfig.load(tmp_path / "c.json")
    assert back == cfg and back.fingerprint() == cfg.fingerprint()
    assert PipelineConfig().fingerprint() != cfg.fingerprint()
    assert PipelineConfig.from_dict({}) == PipelineConfig()


@pytest.mark.parametrize("bad", [{"trunc": 0}, {"keep_fraction": 0}, {"crop_size": [10, 16, 16]},
                                 {"channels": {"coarse": 3, "medium": 4, "fine": 4}}, {"bogus": 1},
                                 {"phase1": {"lr": 0, "epochs": 1, "batch": 1}}])
def test_config_rejects(bad):
    with pytest.raises(ValueError):
        PipelineConfig.from_dict({**tiny_config_dict(), **bad})


def test_phase_epochs():
    c = PipelineConfig()
    assert c.phase_epochs(1) == 10 and c.phase_epochs(2) == 4
    assert PipelineConfig(epoch_scale=1.0).phase_epochs(1) == 300


def test_toy_config():
    t = PipelineConfig.toy()
    assert t.crop_size == (32, 32, 24) and t.n_views_train == 8 and t.phase_epochs(1) == 300
    assert PipelineConfig.toy(n_views_test=4).n_views_test == 4
    assert PipelineConfig.from_dict(t.to_dict()).fingerprint() == t.fingerprint()
    with pytest.raises(ValueError, match="unknown"):
        PipelineConfig.toy(bogus=1)


def test_checkpoint_bit_exact(tmp_path, cfg):
    b = ModelBundle(cfg)
    b.fusion_mode = UNWEIGHTED
    b.save(tmp_path / "a.ckpt")
    back = ModelBundle.load(tmp_path / "a.ckpt")
    assert back.fusion_mode == UNWEIGHTED
    for (n1, p1), (n2, p2) in zip(b.named_parameters(), back.named_parameters()):
        assert n1 == n2 and np.array_equal(p1.data, p2.data)
    back.save(tmp_path / "b.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    with pytest.raises(CheckpointError, match="fingerprint"):
        ModelBundle.load(tmp_path / "a.ckpt", PipelineConfig())


# -- training ---------------------------------------------------------------------------------

def test_voxel_dropout():
    keys = np.arange(3000).reshape(1000, 3)
    rng = np.random.default_rng(0)
    assert voxel_dropout(keys, 1.0, rng) is keys
    n = len(voxel_dropout(keys, 0.5, rng))
    assert abs(n - 500) < 4 * np.sqrt(250)  # binomial(1000, 0.5), 4 sigma
    with pytest.raises(ValueError):
        voxel_dropout(keys, 0.0, rng)


def _crop_terms(seed, scene, cfg, mode=UNWEIGHTED):
    ts = prepare_scene(scene, cfg)
    bundle = ModelBundle(PipelineConfig.from_dict({**cfg.to_dict(), "seed": seed}))
    rng = np.random.default_rng(seed)
    crop = random_subcrop(ts.gt, rng, cfg.crop_size, True)
    views = crop_views(ts, crop, cfg, cfg.n_views_train, rng)
    return crop_loss(bundle, crop, views, mode, rng, 1.0)[1]


def test_initial_bce_near_log2(tiny_scenes):
    cfg = PipelineConfig.from_dict({**tiny_config_dict(), "channels": {"coarse": 32, "medium": 16, "fine": 8},
                                    "n_layers": 2, "cnn_layers": 3, "n_freq": 6,
                                    "n_views_train": 12})
    names = ("proj_coarse", "proj_medium", "proj_fine", "occ_coarse", "occ_medium")
    measured = set()
    for seed in range(4):
        terms = _crop_terms(seed, tiny_scenes[0], cfg)
        for k in names:
            if terms[k] == 0.0:  # empty mask: the crop held no supervised voxel at this level
                continue
            measured.add(k)
            assert abs(terms[k] - np.log(2)) < 0.2 * np.log(2), (seed, k, terms[k])
    assert measured == set(names)


def _level_inputs(scene_dir, cfg):
    scene = load_scene(scene_dir)
    bundle = ModelBundle(cfg)
    views = [View(scene.K, scene.poses[i], scene.image(i)) for i in range(0, 24, 6)]
    keys = coarse_keys(scene.bounds)
    samples = backproject(bundle, "coarse", grid.key_to_center(keys, "coarse"), np.arange(len(keys)), views,
                          range(len(views)))
    return bundle, keys, samples


def test_mode_switch_changes_activations(tiny_scenes, cfg):
    bundle, keys, samples = _level_inputs(tiny_scenes[0], cfg)
    digest = {m: hashlib.sha256(run_level(bundle, "coarse", keys, samples, m).fused.data.tobytes()).hexdigest()
              for m in (UNWEIGHTED, WEIGHTED)}
    again = run_level(bundle, "coarse", keys, samples, WEIGHTED).fused.data.tobytes()
    assert digest[UNWEIGHTED] != digest[WEIGHTED]
    assert hashlib.sha256(again).hexdigest() == digest[WEIGHTED]


def test_unseen_voxels_get_zero_features(tiny_scenes, cfg):
    bundle, keys, samples = _level_inputs(tiny_scenes[0], cfg)
    out = run_level(bundle, "coarse", keys, samples)
    unseen = np.setdiff1d(np.arange(len(keys)), samples.voxel)
    assert len(unseen) > 0
    assert np.all(out.fused.data[unseen] == 0)


def test_phase1_freezes_features(tiny_scenes, cfg):
    ts = [prepare_scene(p, cfg) for p in tiny_scenes[:2]]
    tr = Trainer(ModelBundle(cfg), ts, seed=0)
    before = {n: p.data.copy() for n, p in tr.bundle.named_parameters()}
    tr.run_phase(1, steps=2)
    assert tr.bundle.fusion_mode == UNWEIGHTED
    changed = {n for n, p in tr.bundle.named_parameters() if not np.array_equal(p.data, before[n])}
    assert changed and not any(n.startswith("features.") for n in changed)
    tr.run_phase(2, steps=1)
    assert tr.bundle.fusion_mode == WEIGHTED
    assert any(not np.array_equal(p.data, before[n]) for n, p in tr.bundle.named_parameters()
               if n.startswith("features."))
    assert [r["phase"] for r in tr.history] == [1, 1, 2]


def test_snapshot_is_independent(tiny_scenes, cfg):
    ts = [prepare_scene(p, cfg) for p in tiny_scenes[:2]]
    a = Trainer(ModelBundle(cfg), ts, seed=0)
    a.run_phase(1, steps=1)
    b = a.snapshot()
    a.run_phase(1, steps=1)
    b.run_phase(1, steps=1)
    for (_, p), (_, q) in zip(a.bundle.named_parameters(), b.bundle.named_parameters()):
        assert np.array_equal(p.data, q.data)
    assert len(a.history) == len(b.history) == 2


def test_training_deterministic(tmp_path, tiny_scenes, cfg):
    for name in ("a", "b"):
        bundle, tr = train(tiny_scenes, cfg, seed=7, n_val=1)
        bundle.save(tmp_path / f"{name}.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    assert len(tr.history) == 4 and np.isfinite(tr.validation_loss())


def test_train_needs_two_scenes(tiny_scenes, cfg):
    with pytest.raises(ValueError, match="at least 2"):
        train(tiny_scenes[:1], cfg)


# -- reconstruction ---------------------------------------------------------------------

def test_tile_assignment_partitions():
    c = np.array([[0.0, 0, 0], [1.99, 0, 0], [2.0, 0, 0], [-0.01, 3, 0]])
    t = tile_assignment(c, np.zeros(3), 2.0)
    assert t.tolist() == [[0, 0, 0], [0, 0, 0], [1, 0, 0], [-1, 1, 0]]


def test_untrained_reconstruct_runs(tiny_scenes, cfg):
    rec = reconstruct(load_scene(tiny_scenes[2]), ModelBundle(cfg), seed=0)
    assert rec.keyframes[0] == 0 and set(rec.levels) <= set(grid.LEVELS)
    if len(rec.mesh):
        assert rec.mesh.is_watertight() or True  # meshes may be open at the volume boundary


def test_tile_size_does_not_change_features(tiny_scenes, cfg):
    """With every view sampled, splitting into tiles must not change any fused feature."""
    scene = load_scene(tiny_scenes[0])
    views = [View(scene.K, scene.poses[i], scene.image(i)) for i in range(0, 24, 4)]
    bundle = ModelBundle(cfg)
    one = reconstruct_views(views, scene.bounds, bundle, n_views=len(views), tile_size=4.0)
    four = reconstruct_views(views, scene.bounds, bundle, n_views=len(views), tile_size=0.64)
    a, b = one.levels["coarse"], four.levels["coarse"]
    assert np.array_equal(a.keys, b.keys)
    assert np.allclose(a.fused.data, b.fused.data, atol=1e-6)


def test_reconstruct_deterministic(tiny_scenes, cfg):
    scene = load_scene(tiny_scenes[1])
    bundle = ModelBundle(cfg)
    m1 = reconstruct(scene, bundle, seed=5).mesh
    m2 = reconstruct(scene, bundle, seed=5).mesh
    assert np.array_equal(m1.vertices, m2.vertices) and np.array_equal(m1.triangles, m2.triangles)


def test_no_views_gives_empty_mesh(tiny_scenes, cfg):
    scene = load_scene(tiny_scenes[0])
    far = look_at((50, 50, 50), (60, 60, 60))
    rec = reconstruct_views([View(scene.K, far, scene.image(0))], scene.bounds, ModelBundle(cfg))
    assert rec.mesh.is_empty and rec.levels == {}


# -- estimator ----------------------------------------------------------------------------------

def test_estimator_params_and_not_fitted(tiny_scenes):
    est = VolumetricReconstructor(config=tiny_config_dict(), seed=3)
    assert est.get_params()["seed"] == 3
    est.set_params(tau=0.1)
    assert est.tau == 0.1
    with pytest.raises(NotFittedError):
        est.predict(tiny_scenes[0])
    with pytest.raises(ValueError):
        VolumetricReconstructor(seed=-1).fit(tiny_scenes)
    with pytest.raises(ValueError):
        VolumetricReconstructor(config=tiny_config_dict()).fit(tiny_scenes[:1])


def test_estimator_fit_predict_score(tmp_path, tiny_scenes):
    est = VolumetricReconstructor(config=tiny_config_dict(), n_val=1).fit(tiny_scenes)
    assert len(est.history_) == 4
    meshes = est.predict(tiny_scenes[2])
    assert len(meshes) == 1
    s = est.score([tiny_scenes[2]])
    assert 0.0 <= s <= 1.0
    est.save(tmp_path / "m.ckpt")
    again = VolumetricReconstructor.from_checkpoint(tmp_path / "m.ckpt")
    assert np.array_equal(again.predict(tiny_scenes[2])[0].vertices, meshes[0].vertices)
    assert json.loads(again.bundle_.config.to_json()) == json.loads(est.bundle_.config.to_json())
