from __future__ import annotations

import json
import math

import numpy as np
import pytest
from conftest import sphere_cameras, sphere_depth

from voxfuse.eval3d import MetricReport, metrics, point_metrics, render_depth, trim_mesh
from voxfuse.geom import Intrinsics, look_at
from voxfuse.surface import TriMesh, marching_cubes_dense


def sphere_mesh(r: float, n: int = 40, step: float = 0.04) -> TriMesh:
    idx = np.arange(n) - n // 2
    c = (np.stack(np.meshgrid(idx, idx, idx, indexing="ij"), -1) + 0.5) * step
    f = np.clip((np.linalg.norm(c, axis=-1) - r) / 0.12, -1, 1)
    return marching_cubes_dense(f, origin_key=(-(n // 2),) * 3, level="fine")


def merge(a: TriMesh, b: TriMesh) -> TriMesh:
    return TriMesh(np.concatenate([a.vertices, b.vertices]),
                   np.concatenate([a.triangles, b.triangles + len(a.vertices)]))


def quad(z: float, half: float = 1.0) -> TriMesh:
    v = np.array([[-half, -half, z], [half, -half, z], [half, half, z], [-half, half, z]])
    return TriMesh(v, np.array([[0, 1, 2], [0, 2, 3]]))


def test_self_metrics_perfect():
    m = sphere_mesh(0.5)
    rep = metrics(m, m)
    assert rep.acc == 0 and rep.comp == 0 and rep.fscore == 1.0


def test_translated_plane_scores_zero():
    rep = metrics(quad(0.1), quad(0.0), tau=0.05)
    assert rep.prec == 0 and rep.recall == 0 and rep.fscore == 0
    assert rep.acc == pytest.approx(0.1) and rep.comp == pytest.approx(0.1)


def test_point_metrics_hand_example():
    gt = np.array([[0, 0, 0], [1, 0, 0.0]])
    pred = np.array([[0, 0, 0.01], [0, 0, 0.2]])
    rep = point_metrics(pred, gt, tau=0.05)
    assert rep.prec == 0.5 and rep.recall == 0.5 and rep.fscore == 0.5
    assert rep.acc == pytest.approx(0.105)


def test_empty_prediction_json_null():
    rep = metrics(TriMesh.empty(), quad(0.0))
    assert math.isinf(rep.acc) and rep.fscore == 0
    d = json.loads(rep.to_json())
    assert d["acc"] is None and d["comp"] is None
    back = MetricReport.from_json(rep.to_json())
    assert math.isinf(back.acc) and back.fscore == 0


def test_tau_must_be_positive():
    with pytest.raises(ValueError):
        metrics(quad(0), quad(0), tau=0)


def test_render_plane_exact(small_camera):
    pose = look_at((0, 0, 2.0), (0, 0, 0), (0, 1, 0))
    d = render_depth(quad(0.0, 5.0), small_camera, pose)
    assert np.allclose(d, 2.0)


def test_render_sphere_close_to_analytic(small_camera):
    K = small_camera
    m = sphere_mesh(0.5)
    for _, pose in sphere_cameras(4, 2.0, K):
        d = render_depth(m, K, pose)
        ref = sphere_depth(K, pose, (0, 0, 0), 0.5)
        both = (d > 0) & (ref > 0)
        assert np.mean((d > 0) == (ref > 0)) > 0.97
        assert np.abs(d[both] - ref[both]).max() < 0.02


def _brute_depth(mesh, K, pose):
    cam = pose.world_to_camera(mesh.vertices)[mesh.triangles]
    out = np.zeros((K.height, K.width))
    for v in range(K.height):
        for u in range(K.width):
            d = np.array([(u - K.cx) / K.fx, (v - K.cy) / K.fy, 1.0])
            best = np.inf
            for t0, t1, t2 in cam:
                e1, e2 = t1 - t0, t2 - t0
                h = np.cross(d, e2)
                det = e1 @ h
                if abs(det) < 1e-12:
                    continue
                s = -t0
                a = (s @ h) / det
                q = np.cross(s, e1)
                b = (d @ q) / det
                t = (e2 @ q) / det
                if a >= 0 and b >= 0 and a + b <= 1 and t > 0:
                    best = min(best, t)
            out[v, u] = best if np.isfinite(best) else 0
    return out


def test_render_matches_brute_force():
    rng = np.random.default_rng(3)
    K = Intrinsics(12.0, 12.0, 7.5, 5.5, 16, 12)
    pose = look_at((0, 0, -2.0), (0, 0, 0), (0, 1, 0))
    for _ in range(5):
        v = rng.uniform(-1, 1, (9, 3))
        mesh = TriMesh(v, rng.integers(0, 9, (6, 3)))
        mesh = TriMesh(v, mesh.triangles[[len(set(t)) == 3 for t in mesh.triangles]])
        fast, slow = render_depth(mesh, K, pose), _brute_depth(mesh, K, pose)
        # pixels grazing an edge may flip; everything else must agree exactly
        agree = np.isclose(fast, slow, atol=1e-9)
        assert agree.mean() > 0.97


def test_render_behind_camera_ignored(small_camera):
    pose = look_at((0, 0, 2.0), (0, 0, 0), (0, 1, 0))
    assert np.all(render_depth(quad(3.0, 5.0), small_camera, pose) == 0)


def test_trim_keeps_visible_surface():
    K = Intrinsics(40.0, 40.0, 31.5, 23.5, 64, 48)
    gt = sphere_mesh(0.5)
    cams = sphere_cameras(40, 2.0, K)
    trimmed = trim_mesh(gt, gt, cams)
    assert metrics(trimmed, gt).fscore > 0.95


def test_trim_removes_hidden_geometry():
    K = Intrinsics(40.0, 40.0, 31.5, 23.5, 64, 48)
    gt = sphere_mesh(0.5)
    pred = merge(gt, sphere_mesh(0.15, n=12))
    trimmed = trim_mesh(pred, gt, sphere_cameras(20, 2.0, K))
    assert len(trimmed) and np.linalg.norm(trimmed.vertices, axis=1).min() > 0.35


def test_trim_no_cameras_or_empty_pred():
    gt = sphere_mesh(0.5)
    assert trim_mesh(gt, gt, []).is_empty
    K = Intrinsics(40.0, 40.0, 31.5, 23.5, 64, 48)
    assert trim_mesh(TriMesh.empty(), gt, sphere_cameras(2, 2.0, K)).is_empty
