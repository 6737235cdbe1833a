from __future__ import annotations

import numpy as np
import pytest

from voxfuse.geom import Intrinsics, look_at

ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_camera():
    return Intrinsics(40.0, 40.0, 31.5, 23.5, 64, 48)


def sphere_cameras(n: int, radius: float, K: Intrinsics, center=(0.0, 0.0, 0.0)):
    """``n`` cameras on a Fibonacci sphere, all looking at ``center``."""
    c = np.asarray(center, float)
    out = []
    golden = np.pi * (3 - np.sqrt(5))
    for i in range(n):
        z = 1 - 2 * (i + 0.5) / n
        r = np.sqrt(1 - z * z)
        eye = c + radius * np.array([r * np.cos(golden * i), r * np.sin(golden * i), z])
        up = (0.0, 0.0, 1.0) if abs(z) < 0.95 else (1.0, 0.0, 0.0)
        out.append((K, look_at(eye, c, up)))
    return out


def sphere_depth(K: Intrinsics, pose, center, radius: float) -> np.ndarray:
    """Exact z-depth image of a sphere (0 where the ray misses)."""
    vv, uu = np.mgrid[0:K.height, 0:K.width].astype(float)
    dirs_cam = np.stack([(uu - K.cx) / K.fx, (vv - K.cy) / K.fy, np.ones_like(uu)], axis=-1)
    dirs = dirs_cam @ pose.R.T
    oc = pose.t - np.asarray(center, float)
    a = (dirs * dirs).sum(-1)
    b = 2 * (dirs * oc).sum(-1)
    c = oc @ oc - radius**2
    disc = b * b - 4 * a * c
    t = np.where(disc >= 0, (-b - np.sqrt(np.maximum(disc, 0))) / (2 * a), 0.0)
    return np.where((disc >= 0) & (t > 0), t, 0.0)  # t is z-depth since dirs_cam has unit z


def tiny_scene_spec(i: int = 0) -> dict:
    """A 1.2 m room with one sphere, 24 frames of 32x24 pixels."""
    return {"room": [1.2, 1.2, 0.9],
            "objects": [{"type": "sphere", "center": [0.98, 0.22 + 0.08 * i, 0.18], "radius": 0.18}],
            "trajectory": {"n_frames": 24, "step_deg": 15, "tilt": 0.3},
            "camera": {"width": 32, "height": 24}}


def tiny_config_dict() -> dict:
    return {"channels": {"coarse": 4, "medium": 4, "fine": 4}, "n_layers": 1, "n_freq": 2, "cnn_layers": 1,
            "crop_size": [16, 16, 12], "n_views_train": 3, "n_views_test": 4, "epoch_scale": 1.0,
            "phase1": {"lr": 1e-3, "epochs": 1, "batch": 1}, "phase2": {"lr": 1e-4, "epochs": 1, "batch": 1},
            "warmup_steps": 5}


@pytest.fixture(scope="session")
def tiny_scenes(tmp_path_factory):
    from voxfuse.pipeline import synth_scene
    root = tmp_path_factory.mktemp("tiny")
    return [synth_scene(tiny_scene_spec(i), root / f"scene_{i:03d}") for i in range(3)]
