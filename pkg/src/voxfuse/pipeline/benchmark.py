"""Synthetic end-to-end benchmark: generate rooms, train, reconstruct held-out rooms, score.

Also runs the aggregation control: after phase 1 the trainer is branched,
one copy trains phase 2 (occupancy-weighted) and the other keeps training
with phase-1 settings for the same number of steps, and both are scored on
the held-out validation loss.
"""
from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from ..eval3d import MetricReport, metrics, trim_mesh
from ..geom import select_keyframes
from ..surface import TriMesh, marching_cubes_dense
from ..tsdf import load_gt, make_gt, save_gt
from .config import PipelineConfig
from .dataset import Scene, load_scene
from .model import ModelBundle
from .reconstruct import reconstruct
from .synth import synth_dataset
from .train import Trainer, prepare_scene

log = logging.getLogger(__name__)


def gt_mesh(scene_dir, config: PipelineConfig) -> TriMesh:
    """Ground-truth mesh of a scene, building and caching ``gt.npz`` if needed."""
    path = Path(scene_dir) / "gt.npz"
    if path.is_file():
        gt = load_gt(path)
    else:
        scene = load_scene(scene_dir)
        gt = make_gt([scene.depth(i) for i in range(len(scene))], scene.cameras, scene.bounds,
                     config.trunc, config.max_depth)
        save_gt(gt, path)
    vol = gt.volume
    return marching_cubes_dense(vol.tsdf, vol.observed, vol.origin_key, vol.level)


def evaluate_scene(pred: TriMesh, gt: TriMesh, scene: Scene, config: PipelineConfig, tau: float = 0.05,
                   trim: bool = True, seed: int = 0) -> MetricReport:
    """Trim ``pred`` to what the scene's test keyframes observe of ``gt``, then score it."""
    if trim:
        kf = select_keyframes(scene.poses, config.r_max, config.t_max_test)
        pred = trim_mesh(pred, gt, [scene.cameras[i] for i in kf], config.trunc, config.max_depth)
    return metrics(pred, gt, tau, seed=seed)


def evaluate_model(bundle: ModelBundle, scene_dirs, seed: int = 0, tau: float = 0.05) -> list[MetricReport]:
    reports = []
    for d in scene_dirs:
        scene = load_scene(d)
        rec = reconstruct(scene, bundle, seed=seed)
        reports.append(evaluate_scene(rec.mesh, gt_mesh(d, bundle.config), scene, bundle.config, tau, seed=seed))
    return reports


@dataclass
class BenchmarkResult:
    baseline_fscores: list[float]
    fscores: list[float]
    val_loss_phase2: float
    val_loss_control: float
    steps_phase1: int
    steps_phase2: int
    seconds: dict = field(default_factory=dict)

    @property
    def baseline_fscore(self) -> float:
        return float(np.mean(self.baseline_fscores))

    @property
    def fscore(self) -> float:
        return float(np.mean(self.fscores))

    def to_dict(self) -> dict:
        d = asdict(self)
        d.update(baseline_fscore=self.baseline_fscore, fscore=self.fscore)
        return d


def run_benchmark(workdir, config: PipelineConfig, n_train: int = 20, n_test: int = 5, seed: int = 0,
                  scene_spec: dict | None = None) -> BenchmarkResult:
    """Synthesize ``n_train + n_test`` rooms under ``workdir`` and run the full benchmark.

    The held-out rooms double as the validation set for the control comparison.
    """
    clock = {}
    t0 = time.perf_counter()
    spec = dict(scene_spec or {})
    spec["n_scenes"] = n_train + n_test
    dirs = synth_dataset(spec, Path(workdir) / "scenes", seed)
    for d in dirs:
        gt_mesh(d, config)
    train_dirs, test_dirs = dirs[:n_train], dirs[n_train:]
    clock["data"] = time.perf_counter() - t0
    log.info("data ready: %d train, %d test scenes (%.0f s)", n_train, n_test, clock["data"])

    t0 = time.perf_counter()
    baseline = evaluate_model(ModelBundle(config), test_dirs, seed)
    clock["baseline"] = time.perf_counter() - t0
    log.info("baseline F %.3f (%.0f s)", np.mean([r.fscore for r in baseline]), clock["baseline"])

    t0 = time.perf_counter()
    trainer = Trainer(ModelBundle(config), [prepare_scene(d, config) for d in train_dirs],
                      [prepare_scene(d, config) for d in test_dirs], seed)
    trainer.run_phase(1)
    n1 = len(trainer.history)
    control = trainer.snapshot()
    trainer.run_phase(2)
    n2 = len(trainer.history) - n1
    clock["train"] = time.perf_counter() - t0
    log.info("trained %d + %d steps (%.0f s)", n1, n2, clock["train"])
    t0 = time.perf_counter()
    control.run_phase(1, steps=n2)
    clock["control"] = time.perf_counter() - t0

    val2, val_ctl = trainer.validation_loss(), control.validation_loss()
    t0 = time.perf_counter()
    trained = evaluate_model(trainer.bundle, test_dirs, seed)
    clock["evaluate"] = time.perf_counter() - t0
    log.info("benchmark timings %s", clock)
    return BenchmarkResult([r.fscore for r in baseline], [r.fscore for r in trained], val2, val_ctl, n1, n2, clock)
