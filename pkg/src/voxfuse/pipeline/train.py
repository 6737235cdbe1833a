"""Two-phase training on random augmented subcrops.

Phase 1 averages the transformer outputs without weights and keeps the
feature extractor frozen; phase 2 switches to occupancy-weighted
aggregation, unfreezes the features and lowers the learning rate. The
coarse-to-fine active sets come from ground-truth occupancy (teacher
forcing), so every level sees well-formed inputs from the first step.
"""
from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .. import grid
from ..geom import Aabb, sample_views, select_keyframes
from ..nn import Adam, Tape, bce_loss, log_tsdf_l1, total_loss
from ..tsdf import GroundTruth, Subcrop, load_gt, make_gt, random_subcrop
from ..view_fusion import UNWEIGHTED, WEIGHTED
from .config import PipelineConfig
from .dataset import Scene, load_scene, train_val_split
from .model import ModelBundle, View, backproject, run_level

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    """The loss became non-finite; the last finite parameters were restored."""


def voxel_dropout(keys: np.ndarray, keep_fraction: float, rng: np.random.Generator) -> np.ndarray:
    """Independent Bernoulli(keep_fraction) subsample of the rows of ``keys``."""
    if not 0 < keep_fraction <= 1:
        raise ValueError("keep_fraction must lie in (0, 1]")
    keys = np.asarray(keys)
    if keep_fraction == 1:
        return keys
    return keys[rng.random(len(keys)) < keep_fraction]


@dataclass
class TrainingScene:
    scene: Scene
    gt: GroundTruth
    keyframes: list[int]


def prepare_scene(path, config: PipelineConfig) -> TrainingScene:
    """Load a scene, its ground truth (``gt.npz`` in the scene if present) and training keyframes."""
    scene = load_scene(path)
    cached = Path(path) / "gt.npz"
    if cached.is_file():
        gt = load_gt(cached)
    else:
        gt = make_gt([scene.depth(i) for i in range(len(scene))], scene.cameras, scene.bounds,
                     config.trunc, config.max_depth)
    kf = select_keyframes(scene.poses, config.r_max, config.t_max_train)
    return TrainingScene(scene, gt, kf)


def crop_views(ts: TrainingScene, crop: Subcrop, config: PipelineConfig, n_views: int,
               rng: np.random.Generator) -> list[View]:
    """Keyframes whose frustum meets the crop, in crop coordinates (images mirrored on reflection)."""
    cams = [crop.transform_camera(ts.scene.K, ts.scene.poses[i]) for i in ts.keyframes]
    box = Aabb(np.zeros(3), np.asarray(crop.size) * grid.voxel_size("fine"))
    chosen = sample_views(cams, box, n_views, rng, config.depth_range)
    views = []
    for j in chosen:
        i = ts.keyframes[j]
        K, pose = cams[j]
        views.append(View(K, pose, crop.transform_image(ts.scene.image(i)),
                          crop.transform_image(ts.scene.depth(i))))
    return views


def crop_loss(bundle: ModelBundle, crop: Subcrop, views: Sequence[View], mode: str,
              rng: np.random.Generator, keep_fraction: float):
    """Total loss of one crop with teacher-forced active sets; returns ``(loss, terms)``."""
    proj_terms, occ_terms, tsdf_term = [], [], None
    terms = {}
    active = np.argwhere(np.ones(crop.levels["coarse"].occupied.shape, bool))
    parent = None
    view_ids = list(range(len(views)))
    for level in grid.LEVELS:
        lt = crop.levels[level]
        keys = voxel_dropout(active, keep_fraction, rng)
        centers = grid.key_to_center(keys, level)
        samples = backproject(bundle, level, centers, np.arange(len(keys)), views, view_ids, with_targets=True)
        out = run_level(bundle, level, keys, samples, mode, parent)
        t = samples.target
        proj = bce_loss(out.logits, np.maximum(t, 0), t >= 0)
        proj_terms.append(proj)
        terms[f"proj_{level}"] = float(proj.data)
        idx = tuple(keys.T)
        if level == "fine":
            tsdf_term = log_tsdf_l1(out.pred, crop.tsdf[idx], lt.known[idx])
            terms["tsdf"] = float(tsdf_term.data)
        else:
            occ = bce_loss(out.pred, lt.occupied[idx], lt.known[idx])
            occ_terms.append(occ)
            terms[f"occ_{level}"] = float(occ.data)
            occupied = active[lt.occupied[tuple(active.T)]]
            active = grid.children_of(occupied)
        parent = out
    loss = total_loss(proj_terms, occ_terms, tsdf_term)
    terms["total"] = float(loss.data)
    return loss, terms


@dataclass
class Trainer:
    """Stateful two-phase trainer; phases can be run separately (for controls)."""

    bundle: ModelBundle
    train_scenes: list[TrainingScene]
    val_scenes: list[TrainingScene] = field(default_factory=list)
    seed: int = 0
    on_step: Callable[[dict], None] | None = None

    def __post_init__(self):
        cfg = self.bundle.config
        self.rng = np.random.default_rng(self.seed)
        self.optimizer = Adam(cfg.phase1.lr, warmup_steps=cfg.warmup_steps)
        self.history: list[dict] = []
        self._last_good = None

    @property
    def config(self) -> PipelineConfig:
        return self.bundle.config

    def trainable(self, phase: int):
        params = []
        for name, p in self.bundle.named_parameters():
            if phase == 1 and name.startswith("features."):
                continue
            params.append(p)
        return params

    def steps_per_epoch(self, phase: int) -> int:
        batch = (self.config.phase1 if phase == 1 else self.config.phase2).batch
        return math.ceil(len(self.train_scenes) / batch)

    def run_phase(self, phase: int, epochs: int | None = None, steps: int | None = None,
                  checkpoint=None) -> None:
        """Train with phase-``phase`` settings for ``epochs`` epochs (or exactly ``steps`` steps)."""
        cfg = self.config
        sched = cfg.phase1 if phase == 1 else cfg.phase2
        mode = UNWEIGHTED if phase == 1 else WEIGHTED
        self.bundle.fusion_mode = mode
        self.optimizer.lr = sched.lr
        params = self.trainable(phase)
        epochs = cfg.phase_epochs(phase) if epochs is None and steps is None else epochs
        done = 0
        while True:
            order = self.rng.permutation(len(self.train_scenes))
            for b in range(0, len(order), sched.batch):
                if steps is not None and done >= steps:
                    return
                self._step(phase, mode, [self.train_scenes[i] for i in order[b:b + sched.batch]], params,
                           checkpoint)
                done += 1
            if steps is None:
                epochs -= 1
                if epochs <= 0:
                    return

    def _step(self, phase: int, mode: str, batch: list[TrainingScene], params, checkpoint) -> None:
        cfg = self.config
        self.bundle.zero_grad()
        agg: dict[str, float] = {}
        for ts in batch:
            crop = random_subcrop(ts.gt, self.rng, cfg.crop_size, cfg.augment)
            views = crop_views(ts, crop, cfg, cfg.n_views_train, self.rng)
            with Tape() as tape:
                loss, terms = crop_loss(self.bundle, crop, views, mode, self.rng, cfg.keep_fraction)
            if not np.isfinite(loss.data):
                self._diverged(checkpoint)
            tape.backward(loss)
            for k, v in terms.items():
                agg[k] = agg.get(k, 0.0) + v / len(batch)
        for p in params:
            if p.grad is not None:
                p.grad = p.grad / len(batch)
        self._last_good = {k: v.copy() for k, v in self.bundle.state_dict().items()}
        self.optimizer.step(params)
        self.bundle.zero_grad()
        rec = {"phase": phase, "step": self.optimizer.step_count, "lr": self.optimizer.effective_lr(), **agg}
        self.history.append(rec)
        if self.on_step is not None:
            self.on_step(rec)
        log.debug("step %d phase %d loss %.4f", rec["step"], phase, agg.get("total", float("nan")))

    def _diverged(self, checkpoint) -> None:
        if self._last_good is not None:
            self.bundle.load_state_dict(self._last_good)
        if checkpoint is not None:
            self.bundle.save(checkpoint, {"diverged": True})
        raise TrainingDiverged(f"non-finite loss at step {self.optimizer.step_count + 1}")

    def snapshot(self) -> Trainer:
        """Independent copy (parameters, optimizer state and RNG) for branching a control run."""
        other = copy.copy(self)
        other.bundle = copy.deepcopy(self.bundle)
        # optimizer moments are keyed by parameter identity: remap them onto the copied parameters
        old = dict(self.bundle.named_parameters())
        new = dict(other.bundle.named_parameters())
        opt = copy.deepcopy(self.optimizer)
        opt._state = {id(new[name]): copy.deepcopy(self.optimizer._state[id(p)])
                      for name, p in old.items() if id(p) in self.optimizer._state}
        other.optimizer = opt
        other.rng = copy.deepcopy(self.rng)
        other.history = list(self.history)
        return other

    def validation_loss(self, n_crops: int = 2, seed: int = 12345) -> float:
        """Mean total loss over fixed, unaugmented crops of the validation scenes."""
        if not self.val_scenes:
            raise ValueError("no validation scenes")
        return validation_loss(self.bundle, self.val_scenes, n_crops, seed)


def validation_loss(bundle: ModelBundle, scenes: Sequence[TrainingScene], n_crops: int = 2,
                    seed: int = 12345) -> float:
    cfg = bundle.config
    rng = np.random.default_rng(seed)
    total, n = 0.0, 0
    for ts in scenes:
        for _ in range(n_crops):
            crop = random_subcrop(ts.gt, rng, cfg.crop_size, augment=False)
            views = crop_views(ts, crop, cfg, cfg.n_views_train, rng)
            loss, _ = crop_loss(bundle, crop, views, bundle.fusion_mode, rng, 1.0)
            total += float(loss.data)
            n += 1
    return total / n


def train(scene_paths: Sequence, config: PipelineConfig, seed: int | None = None, n_val: int | None = None,
          checkpoint=None, on_step: Callable[[dict], None] | None = None) -> tuple[ModelBundle, Trainer]:
    """Train phase 1 then phase 2 on ``scene_paths``; the last ``n_val`` scenes are held out."""
    seed = config.seed if seed is None else seed
    train_p, val_p = train_val_split(list(scene_paths), n_val)
    bundle = ModelBundle(config)
    trainer = Trainer(bundle, [prepare_scene(p, config) for p in train_p],
                      [prepare_scene(p, config) for p in val_p], seed, on_step)
    trainer.run_phase(1, checkpoint=checkpoint)
    trainer.run_phase(2, checkpoint=checkpoint)
    return bundle, trainer
