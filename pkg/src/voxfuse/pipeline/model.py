"""The trainable model bundle and the per-level forward pass.

One forward level takes active voxel keys and a set of views, back-projects
every voxel into every view that sees it, fuses the view tokens per voxel
and runs the level's sparse CNN over the fused features.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .. import grid
from ..features import STRIDES, FeaturePyramid, PatchFeatures, sample_features
from ..geom import Intrinsics, Pose, project_points
from ..nn import Module, Tensor, as_tensor, concat, load_archive, save_archive
from ..nn.checkpoint import CheckpointError
from ..projective import occupancy_from_sdf, projective_sdf_batch
from ..sparse_cnn import LevelNetwork, parent_features
from ..view_fusion import WEIGHTED, FusionModel, fuse_voxels
from .config import PipelineConfig

CHECKPOINT_KIND = "voxfuse-model"


class ModelBundle(Module):
    """Feature extractor, per-level fusion transformers and per-level sparse CNNs.

    Parameter names follow ``features.*``, ``fusion.<level>.*`` and
    ``cnn.<level>.*``; they are the checkpoint entry names.
    """

    def __init__(self, config: PipelineConfig | None = None, dtype=np.float32):
        cfg = PipelineConfig() if config is None else config
        self.config = cfg
        self.fusion_mode = WEIGHTED
        rng = np.random.default_rng(cfg.seed)
        ch = cfg.channels
        self.features = PatchFeatures(ch, cfg.image_channels, rng, dtype)
        self.fusion = {lvl: FusionModel(ch[lvl], cfg.n_layers, cfg.n_heads, cfg.n_freq, cfg.d_max, rng, dtype)
                       for lvl in grid.LEVELS}
        self.cnn = {}
        for i, lvl in enumerate(grid.LEVELS):
            c_in = ch[lvl] + (ch[grid.LEVELS[i - 1]] if cfg.pass_parent_features and i > 0 else 0)
            self.cnn[lvl] = LevelNetwork(lvl, c_in, cfg.cnn_layers, hidden=ch[lvl], rng=rng, dtype=dtype)

    # -- checkpoints ------------------------------------------------------------------
    def save(self, path, extra_meta: dict | None = None) -> None:
        meta = {"kind": CHECKPOINT_KIND, "config": self.config.to_dict(),
                "fingerprint": self.config.fingerprint(), "fusion_mode": self.fusion_mode}
        if extra_meta:
            meta.update(extra_meta)
        save_archive(path, self.state_dict(), meta)

    @classmethod
    def load(cls, path, config: PipelineConfig | None = None) -> ModelBundle:
        """Load a checkpoint; ``config``, when given, must have the stored fingerprint."""
        arrays, meta = load_archive(path)
        if meta.get("kind") != CHECKPOINT_KIND:
            raise CheckpointError(f"{path}: not a model checkpoint")
        stored = PipelineConfig.from_dict(meta["config"])
        if stored.fingerprint() != meta.get("fingerprint"):
            raise CheckpointError(f"{path}: stored config does not match its fingerprint")
        if config is not None and config.fingerprint() != meta["fingerprint"]:
            raise CheckpointError(
                f"{path}: config fingerprint {config.fingerprint()} != checkpoint {meta['fingerprint']}")
        bundle = cls(stored)
        bundle.load_state_dict(arrays)
        bundle.fusion_mode = meta.get("fusion_mode", WEIGHTED)
        return bundle


# -- views and back-projection -------------------------------------------------------------

@dataclass
class View:
    K: Intrinsics
    pose: Pose
    image: np.ndarray
    depth: np.ndarray | None = None
    pyramid: FeaturePyramid | None = field(default=None, repr=False)

    def features(self, bundle: ModelBundle) -> FeaturePyramid:
        if self.pyramid is None:
            self.pyramid = bundle.features.extract(self.image)
        return self.pyramid


@dataclass
class Samples:
    """Back-projected (voxel, view) pairs, grouped by view."""

    voxel: np.ndarray
    view: np.ndarray
    feats: Tensor | None
    dirs: np.ndarray
    d_v: np.ndarray
    target: np.ndarray  # projective occupancy per sample, -1 where unsupervised

    def __len__(self) -> int:
        return len(self.voxel)


def backproject(bundle: ModelBundle, level: str, centers: np.ndarray, voxel_ids: np.ndarray,
                views: Sequence[View], view_ids: Sequence[int], with_targets: bool = False) -> Samples:
    """Samples of ``centers[voxel_ids]`` in each of ``views[view_ids]``.

    Voxels behind a camera or projecting outside its image are skipped for that view.
    """
    voxel_ids = np.asarray(voxel_ids, np.int64)
    pts = centers[voxel_ids]
    vox, vw, dirs, dv, tgt, feats = [], [], [], [], [], []
    trunc = bundle.config.trunc
    for j in view_ids:
        view = views[j]
        u, v, z = project_points(view.K, view.pose, pts)
        with np.errstate(invalid="ignore"):
            ok = (z > 0) & (u >= -0.5) & (u < view.K.width - 0.5) & (v >= -0.5) & (v < view.K.height - 0.5)
        idx = np.flatnonzero(ok)
        if len(idx) == 0:
            continue
        pyr = view.features(bundle)
        f, _ = sample_features(pyr.maps[level], STRIDES[level], pyr.image_size, u[idx], v[idx])
        diff = pts[idx] - view.pose.center
        vox.append(voxel_ids[idx])
        vw.append(np.full(len(idx), j, np.int64))
        dirs.append(diff / np.linalg.norm(diff, axis=1, keepdims=True))
        dv.append(z[idx])
        feats.append(f)
        if with_targets and view.depth is not None:
            S, _, _, valid = projective_sdf_batch(view.depth, view.K, view.pose, pts[idx], bundle.config.max_depth)
            tgt.append(occupancy_from_sdf(S, valid, trunc))
        else:
            tgt.append(np.full(len(idx), -1, np.int8))
    if not vox:
        c = bundle.config.channels[level]
        return Samples(np.zeros(0, np.int64), np.zeros(0, np.int64), as_tensor(np.zeros((0, c), np.float32)),
                       np.zeros((0, 3)), np.zeros(0), np.zeros(0, np.int8))
    return Samples(np.concatenate(vox), np.concatenate(vw), concat(feats, axis=0) if len(feats) > 1 else feats[0],
                   np.concatenate(dirs), np.concatenate(dv), np.concatenate(tgt))


def merge_samples(parts: Sequence[Samples]) -> Samples:
    parts = [p for p in parts if len(p)]
    if not parts:
        raise ValueError("no samples to merge")
    if len(parts) == 1:
        return parts[0]
    return Samples(np.concatenate([p.voxel for p in parts]), np.concatenate([p.view for p in parts]),
                   concat([p.feats for p in parts], axis=0), np.concatenate([p.dirs for p in parts]),
                   np.concatenate([p.d_v for p in parts]), np.concatenate([p.target for p in parts]))


@dataclass
class LevelOutput:
    level: str
    keys: np.ndarray
    fused: Tensor
    pred: Tensor  # occupancy logits (coarse, medium) or normalised TSDF (fine)
    logits: Tensor  # per-sample projective occupancy logits
    samples: Samples


def run_level(bundle: ModelBundle, level: str, keys: np.ndarray, samples: Samples, mode: str | None = None,
              parent: LevelOutput | None = None) -> LevelOutput:
    mode = bundle.fusion_mode if mode is None else mode
    out = fuse_voxels(bundle.fusion[level], samples.voxel, len(keys), samples.feats, samples.dirs,
                      samples.d_v, mode)
    x = out.features
    if bundle.config.pass_parent_features and level != grid.LEVELS[0]:
        if parent is None:
            raise ValueError(f"{level}: parent level output required when passing parent features")
        x = concat([x, parent_features(keys, parent.keys, parent.fused, level)], axis=1)
    pred = bundle.cnn[level](x, keys)
    return LevelOutput(level, keys, out.features, pred, out.logits, samples)
