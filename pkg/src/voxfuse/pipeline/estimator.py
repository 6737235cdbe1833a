"""scikit-learn style front end: ``fit`` on scene directories, ``predict`` meshes."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from ..surface import TriMesh
from ..validation import check_fraction, check_positive, check_scene_dirs, check_seed
from .benchmark import evaluate_scene, gt_mesh
from .config import PipelineConfig
from .dataset import load_scene
from .model import ModelBundle
from .reconstruct import reconstruct
from .train import train


class VolumetricReconstructor(BaseEstimator):
    """Coarse-to-fine volumetric reconstruction with transformer view fusion.

    ``X`` is always a dataset root, a single scene directory or a list of
    scene directories. Ground truth for training and scoring comes from the
    scenes' depth maps, so there is no separate ``y``.

    Args:
        config: a :class:`PipelineConfig`, a dict of its fields, or None for defaults.
        seed: seeds initialisation, crops, dropout and view sampling.
        n_val: scenes held out from the end of ``X`` during ``fit`` (default one in five).
        tau: F-score distance threshold used by ``score``.
        checkpoint: optional path written if training diverges.
    """

    def __init__(self, config=None, seed: int = 0, n_val: int | None = None, tau: float = 0.05,
                 checkpoint=None):
        self.config = config
        self.seed = seed
        self.n_val = n_val
        self.tau = tau
        self.checkpoint = checkpoint

    def _config(self) -> PipelineConfig:
        if self.config is None:
            return PipelineConfig(seed=check_seed(self.seed))
        if isinstance(self.config, PipelineConfig):
            return self.config
        if isinstance(self.config, dict):
            return PipelineConfig.from_dict(self.config)
        raise TypeError(f"config must be a PipelineConfig, dict or None, got {type(self.config).__name__}")

    def _check_fitted(self) -> None:
        if not hasattr(self, "bundle_"):
            raise NotFittedError("VolumetricReconstructor is not fitted; call fit() or from_checkpoint()")

    def fit(self, X, y=None) -> VolumetricReconstructor:
        seed = check_seed(self.seed)
        check_positive(self.tau, "tau")
        cfg = self._config()
        check_fraction(cfg.keep_fraction, "keep_fraction")
        paths = check_scene_dirs(X, min_count=2)
        self.bundle_, self.trainer_ = train(paths, cfg, seed, self.n_val, self.checkpoint)
        self.history_ = list(self.trainer_.history)
        self.n_scenes_ = len(paths)
        return self

    @classmethod
    def from_checkpoint(cls, path, **params) -> VolumetricReconstructor:
        bundle = ModelBundle.load(path)
        est = cls(config=bundle.config, **params)
        est.bundle_ = bundle
        est.history_ = []
        return est

    def save(self, path) -> None:
        self._check_fitted()
        self.bundle_.save(path)

    def predict(self, X) -> list[TriMesh]:
        """One mesh per scene in ``X``."""
        self._check_fitted()
        seed = check_seed(self.seed)
        return [reconstruct(load_scene(p), self.bundle_, seed=seed).mesh for p in check_scene_dirs(X)]

    def score(self, X, y=None) -> float:
        """Mean trimmed F-score against the depth-fused ground truth of each scene."""
        self._check_fitted()
        seed = check_seed(self.seed)
        paths = check_scene_dirs(X)
        out = []
        for p, mesh in zip(paths, self.predict(paths)):
            rep = evaluate_scene(mesh, gt_mesh(p, self.bundle_.config), load_scene(p), self.bundle_.config,
                                 self.tau, seed=seed)
            out.append(rep.fscore)
        return float(np.mean(out))
