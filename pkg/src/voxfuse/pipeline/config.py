"""Pipeline configuration: every field optional in JSON, defaults below."""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .. import grid, tsdf


@dataclass
class PhaseSchedule:
    lr: float
    epochs: int
    batch: int


@dataclass
class PipelineConfig:
    voxel_sizes: dict = field(default_factory=lambda: dict(grid.VOXEL_SIZES))
    trunc: float = tsdf.TRUNCATION
    channels: dict = field(default_factory=lambda: {"coarse": 32, "medium": 16, "fine": 8})
    n_layers: int = 2
    n_heads: int = 2
    n_freq: int = 6
    d_max: float = 5.0
    cnn_layers: int = 3
    pass_parent_features: bool = False
    image_channels: int = 1

    n_views_train: int = 20
    n_views_test: int = 60
    r_max: float = 15.0
    t_max_train: float = 0.1
    t_max_test: float = 0.2
    tile_size: float = grid.DEFAULT_TILE_SIZE
    occ_threshold: float = 0.5
    max_depth: float = 3.0
    depth_range: tuple = (0.1, 3.0)

    crop_size: tuple = tsdf.SUBCROP_SIZE
    augment: bool = True
    phase1: PhaseSchedule = field(default_factory=lambda: PhaseSchedule(1e-3, 300, 4))
    phase2: PhaseSchedule = field(default_factory=lambda: PhaseSchedule(1e-4, 100, 2))
    epoch_scale: float = 1 / 30
    warmup_steps: int = 2000
    keep_fraction: float = 0.5
    seed: int = 0

    def __post_init__(self):
        for name in ("phase1", "phase2"):
            val = getattr(self, name)
            if isinstance(val, dict):
                setattr(self, name, PhaseSchedule(**val))
        self.crop_size = tuple(int(x) for x in self.crop_size)
        self.depth_range = tuple(float(x) for x in self.depth_range)
        self.validate()

    def validate(self) -> None:
        positive = ["trunc", "n_layers", "n_heads", "n_freq", "d_max", "cnn_layers", "image_channels",
                    "n_views_train", "n_views_test", "r_max", "t_max_train", "t_max_test", "tile_size",
                    "max_depth", "epoch_scale"]
        for name in positive:
            if not getattr(self, name) > 0:
                raise ValueError(f"config field {name!r} must be positive, got {getattr(self, name)!r}")
        if set(self.channels) != set(grid.LEVELS) or min(self.channels.values()) <= 0:
            raise ValueError(f"channels must give a positive width for each of {grid.LEVELS}")
        for lvl, c in self.channels.items():
            if c % self.n_heads:
                raise ValueError(f"{lvl} width {c} is not divisible by n_heads={self.n_heads}")
        if not 0 < self.occ_threshold < 1:
            raise ValueError("occ_threshold must lie in (0, 1)")
        if not 0 < self.keep_fraction <= 1:
            raise ValueError("keep_fraction must lie in (0, 1]")
        if self.warmup_steps < 0:
            raise ValueError("warmup_steps must be >= 0")
        for ph in (self.phase1, self.phase2):
            if ph.lr <= 0 or ph.epochs < 1 or ph.batch < 1:
                raise ValueError(f"invalid phase schedule {ph}")
        if any(c <= 0 or c % 4 for c in self.crop_size):
            raise ValueError("crop_size entries must be positive multiples of 4")

    def phase_epochs(self, phase: int) -> int:
        """Epochs actually run for a phase after applying ``epoch_scale`` (at least 1)."""
        ph = self.phase1 if phase == 1 else self.phase2
        return max(1, math.ceil(ph.epochs * self.epoch_scale - 1e-9))

    @classmethod
    def toy(cls, **overrides) -> PipelineConfig:
        """CPU-sized settings for the 20 + 5 room synthetic benchmark.

        Smaller crops and view counts than the defaults, the full epoch count
        (one epoch is one pass over the training scenes) and a short warmup.
        """
        d = {"crop_size": (32, 32, 24), "n_views_train": 8, "n_views_test": 16, "warmup_steps": 50,
             "epoch_scale": 1.0}
        d.update(overrides)
        return cls.from_dict(d)

    # -- serialisation ----------------------------------------------------------------
    def to_dict(self) -> dict:
        d = asdict(self)
        d["crop_size"] = list(self.crop_size)
        d["depth_range"] = list(self.depth_range)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> PipelineConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> PipelineConfig:
        return cls.from_dict(json.loads(Path(path).read_text()))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n")

    def fingerprint(self) -> str:
        """SHA-256 of the canonical JSON form; stored in checkpoints and checked at load."""
        return hashlib.sha256(self.to_json().encode()).hexdigest()[:16]
