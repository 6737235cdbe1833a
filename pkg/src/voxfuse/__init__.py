"""Volumetric multi-view reconstruction with per-voxel transformer view fusion."""

__version__ = "0.1.0"

from .pipeline.estimator import VolumetricReconstructor  # noqa: E402  (needs __version__ above)

__all__ = ["VolumetricReconstructor", "__version__"]
