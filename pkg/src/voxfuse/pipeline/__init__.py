"""Datasets, synthetic scenes, training, inference and the estimator front end."""
from .config import PhaseSchedule, PipelineConfig
from .dataset import Scene, SceneFormatError, find_scenes, load_scene, write_scene
from .estimator import VolumetricReconstructor
from .model import ModelBundle, View
from .reconstruct import Reconstruction, reconstruct
from .synth import SceneSpec, synth_dataset, synth_scene
from .train import Trainer, TrainingDiverged, train, voxel_dropout

__all__ = [
    "ModelBundle", "PhaseSchedule", "PipelineConfig", "Reconstruction", "Scene", "SceneFormatError",
    "SceneSpec", "Trainer", "TrainingDiverged", "View", "VolumetricReconstructor", "find_scenes",
    "load_scene", "reconstruct", "synth_dataset", "synth_scene", "train", "voxel_dropout", "write_scene",
]
