"""Energy-based object discovery with slot latents inferred by Langevin sampling."""

from .datasets import DatasetConfig, ObjectSpec, SceneRecord, color_jitter_object, generate_scene
from .dataset_io import build_dataset, load_dataset
from .decoder import SceneReconstruction, SpatialBroadcastDecoder, combine_slots
from .encoder import FeatureMap, SceneEncoder, positional_grid
from .energy import AttentionEnergy, EnergyConfig, SceneEnergy, SumEnergy, compose_energies
from .estimator import SlotEBM
from .evaluation import ari, foreground_ari, hungarian, masks_to_labels
from .model import ModelConfig, SlotEnergyModel
from .sampler import InitParams, SamplerConfig, Trajectory, init_latents, langevin_step, sample
from .training import TrainConfig, fit, reconstruction_loss

__version__ = "0.1.0"

__all__ = [
    "AttentionEnergy",
    "DatasetConfig",
    "EnergyConfig",
    "FeatureMap",
    "InitParams",
    "ModelConfig",
    "ObjectSpec",
    "SamplerConfig",
    "SceneEncoder",
    "SceneEnergy",
    "SceneReconstruction",
    "SceneRecord",
    "SlotEBM",
    "SlotEnergyModel",
    "SpatialBroadcastDecoder",
    "SumEnergy",
    "TrainConfig",
    "Trajectory",
    "ari",
    "build_dataset",
    "color_jitter_object",
    "combine_slots",
    "compose_energies",
    "fit",
    "foreground_ari",
    "generate_scene",
    "hungarian",
    "init_latents",
    "langevin_step",
    "load_dataset",
    "masks_to_labels",
    "positional_grid",
    "reconstruction_loss",
    "sample",
]
