import numpy as np
import pytest
import torch

from slotebm.datasets import DatasetConfig, generate_scenes
from slotebm.energy import EnergyConfig
from slotebm.model import ModelConfig, SlotEnergyModel
from slotebm.sampler import SamplerConfig


@pytest.fixture(scope="session")
def tiny_dataset_config():
    return DatasetConfig(
        height=16, width=16, n_scenes=8, object_count_range=(1, 2),
        size_range=(2.5, 4.0), rng_seed=0,
    )


@pytest.fixture(scope="session")
def tiny_records(tiny_dataset_config):
    return generate_scenes(tiny_dataset_config)


@pytest.fixture(scope="session")
def tiny_images(tiny_records):
    return np.stack([r.image for r in tiny_records])


def make_tiny_model(variant="attention", height=16, width=16, n_slots=3, seed=0,
                    dtype=torch.float32):
    torch.manual_seed(seed)
    config = ModelConfig(
        height=height, width=width, feature_dim=8, latent_dim=6,
        encoder_layers=2, decoder_channels=6, decoder_layers=2,
        energy=EnergyConfig(variant=variant, n_blocks=1, n_self_blocks=1),
    )
    sampler = SamplerConfig(n_steps=2, step_size=0.1, n_slots=n_slots, latent_dim=6)
    model = SlotEnergyModel(config, sampler)
    if dtype == torch.float64:
        model = model.double()
    return model


@pytest.fixture()
def tiny_model():
    return make_tiny_model()
