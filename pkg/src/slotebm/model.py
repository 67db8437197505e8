"""Full model: encoder, energy network, decoder, and optional learned init."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .decoder import SceneReconstruction, SpatialBroadcastDecoder
from .encoder import FeatureMap, SceneEncoder
from .energy import EnergyConfig, SceneEnergy, build_energy
from .sampler import InitParams, SamplerConfig, Trajectory, sample


@dataclass(frozen=True)
class ModelConfig:
    height: int = 48
    width: int = 48
    feature_dim: int = 64
    latent_dim: int = 64
    encoder_layers: int = 4
    decoder_channels: int = 32
    decoder_layers: int = 4
    energy: EnergyConfig = field(default_factory=EnergyConfig)

    def __post_init__(self):
        # keep the nested dims consistent with the top-level ones
        object.__setattr__(
            self,
            "energy",
            EnergyConfig(
                variant=self.energy.variant,
                feature_dim=self.feature_dim,
                latent_dim=self.latent_dim,
                n_blocks=self.energy.n_blocks,
                n_self_blocks=self.energy.n_self_blocks,
            ),
        )


class SlotEnergyModel(nn.Module):
    """Encoder + permutation-invariant energy + broadcast decoder."""

    def __init__(self, config: ModelConfig, sampler: SamplerConfig):
        super().__init__()
        sampler.validate()
        if sampler.latent_dim != config.latent_dim:
            raise ValueError("sampler latent_dim disagrees with model latent_dim")
        self.config = config
        self.sampler_config = sampler
        self.encoder = SceneEncoder(config.feature_dim, n_layers=config.encoder_layers)
        self.energy = build_energy(config.energy)
        self.decoder = SpatialBroadcastDecoder(
            config.latent_dim, config.height, config.width,
            channels=config.decoder_channels, n_layers=config.decoder_layers,
        )
        self.init_params = InitParams(config.latent_dim) if sampler.init == "learned" else None

    def encode(self, images: torch.Tensor) -> FeatureMap:
        return self.encoder(images)

    def scene_energy(self, features: FeatureMap | torch.Tensor, weight: float = 1.0) -> SceneEnergy:
        return SceneEnergy(self.energy, [(features, weight)])

    def infer(
        self,
        images: torch.Tensor,
        *,
        sampler: SamplerConfig | None = None,
        seed: int | None = None,
        generator: torch.Generator | None = None,
        create_graph: bool = False,
    ) -> Trajectory:
        """Encode a batch and run the Langevin chain; returns the trajectory."""
        cfg = sampler or self.sampler_config
        energy = self.scene_energy(self.encode(images))
        return sample(
            energy, cfg, self.init_params,
            batch_size=images.shape[0], seed=seed, generator=generator,
            create_graph=create_graph,
        )

    def reconstruct(
        self,
        images: torch.Tensor,
        *,
        sampler: SamplerConfig | None = None,
        seed: int | None = None,
    ) -> tuple[SceneReconstruction, Trajectory]:
        with torch.no_grad():
            trajectory = self.infer(images, sampler=sampler, seed=seed)
            recon = self.decoder(trajectory.final)
        return recon, trajectory


def images_to_tensor(images: np.ndarray, device=None, dtype=torch.float32) -> torch.Tensor:
    """(N, H, W, 3) array in [-1, 1] -> (N, 3, H, W) tensor."""
    if images.ndim == 3:
        images = images[None]
    if images.ndim != 4 or images.shape[-1] != 3:
        raise ValueError(f"expected (N, H, W, 3) images, got shape {images.shape}")
    t = torch.as_tensor(np.ascontiguousarray(images), dtype=dtype, device=device)
    return t.permute(0, 3, 1, 2).contiguous()
