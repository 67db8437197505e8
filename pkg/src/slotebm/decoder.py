"""Spatial broadcast decoder: slot latents to per-slot RGB and alpha masks.

Each latent is tiled over the full output grid, tagged with positional ramps,
and convolved into 3 RGB channels plus an alpha logit. Alpha logits are
normalized across slots with a softmax, and the reconstruction is the
mask-weighted sum of the slot images.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .encoder import positional_grid


@dataclass
class SceneReconstruction:
    """Combined image plus the per-slot decomposition that produced it.

    image: (B, 3, H, W); slot_rgb: (B, K, 3, H, W); masks: (B, K, H, W)
    nonnegative and summing to 1 per pixel; alpha_logits: (B, K, H, W).
    """

    image: torch.Tensor
    slot_rgb: torch.Tensor
    masks: torch.Tensor
    alpha_logits: torch.Tensor


class SpatialBroadcastDecoder(nn.Module):
    """Broadcast at full output resolution, 4 stride-1 convs, 1x1 head to RGB+alpha."""

    def __init__(self, latent_dim: int = 64, height: int = 48, width: int = 48,
                 channels: int = 32, n_layers: int = 4):
        super().__init__()
        self.latent_dim = latent_dim
        self.grid_shape = (height, width)
        self.pos_proj = nn.Linear(4, latent_dim)
        layers = []
        ch = latent_dim
        for _ in range(n_layers):
            layers += [nn.Conv2d(ch, channels, kernel_size=5, padding=2), nn.ReLU()]
            ch = channels
        self.convs = nn.Sequential(*layers)
        self.head = nn.Conv2d(channels, 4, kernel_size=1)

    def broadcast(self, z_flat: torch.Tensor) -> torch.Tensor:
        """Tile latents over the grid and add the positional projection: (N, Dz, H, W)."""
        h, w = self.grid_shape
        grid = positional_grid(h, w, dtype=z_flat.dtype, device=z_flat.device)
        pos = self.pos_proj(grid).permute(2, 0, 1)
        return z_flat.unsqueeze(-1).unsqueeze(-1) + pos

    def decode_slots(self, z: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """z: (B, K, Dz) -> slot rgb (B, K, 3, H, W) and alpha logits (B, K, H, W)."""
        b, k, dz = z.shape
        if dz != self.latent_dim:
            raise ValueError(f"latent dim {dz} != decoder latent dim {self.latent_dim}")
        x = self.broadcast(z.reshape(b * k, dz))
        x = self.head(self.convs(x))
        x = x.reshape(b, k, 4, *self.grid_shape)
        return x[:, :, :3], x[:, :, 3]

    def forward(self, z: torch.Tensor) -> SceneReconstruction:
        rgb, alpha = self.decode_slots(z)
        return combine_slots(rgb, alpha)


def combine_slots(slot_rgb: torch.Tensor, alpha_logits: torch.Tensor) -> SceneReconstruction:
    """Softmax the alpha logits across slots and mix the slot images.

    slot_rgb: (B, K, 3, H, W), alpha_logits: (B, K, H, W).
    """
    if slot_rgb.shape[1] < 1:
        raise ValueError("need at least one slot")
    masks = torch.softmax(alpha_logits, dim=1)
    image = (masks.unsqueeze(2) * slot_rgb).sum(dim=1)
    return SceneReconstruction(image=image, slot_rgb=slot_rgb, masks=masks, alpha_logits=alpha_logits)
