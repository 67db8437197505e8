"""Image encoder: stride-1 CNN plus border-ramp positional embedding.

Produces a spatial feature map with one vector per pixel. Every operation is
twice-differentiable, which the training loop relies on when it backpropagates
through the latent gradients of the energy.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn


@dataclass
class FeatureMap:
    """Per-location features (B, Nh, Dh) with the originating grid shape."""

    features: torch.Tensor
    grid_shape: tuple[int, int]


def positional_grid(height: int, width: int, dtype=torch.float32, device=None) -> torch.Tensor:
    """(H, W, 4) linear ramps: normalized distance to the left/right/top/bottom borders.

    Each channel runs over [0, 1]; a ramp of length 1 degenerates to 0.
    """
    if height < 1 or width < 1:
        raise ValueError(f"grid must be at least 1x1, got {height}x{width}")

    def ramp(n: int) -> torch.Tensor:
        if n == 1:
            return torch.zeros(1, dtype=dtype, device=device)
        return torch.arange(n, dtype=dtype, device=device) / (n - 1)

    # the opposite ramps are mirror images, so flipping an axis swaps them exactly
    left = ramp(width).expand(height, width)
    right = torch.flip(left, dims=[1])
    top = ramp(height).unsqueeze(1).expand(height, width)
    bottom = torch.flip(top, dims=[0])
    return torch.stack([left, right, top, bottom], dim=-1)


class PositionalEmbedding(nn.Module):
    """Linear projection of the 4 border ramps, added to the feature map."""

    def __init__(self, dim: int):
        super().__init__()
        self.proj = nn.Linear(4, dim)

    def forward(self, features: torch.Tensor, grid_shape: tuple[int, int]) -> torch.Tensor:
        h, w = grid_shape
        grid = positional_grid(h, w, dtype=features.dtype, device=features.device)
        return features + self.proj(grid).reshape(1, h * w, -1)


class SceneEncoder(nn.Module):
    """4x (5x5 conv, ReLU) backbone, positional embedding, then a per-location MLP.

    Stride-1 same-padding convolutions keep the grid at the input resolution,
    so Nh = H * W.
    """

    def __init__(self, feature_dim: int = 64, in_channels: int = 3, n_layers: int = 4):
        super().__init__()
        layers = []
        ch = in_channels
        for _ in range(n_layers):
            layers += [nn.Conv2d(ch, feature_dim, kernel_size=5, padding=2), nn.ReLU()]
            ch = feature_dim
        self.backbone = nn.Sequential(*layers)
        self.pos = PositionalEmbedding(feature_dim)
        self.norm = nn.LayerNorm(feature_dim)
        self.mlp = nn.Sequential(
            nn.Linear(feature_dim, feature_dim),
            nn.ReLU(),
            nn.Linear(feature_dim, feature_dim),
        )

    def forward(self, images: torch.Tensor) -> FeatureMap:
        """images: (B, 3, H, W) in [-1, 1] -> FeatureMap with (B, H*W, Dh) features."""
        if images.ndim != 4:
            raise ValueError(f"expected (B, C, H, W) images, got shape {tuple(images.shape)}")
        b, _, h, w = images.shape
        x = self.backbone(images)
        x = x.permute(0, 2, 3, 1).reshape(b, h * w, -1)
        x = self.pos(x, (h, w))
        x = self.mlp(self.norm(x))
        return FeatureMap(features=x, grid_shape=(h, w))
