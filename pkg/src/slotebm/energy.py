"""Permutation-invariant energy functions over a set of slot latents.

Two variants score the consistency between an encoded scene and K latent
vectors:

* attention: a stack of pre-layer-norm cross-attention blocks where feature
  locations query the latent set, mean-pooled into a single scalar. Softmax
  over slots makes the score order-free by construction.
* sum: a per-slot scorer with shared weights, summed over slots. The latent is
  broadcast-concatenated to every feature location and refined by
  self-attention before pooling.

Energies from several scenes can be combined with signed weights, which is
what scene combination (sum) and object removal (difference) are built on.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .encoder import FeatureMap


@dataclass(frozen=True)
class EnergyConfig:
    variant: str = "attention"  # "attention" or "sum"
    feature_dim: int = 64
    latent_dim: int = 64
    n_blocks: int = 2        # cross-attention depth (attention variant)
    n_self_blocks: int = 2   # self-attention depth (sum variant)

    def validate(self) -> None:
        if self.variant not in ("attention", "sum"):
            raise ValueError(f"unknown energy variant {self.variant!r}")
        if self.n_blocks < 1 or self.n_self_blocks < 1:
            raise ValueError("attention depth must be >= 1")


def _mlp(dim: int, hidden: int, out: int) -> nn.Sequential:
    return nn.Sequential(nn.Linear(dim, hidden), nn.ReLU(), nn.Linear(hidden, out))


class CrossAttentionBlock(nn.Module):
    """Pre-layer-norm block: features attend to the latent set, single head.

    h' = CrossAttn(LN(h), LN(z)) + h ; out = MLP(LN(h')) + h'. Queries come
    from the features, keys and values from the latents, softmax over slots.
    """

    def __init__(self, feature_dim: int, latent_dim: int):
        super().__init__()
        self.norm_h = nn.LayerNorm(feature_dim)
        self.norm_z = nn.LayerNorm(latent_dim)
        self.to_q = nn.Linear(feature_dim, feature_dim)
        self.to_k = nn.Linear(latent_dim, feature_dim)
        self.to_v = nn.Linear(latent_dim, feature_dim)
        self.to_out = nn.Linear(feature_dim, feature_dim)
        self.norm_mlp = nn.LayerNorm(feature_dim)
        self.mlp = _mlp(feature_dim, feature_dim, feature_dim)
        self.scale = feature_dim**-0.5

    def forward(self, h: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
        if z.shape[-2] == 0:
            raise ValueError("latent set is empty (K = 0)")
        q = self.to_q(self.norm_h(h))
        zn = self.norm_z(z)
        k, v = self.to_k(zn), self.to_v(zn)
        attn = torch.softmax(q @ k.transpose(-2, -1) * self.scale, dim=-1)
        h = h + self.to_out(attn @ v)
        return h + self.mlp(self.norm_mlp(h))


class SelfAttentionBlock(nn.Module):
    """Pre-layer-norm single-head self-attention block."""

    def __init__(self, dim: int):
        super().__init__()
        self.norm_attn = nn.LayerNorm(dim)
        self.to_q = nn.Linear(dim, dim)
        self.to_k = nn.Linear(dim, dim)
        self.to_v = nn.Linear(dim, dim)
        self.to_out = nn.Linear(dim, dim)
        self.norm_mlp = nn.LayerNorm(dim)
        self.mlp = _mlp(dim, dim, dim)
        self.scale = dim**-0.5

    def forward(self, u: torch.Tensor) -> torch.Tensor:
        un = self.norm_attn(u)
        q, k, v = self.to_q(un), self.to_k(un), self.to_v(un)
        attn = torch.softmax(q @ k.transpose(-2, -1) * self.scale, dim=-1)
        u = u + self.to_out(attn @ v)
        return u + self.mlp(self.norm_mlp(u))


class AttentionEnergy(nn.Module):
    """Cross-attention energy: L blocks, mean pool over locations, MLP to a scalar."""

    def __init__(self, config: EnergyConfig):
        super().__init__()
        config.validate()
        self.config = config
        self.blocks = nn.ModuleList(
            CrossAttentionBlock(config.feature_dim, config.latent_dim)
            for _ in range(config.n_blocks)
        )
        self.head = _mlp(config.feature_dim, config.feature_dim, 1)

    def forward(self, h: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
        """h: (B, Nh, Dh), z: (B, K, Dz) -> per-scene energy (B,)."""
        for block in self.blocks:
            h = block(h, z)
        return self.head(h.mean(dim=1)).squeeze(-1)


class SumEnergy(nn.Module):
    """Additive energy: a shared single-slot scorer summed over the latent set.

    Each slot is projected, tiled across the feature grid, concatenated along
    the channel axis, refined by self-attention, pooled, and scored. Sharing
    the scorer across slots keeps the formulation valid for any K.
    """

    def __init__(self, config: EnergyConfig):
        super().__init__()
        config.validate()
        self.config = config
        self.proj = _mlp(config.latent_dim, config.feature_dim, config.feature_dim)
        joint = 2 * config.feature_dim
        self.blocks = nn.ModuleList(SelfAttentionBlock(joint) for _ in range(config.n_self_blocks))
        self.head = _mlp(joint, config.feature_dim, 1)

    def slot_energy(self, h: torch.Tensor, z_k: torch.Tensor) -> torch.Tensor:
        """Energy contribution of a single latent z_k: (B, Dz) -> (B,)."""
        tiled = self.proj(z_k).unsqueeze(1).expand(-1, h.shape[1], -1)
        u = torch.cat([h, tiled], dim=-1)
        for block in self.blocks:
            u = block(u)
        return self.head(u.mean(dim=1)).squeeze(-1)

    def forward(self, h: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
        """h: (B, Nh, Dh), z: (B, K, Dz) -> sum of per-slot energies (B,)."""
        if z.shape[-2] == 0:
            raise ValueError("latent set is empty (K = 0)")
        total = self.slot_energy(h, z[:, 0])
        for k in range(1, z.shape[1]):
            total = total + self.slot_energy(h, z[:, k])
        return total


def build_energy(config: EnergyConfig) -> nn.Module:
    config.validate()
    if config.variant == "attention":
        return AttentionEnergy(config)
    return SumEnergy(config)


class SceneEnergy:
    """Energy of a latent set against one or more encoded scenes.

    Binds an energy network to weighted feature-map terms; calling it returns
    sum_i w_i * E(h_i, z) per batch element. With weights (1, 1) this is the
    product-of-experts combination of two scenes; (1, -1) subtracts the second
    scene's objects.
    """

    def __init__(self, network: nn.Module, terms: list[tuple[torch.Tensor | FeatureMap, float]]):
        if len(terms) == 0:
            raise ValueError("SceneEnergy needs at least one (features, weight) term")
        self.network = network
        self.terms = [
            (t.features if isinstance(t, FeatureMap) else t, float(w)) for t, w in terms
        ]

    def __call__(self, z: torch.Tensor) -> torch.Tensor:
        total = None
        for h, w in self.terms:
            e = self.network(h, z)
            e = e if w == 1.0 else w * e
            total = e if total is None else total + e
        return total

    def gradient(self, z: torch.Tensor) -> torch.Tensor:
        """Exact latent gradient of the bound energy, detached from the graph."""
        with torch.enable_grad():
            zg = z.detach().requires_grad_(True)
            (grad,) = torch.autograd.grad(self(zg).sum(), zg)
        return grad


def compose_energies(
    network: nn.Module, terms: list[tuple[torch.Tensor | FeatureMap, float]]
) -> SceneEnergy:
    """Weighted combination of per-scene energies sharing one set of parameters."""
    return SceneEnergy(network, terms)
