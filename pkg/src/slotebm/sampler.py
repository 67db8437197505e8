"""Langevin dynamics over slot latents.

Latents are initialized from a prior (unit normal, or a learned diagonal
Gaussian) and refined for T steps of

    z' = z - step_size * dE/dz + sqrt(2 * step_size) * noise_scale * eta

which descends the energy, consistent with sampling from p(z|x) ~ exp(-E).
With noise_scale = 0 the chain degenerates to plain gradient descent. The
whole chain stays differentiable with respect to the model parameters (noise
is treated as a constant), which is what end-to-end training requires.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn

from .energy import SceneEnergy


class NonFiniteGradientError(RuntimeError):
    """Langevin step encountered a NaN/Inf latent gradient."""


@dataclass(frozen=True)
class SamplerConfig:
    n_steps: int = 3           # T
    step_size: float = 0.1     # epsilon
    noise_scale: float = 1.0   # w, rescales the Langevin noise
    n_slots: int = 4           # K
    latent_dim: int = 64       # Dz
    init: str = "standard_normal"  # or "learned"
    record_trajectory: bool = False
    truncate_backprop: bool = False  # stop gradients before the final step

    def validate(self) -> None:
        if self.n_steps < 0:
            raise ValueError(f"n_steps must be >= 0, got {self.n_steps}")
        if self.step_size <= 0:
            raise ValueError(f"step_size must be > 0, got {self.step_size}")
        if self.noise_scale < 0:
            raise ValueError(f"noise_scale must be >= 0, got {self.noise_scale}")
        if self.n_slots < 1 or self.latent_dim < 1:
            raise ValueError("n_slots and latent_dim must be >= 1")
        if self.init not in ("standard_normal", "learned"):
            raise ValueError(f"unknown init mode {self.init!r}")


class InitParams(nn.Module):
    """Learned diagonal Gaussian for the initial latents, shared across slots."""

    def __init__(self, latent_dim: int):
        super().__init__()
        self.mean = nn.Parameter(torch.zeros(latent_dim))
        self.log_std = nn.Parameter(torch.zeros(latent_dim))


@dataclass
class Trajectory:
    """Latent states over a chain: states[0] is the initialization, length T+1."""

    states: torch.Tensor                 # (T+1, B, K, Dz)
    energies: torch.Tensor | None = None  # (T+1, B) when recorded

    @property
    def final(self) -> torch.Tensor:
        return self.states[-1]


def init_latents(
    config: SamplerConfig,
    init_params: InitParams | None = None,
    *,
    batch_size: int = 1,
    generator: torch.Generator | None = None,
    seed: int | None = None,
    device=None,
    dtype=None,
) -> torch.Tensor:
    """Draw (B, K, Dz) initial latents; deterministic given a seed."""
    config.validate()
    if generator is None and seed is not None:
        generator = torch.Generator(device=device or "cpu")
        generator.manual_seed(int(seed))
    shape = (batch_size, config.n_slots, config.latent_dim)
    eta = torch.randn(shape, generator=generator, device=device, dtype=dtype)
    if config.init == "standard_normal":
        return eta
    if init_params is None:
        raise ValueError("init='learned' requires InitParams")
    return init_params.mean + torch.exp(init_params.log_std) * eta


def langevin_step(
    energy: SceneEnergy,
    z: torch.Tensor,
    step_size: float,
    noise_scale: float,
    noise: torch.Tensor,
    create_graph: bool = False,
    return_energy: bool = False,
):
    """One update z' = z - eps * dE/dz + sqrt(2 eps) * w * noise.

    The noise tensor is supplied by the caller so chains are reproducible and
    permutation-equivariance can be tested directly. With create_graph=True
    the update stays differentiable through the latent gradient.
    """
    if create_graph or z.requires_grad:
        # a constant initialization still needs requires_grad to differentiate E
        zg = z if z.requires_grad else z.detach().requires_grad_(True)
        value = energy(zg)
        (grad,) = torch.autograd.grad(value.sum(), zg, create_graph=create_graph)
    else:
        with torch.enable_grad():
            zg = z.detach().requires_grad_(True)
            value = energy(zg)
            (grad,) = torch.autograd.grad(value.sum(), zg)
        value = value.detach()
    if not torch.isfinite(grad).all():
        bad = (~torch.isfinite(grad)).sum().item()
        raise NonFiniteGradientError(
            f"latent gradient has {bad} non-finite entries "
            f"(|z|_max={z.abs().max().item():.3e}, energy={value.detach().mean().item():.3e})"
        )
    z_next = z - step_size * grad
    if noise_scale != 0.0:
        z_next = z_next + math.sqrt(2.0 * step_size) * noise_scale * noise
    if return_energy:
        return z_next, value
    return z_next


def sample(
    energy: SceneEnergy,
    config: SamplerConfig,
    init_params: InitParams | None = None,
    *,
    batch_size: int = 1,
    generator: torch.Generator | None = None,
    seed: int | None = None,
    create_graph: bool = False,
) -> Trajectory:
    """Run init + T Langevin steps with fresh noise per step.

    Energies along the chain are recorded when config.record_trajectory is
    set (the values come for free from the gradient evaluations, plus one
    final evaluation).
    """
    config.validate()
    ref = energy.terms[0][0]
    if generator is None and seed is not None:
        generator = torch.Generator(device=ref.device if ref.device.type != "cpu" else "cpu")
        generator.manual_seed(int(seed))

    z = init_latents(
        config,
        init_params,
        batch_size=batch_size,
        generator=generator,
        device=ref.device,
        dtype=ref.dtype,
    )
    states = [z]
    energies = [] if config.record_trajectory else None
    for t in range(config.n_steps):
        if config.truncate_backprop and t == config.n_steps - 1:
            z = z.detach()
        if noise_needed := config.noise_scale != 0.0:
            noise = torch.randn(z.shape, generator=generator, device=z.device, dtype=z.dtype)
        else:
            noise = torch.zeros((), device=z.device, dtype=z.dtype)
        try:
            z, value = langevin_step(
                energy,
                z,
                config.step_size,
                config.noise_scale if noise_needed else 0.0,
                noise,
                create_graph=create_graph,
                return_energy=True,
            )
        except NonFiniteGradientError as err:
            raise NonFiniteGradientError(f"step {t}: {err}") from err
        states.append(z)
        if energies is not None:
            energies.append(value)
    if energies is not None:
        energies.append(energy(z).detach() if not create_graph else energy(z))
    return Trajectory(
        states=torch.stack(states),
        energies=torch.stack(energies) if energies is not None else None,
    )
