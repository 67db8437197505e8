"""End-to-end training: Langevin inference, broadcast decoding, MSE on the result.

Each step encodes a batch, runs the T-step chain with gradients flowing
through every Langevin update (second derivatives of the energy), decodes the
final latents, and applies a clipped Adam update under a warmup+cosine
learning-rate schedule. All per-step randomness is derived statelessly from
(seed, step), so a resumed run reproduces an uninterrupted one.
"""

from __future__ import annotations

import dataclasses
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .checkpoint import (
    load_model,
    model_config_from_dict,
    restore_optimizer,
    read_checkpoint,
    sampler_config_from_dict,
    save_checkpoint,
)
from .model import ModelConfig, SlotEnergyModel, images_to_tensor
from .sampler import SamplerConfig


class NonFiniteLossError(RuntimeError):
    """Training loss went NaN/Inf; the last checkpoint on disk is kept."""


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 100_000
    batch_size: int = 32
    learning_rate: float = 2e-4
    warmup_steps: int = 2500
    horizon: int | None = None  # cosine decay horizon; defaults to steps
    grad_clip: float = 1.0
    seed: int = 0
    checkpoint_every: int = 1000
    log_every: int = 50
    keep_optimizer_in_final: bool = False
    model: ModelConfig = field(default_factory=ModelConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)

    def validate(self) -> None:
        if self.steps < 1 or self.batch_size < 1:
            raise ValueError("steps and batch_size must be positive")
        if self.learning_rate <= 0 or self.grad_clip <= 0:
            raise ValueError("learning_rate and grad_clip must be positive")
        if self.warmup_steps < 0 or self.warmup_steps > self.steps:
            raise ValueError("need 0 <= warmup_steps <= steps")
        self.sampler.validate()

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["model"] = model_config_from_dict(d["model"])
        d["sampler"] = sampler_config_from_dict(d["sampler"])
        return cls(**d)


def reconstruction_loss(reconstruction: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean squared error over every pixel channel (and the batch)."""
    if reconstruction.shape != target.shape:
        raise ValueError(
            f"shape mismatch: reconstruction {tuple(reconstruction.shape)} "
            f"vs target {tuple(target.shape)}"
        )
    return (reconstruction - target).square().mean()


def learning_rate_schedule(step: int, peak: float, warmup: int, horizon: int) -> float:
    """Linear warmup from 0 to peak, then cosine decay to 0 at the horizon."""
    if warmup > 0 and step < warmup:
        return peak * step / warmup
    if step >= horizon:
        return 0.0
    span = max(horizon - warmup, 1)
    return peak * 0.5 * (1.0 + math.cos(math.pi * (step - warmup) / span))


def step_seed(seed: int, step: int, stream: int) -> int:
    """Stable per-(step, stream) seed; stream separates batch/noise draws."""
    ss = np.random.SeedSequence(entropy=(int(seed), int(step), int(stream)))
    return int(ss.generate_state(1)[0])


@dataclass
class TrainState:
    model: SlotEnergyModel
    optimizer: torch.optim.Optimizer
    step: int = 0


def build_state(config: TrainConfig, device=None) -> TrainState:
    config.validate()
    torch.manual_seed(step_seed(config.seed, 0, 0))
    model = SlotEnergyModel(config.model, config.sampler).to(device or "cpu")
    optimizer = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    return TrainState(model=model, optimizer=optimizer, step=0)


def train_step(state: TrainState, batch: torch.Tensor, config: TrainConfig) -> dict:
    """One optimizer update; returns scalar metrics for logging."""
    model, optimizer = state.model, state.optimizer
    model.train()
    lr = learning_rate_schedule(
        state.step, config.learning_rate, config.warmup_steps, config.horizon or config.steps
    )
    for group in optimizer.param_groups:
        group["lr"] = lr

    generator = torch.Generator()
    generator.manual_seed(step_seed(config.seed, state.step, 2))
    sampler = dataclasses.replace(config.sampler, record_trajectory=True)
    trajectory = model.infer(batch, sampler=sampler, generator=generator, create_graph=True)
    recon = model.decoder(trajectory.final)
    loss = reconstruction_loss(recon.image, batch)
    if not torch.isfinite(loss):
        raise NonFiniteLossError(f"loss is {loss.item()} at step {state.step}")

    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    grad_norm = torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
    optimizer.step()
    state.step += 1

    energies = trajectory.energies.detach().mean(dim=1)
    return {
        "loss": float(loss.item()),
        "grad_norm": float(grad_norm.item()),
        "lr": lr,
        "energies": [float(e) for e in energies],
    }


def _select_batch(images: np.ndarray, config: TrainConfig, step: int) -> np.ndarray:
    rng = np.random.default_rng(step_seed(config.seed, step, 1))
    n = images.shape[0]
    idx = rng.choice(n, size=config.batch_size, replace=n < config.batch_size)
    return images[idx]


class MetricsLog:
    """Append-only delimited log: one row per cadence with monotone steps."""

    def __init__(self, path: Path, n_sampler_steps: int):
        self.path = path
        self._columns = ["step", "loss", "grad_norm", "lr"] + [
            f"energy_{t}" for t in range(n_sampler_steps + 1)
        ]
        if not path.exists():
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text(",".join(self._columns) + "\n")

    def append(self, step: int, metrics: dict) -> None:
        row = [str(step), f"{metrics['loss']:.6g}", f"{metrics['grad_norm']:.6g}",
               f"{metrics['lr']:.6g}"] + [f"{e:.6g}" for e in metrics["energies"]]
        with open(self.path, "a") as f:
            f.write(",".join(row) + "\n")


def fit(
    images: np.ndarray,
    config: TrainConfig,
    out_dir: str | Path | None,
    *,
    resume_from: str | Path | None = None,
    device=None,
    callback=None,
) -> tuple[SlotEnergyModel, Path | None]:
    """Train on an (N, H, W, 3) image array; returns (model, final checkpoint path).

    Writes a rolling `checkpoint_latest.ckpt` (with optimizer moments, for
    resumption) every checkpoint_every steps, a metrics log, and a final
    `checkpoint_final.ckpt`. With out_dir=None nothing touches disk.
    `callback(state, metrics)` runs at the logging cadence and may return
    True to stop early.
    """
    config.validate()
    data = np.asarray(images, dtype=np.float32)

    if resume_from is not None:
        model, manifest, arrays = load_model(resume_from)
        model = model.to(device or "cpu")
        optimizer = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
        restore_optimizer(optimizer, model, arrays)
        state = TrainState(model=model, optimizer=optimizer, step=int(manifest["step"]))
    else:
        state = build_state(config, device=device)

    log = latest = final = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        log = MetricsLog(out_dir / "metrics.csv", config.sampler.n_steps)
        latest = out_dir / "checkpoint_latest.ckpt"
        final = out_dir / "checkpoint_final.ckpt"

    t_start = time.time()
    while state.step < config.steps:
        batch = images_to_tensor(_select_batch(data, config, state.step), device=device)
        step_before = state.step
        metrics = train_step(state, batch, config)
        if step_before % config.log_every == 0 or state.step == config.steps:
            if log is not None:
                log.append(step_before, metrics)
            metrics["elapsed"] = time.time() - t_start
            if callback is not None and callback(state, metrics):
                break
        if latest is not None and state.step % config.checkpoint_every == 0:
            save_checkpoint(
                latest, state.model, step=state.step, seed=config.seed,
                optimizer=state.optimizer, extra={"train_config": config.to_dict()},
            )

    if final is not None:
        save_checkpoint(
            final, state.model, step=state.step, seed=config.seed,
            optimizer=state.optimizer if config.keep_optimizer_in_final else None,
            extra={"train_config": config.to_dict()},
        )
    return state.model, final
