import dataclasses

import numpy as np
import pytest
import torch

from slotebm.energy import EnergyConfig
from slotebm.model import ModelConfig, SlotEnergyModel, images_to_tensor
from slotebm.sampler import SamplerConfig
from slotebm.training import (
    NonFiniteLossError,
    TrainConfig,
    build_state,
    fit,
    learning_rate_schedule,
    reconstruction_loss,
    train_step,
)


def tiny_train_config(**kwargs):
    defaults = dict(
        steps=3,
        batch_size=2,
        learning_rate=1e-3,
        warmup_steps=0,
        seed=0,
        checkpoint_every=2,
        log_every=1,
        model=ModelConfig(
            height=16, width=16, feature_dim=8, latent_dim=6,
            encoder_layers=2, decoder_channels=6, decoder_layers=2,
            energy=EnergyConfig(n_blocks=1),
        ),
        sampler=SamplerConfig(n_steps=2, n_slots=3, latent_dim=6),
    )
    defaults.update(kwargs)
    return TrainConfig(**defaults)


class TestReconstructionLoss:
    def test_identity_is_zero(self):
        x = torch.randn(2, 3, 8, 8)
        assert reconstruction_loss(x, x).item() == 0.0

    def test_constant_offset_closed_form(self):
        x = torch.randn(2, 3, 8, 8, dtype=torch.float64)
        c = 0.37
        assert reconstruction_loss(x + c, x).item() == pytest.approx(c**2, rel=1e-12)

    def test_matches_bruteforce_accumulation(self):
        gen = torch.Generator().manual_seed(0)
        a = torch.randn(2, 3, 5, 4, generator=gen, dtype=torch.float64)
        b = torch.randn(2, 3, 5, 4, generator=gen, dtype=torch.float64)
        total = 0.0
        count = 0
        for i in np.ndindex(*a.shape):
            total += (a[i].item() - b[i].item()) ** 2
            count += 1
        assert reconstruction_loss(a, b).item() == pytest.approx(total / count, rel=1e-12)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            reconstruction_loss(torch.zeros(1, 3, 4, 4), torch.zeros(1, 3, 4, 5))


class TestSchedule:
    def test_closed_form_checkpoints(self):
        peak, warmup, horizon = 3e-4, 100, 1100
        assert learning_rate_schedule(0, peak, warmup, horizon) == 0.0
        assert learning_rate_schedule(50, peak, warmup, horizon) == pytest.approx(peak / 2)
        assert learning_rate_schedule(100, peak, warmup, horizon) == pytest.approx(peak)
        midpoint = warmup + (horizon - warmup) // 2
        assert learning_rate_schedule(midpoint, peak, warmup, horizon) == pytest.approx(peak / 2)
        assert learning_rate_schedule(1100, peak, warmup, horizon) == 0.0
        assert learning_rate_schedule(10_000, peak, warmup, horizon) == 0.0

    def test_monotone_decay_after_warmup(self):
        values = [learning_rate_schedule(s, 1.0, 10, 110) for s in range(10, 111)]
        assert all(a >= b for a, b in zip(values, values[1:]))


def test_gradient_clipping_rescales_global_norm():
    model = torch.nn.Linear(4, 4, bias=False)
    with torch.no_grad():
        model.weight.grad = torch.full((4, 4), 2.5)  # global norm 10
    total = torch.nn.utils.clip_grad_norm_(model.parameters(), 1.0)
    assert total.item() == pytest.approx(10.0)
    assert model.weight.grad.norm().item() == pytest.approx(1.0, rel=1e-6)


class TestTrainStep:
    def test_deterministic_given_seed(self, tiny_images):
        batch = images_to_tensor(tiny_images[:2])
        config = tiny_train_config()
        params = []
        for _ in range(2):
            state = build_state(config)
            train_step(state, batch, config)
            train_step(state, batch, config)
            params.append([p.detach().clone() for p in state.model.parameters()])
        for a, b in zip(*params):
            assert torch.equal(a, b)

    def test_metrics_contents(self, tiny_images):
        batch = images_to_tensor(tiny_images[:2])
        config = tiny_train_config()
        state = build_state(config)
        metrics = train_step(state, batch, config)
        assert set(metrics) == {"loss", "grad_norm", "lr", "energies"}
        assert len(metrics["energies"]) == config.sampler.n_steps + 1
        assert state.step == 1

    def test_nonfinite_loss_aborts(self, tiny_images):
        batch = images_to_tensor(tiny_images[:2])
        config = tiny_train_config()
        state = build_state(config)
        with torch.no_grad():
            for p in state.model.decoder.parameters():
                p.fill_(float("nan"))
        with pytest.raises((NonFiniteLossError, Exception)):
            train_step(state, batch, config)


class TestFit:
    def test_writes_checkpoints_and_monotone_log(self, tiny_images, tmp_path):
        config = tiny_train_config(steps=4)
        model, final = fit(tiny_images, config, tmp_path / "run")
        assert final.exists()
        assert (tmp_path / "run" / "checkpoint_latest.ckpt").exists()
        lines = (tmp_path / "run" / "metrics.csv").read_text().strip().splitlines()
        assert lines[0].startswith("step,loss,grad_norm,lr,energy_0")
        steps = [int(row.split(",")[0]) for row in lines[1:]]
        assert steps == sorted(steps)
        assert len(steps) == len(set(steps))

    def test_file_free_mode(self, tiny_images, tmp_path):
        config = tiny_train_config(steps=2)
        model, final = fit(tiny_images, config, out_dir=None)
        assert final is None
        assert isinstance(model, SlotEnergyModel)

    def test_resume_continues_at_saved_step(self, tiny_images, tmp_path):
        config = tiny_train_config(steps=2, checkpoint_every=2)
        _, final = fit(tiny_images, config, tmp_path / "a")
        seen = []
        config4 = dataclasses.replace(config, steps=4)
        fit(tiny_images, config4, tmp_path / "b", resume_from=final,
            callback=lambda state, m: seen.append(state.step) or False)
        assert min(seen) >= 3  # resumed past the stored step 2

    def test_resumed_run_matches_uninterrupted(self, tiny_images, tmp_path):
        # the lr horizon must match across runs, or the schedules diverge
        config = tiny_train_config(steps=4, checkpoint_every=2, horizon=4)
        model_full, _ = fit(tiny_images, config, tmp_path / "full")

        config2 = dataclasses.replace(config, steps=2)
        _, ckpt = fit(tiny_images, config2, tmp_path / "half")
        # the final checkpoint of the half run keeps no optimizer moments, so
        # resume from the rolling latest one
        model_resumed, _ = fit(
            tiny_images, config, tmp_path / "resumed",
            resume_from=tmp_path / "half" / "checkpoint_latest.ckpt",
        )
        for a, b in zip(model_full.parameters(), model_resumed.parameters()):
            assert torch.allclose(a, b, atol=1e-7)


class TestFullPipelineGradient:
    def test_parameter_gradients_match_finite_differences(self, tiny_images):
        # 64-bit directional derivative through a T=2 chain, 8x8 image, K=2, Dz=4
        torch.manual_seed(0)
        config = ModelConfig(
            height=8, width=8, feature_dim=6, latent_dim=4,
            encoder_layers=2, decoder_channels=5, decoder_layers=2,
            energy=EnergyConfig(n_blocks=1),
        )
        sampler = SamplerConfig(n_steps=2, step_size=0.1, n_slots=2, latent_dim=4)
        model = SlotEnergyModel(config, sampler).double()
        x = (torch.rand(2, 3, 8, 8, dtype=torch.float64) * 2 - 1)

        def loss_value():
            gen = torch.Generator()
            gen.manual_seed(123)
            trajectory = model.infer(x, generator=gen, create_graph=True)
            recon = model.decoder(trajectory.final)
            return reconstruction_loss(recon.image, x)

        params = [p for p in model.parameters() if p.requires_grad]
        grads = torch.autograd.grad(loss_value(), params, allow_unused=True)

        gen = torch.Generator().manual_seed(7)
        direction = [torch.randn(p.shape, generator=gen, dtype=torch.float64) for p in params]
        analytic = sum(
            (g * d).sum().item() for g, d in zip(grads, direction) if g is not None
        )
        eps = 1e-6
        with torch.no_grad():
            for p, d in zip(params, direction):
                p += eps * d
        loss_plus = loss_value().item()
        with torch.no_grad():
            for p, d in zip(params, direction):
                p -= 2 * eps * d
        loss_minus = loss_value().item()
        with torch.no_grad():
            for p, d in zip(params, direction):
                p += eps * d
        numeric = (loss_plus - loss_minus) / (2 * eps)
        assert abs(analytic - numeric) / (abs(numeric) + 1e-12) <= 1e-3
