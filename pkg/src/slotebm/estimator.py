"""Scikit-learn style estimator around the full train/infer pipeline.

SlotEBM is unsupervised: fit(X) trains the encoder/energy/decoder end-to-end
on an image batch, transform(X) returns the inferred slot latents, predict(X)
the per-pixel slot labels, and score(X, y) the mean foreground ARI against
ground-truth masks. Hyperparameters follow sklearn conventions (get_params /
set_params / clone all work), so the model drops into pipelines and grid
searches.
"""

from __future__ import annotations

import numpy as np
import torch
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .datasets import SceneRecord
from .energy import EnergyConfig
from .evaluation import foreground_ari
from .model import ModelConfig, images_to_tensor
from .sampler import SamplerConfig
from .training import TrainConfig, fit
from .validation import check_images, check_mask_stacks


class SlotEBM(BaseEstimator):
    """Energy-based object discovery with Langevin-sampled slot latents.

    Parameters mirror the training configuration; see TrainConfig and
    SamplerConfig for semantics. X is always an (N, H, W, 3) float array with
    values in [-1, 1].
    """

    def __init__(
        self,
        variant: str = "attention",
        n_slots: int = 4,
        latent_dim: int = 64,
        feature_dim: int = 64,
        n_blocks: int = 2,
        langevin_steps: int = 3,
        step_size: float = 0.1,
        noise_scale: float = 1.0,
        learned_init: bool = False,
        n_steps: int = 5000,
        batch_size: int = 32,
        learning_rate: float = 2e-4,
        warmup_steps: int = 2500,
        grad_clip: float = 1.0,
        random_state: int = 0,
    ):
        self.variant = variant
        self.n_slots = n_slots
        self.latent_dim = latent_dim
        self.feature_dim = feature_dim
        self.n_blocks = n_blocks
        self.langevin_steps = langevin_steps
        self.step_size = step_size
        self.noise_scale = noise_scale
        self.learned_init = learned_init
        self.n_steps = n_steps
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.warmup_steps = warmup_steps
        self.grad_clip = grad_clip
        self.random_state = random_state

    # ------------------------------------------------------------------

    def _train_config(self, height: int, width: int) -> TrainConfig:
        return TrainConfig(
            steps=self.n_steps,
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            warmup_steps=min(self.warmup_steps, self.n_steps),
            grad_clip=self.grad_clip,
            seed=self.random_state,
            model=ModelConfig(
                height=height,
                width=width,
                feature_dim=self.feature_dim,
                latent_dim=self.latent_dim,
                energy=EnergyConfig(variant=self.variant, n_blocks=self.n_blocks),
            ),
            sampler=SamplerConfig(
                n_steps=self.langevin_steps,
                step_size=self.step_size,
                noise_scale=self.noise_scale,
                n_slots=self.n_slots,
                latent_dim=self.latent_dim,
                init="learned" if self.learned_init else "standard_normal",
            ),
        )

    def _require_fitted(self):
        if not hasattr(self, "model_"):
            raise NotFittedError("this SlotEBM instance is not fitted yet; call fit first")

    # ------------------------------------------------------------------

    def fit(self, X, y=None):
        """Train end-to-end on images X; y is ignored (unsupervised)."""
        X = check_images(X)
        config = self._train_config(X.shape[1], X.shape[2])
        losses: list[float] = []

        def track(state, metrics):
            losses.append(metrics["loss"])
            return False

        model, _ = fit(X, config, out_dir=None, callback=track)
        self.model_ = model
        self.config_ = config
        self.loss_curve_ = losses
        self.image_shape_ = (X.shape[1], X.shape[2])
        return self

    def transform(self, X, *, seed: int = 0) -> np.ndarray:
        """Slot latents for each image: (N, n_slots, latent_dim)."""
        self._require_fitted()
        X = check_images(X, height=self.image_shape_[0], width=self.image_shape_[1])
        self.model_.eval()
        with torch.no_grad():
            trajectory = self.model_.infer(images_to_tensor(X), seed=seed)
        return trajectory.final.numpy()

    def fit_transform(self, X, y=None):
        return self.fit(X).transform(X)

    def predict(self, X, *, seed: int = 0) -> np.ndarray:
        """Per-pixel slot labels (N, H, W) from the argmax of the decoded masks."""
        return self.predict_masks(X, seed=seed).argmax(axis=1)

    def predict_masks(self, X, *, seed: int = 0) -> np.ndarray:
        """Soft per-slot masks (N, n_slots, H, W), summing to 1 per pixel."""
        self._require_fitted()
        X = check_images(X, height=self.image_shape_[0], width=self.image_shape_[1])
        recon, _ = self.model_.reconstruct(images_to_tensor(X), seed=seed)
        return recon.masks.numpy()

    def reconstruct(self, X, *, seed: int = 0) -> np.ndarray:
        """Combined reconstructions (N, H, W, 3) in [-1, 1]."""
        self._require_fitted()
        X = check_images(X, height=self.image_shape_[0], width=self.image_shape_[1])
        recon, _ = self.model_.reconstruct(images_to_tensor(X), seed=seed)
        return recon.image.permute(0, 2, 3, 1).numpy()

    def score(self, X, y, *, seed: int = 0) -> float:
        """Mean foreground ARI against ground-truth mask stacks y."""
        X = check_images(X)
        masks = check_mask_stacks(y, X.shape[0])
        pred = self.predict_masks(X, seed=seed)
        scores = []
        for predicted, gt in zip(pred, masks):
            record = SceneRecord(
                image=np.zeros((*gt.shape[1:], 3), dtype=np.float32),
                masks=gt,
                objects=[],
                n_objects=gt.shape[0] - 1,
            )
            value = foreground_ari(predicted, record)
            if value is not None:
                scores.append(value)
        if not scores:
            raise ValueError("no scene had foreground pixels to score")
        return float(np.mean(scores))
