"""Input validation helpers for the estimator API."""

from __future__ import annotations

import numpy as np


def check_images(X, *, height: int | None = None, width: int | None = None) -> np.ndarray:
    """Validate an (N, H, W, 3) image batch in [-1, 1]; returns float32.

    A single (H, W, 3) image is promoted to a batch of one.
    """
    X = np.asarray(X, dtype=np.float32)
    if X.ndim == 3:
        X = X[None]
    if X.ndim != 4 or X.shape[-1] != 3:
        raise ValueError(f"expected images of shape (N, H, W, 3), got {X.shape}")
    if X.shape[0] == 0:
        raise ValueError("empty image batch")
    if not np.isfinite(X).all():
        raise ValueError("images contain non-finite values")
    if X.min() < -1.0 - 1e-6 or X.max() > 1.0 + 1e-6:
        raise ValueError(
            f"image values must lie in [-1, 1], got range [{X.min():.3f}, {X.max():.3f}]"
        )
    if height is not None and (X.shape[1], X.shape[2]) != (height, width):
        raise ValueError(
            f"images are {X.shape[1]}x{X.shape[2]} but the model was fit on {height}x{width}"
        )
    return X


def check_mask_stacks(y, n: int) -> list[np.ndarray]:
    """Validate ground-truth masks: a sequence of (n_objects+1, H, W) arrays."""
    if len(y) != n:
        raise ValueError(f"got {len(y)} mask stacks for {n} images")
    out = []
    for i, masks in enumerate(y):
        masks = np.asarray(masks)
        if masks.ndim != 3:
            raise ValueError(f"mask stack {i} must be (K, H, W), got {masks.shape}")
        out.append(masks)
    return out
