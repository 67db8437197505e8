"""PNG grid rendering for decomposition and manipulation outputs."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image


def to_uint8(image: np.ndarray) -> np.ndarray:
    """(H, W, 3) image in [-1, 1] -> uint8."""
    return (np.clip((image + 1.0) / 2.0, 0.0, 1.0) * 255).round().astype(np.uint8)


def gray_to_uint8(mask: np.ndarray) -> np.ndarray:
    """(H, W) values in [0, 1] -> uint8 RGB."""
    g = (np.clip(mask, 0.0, 1.0) * 255).round().astype(np.uint8)
    return np.stack([g, g, g], axis=-1)


def assemble_grid(rows: list[list[np.ndarray]], pad: int = 2) -> np.ndarray:
    """Stack uint8 RGB panels into a grid with white separators."""
    h, w = rows[0][0].shape[:2]
    n_rows, n_cols = len(rows), len(rows[0])
    out = np.full(
        (n_rows * h + (n_rows + 1) * pad, n_cols * w + (n_cols + 1) * pad, 3),
        255,
        dtype=np.uint8,
    )
    for i, row in enumerate(rows):
        for j, panel in enumerate(row):
            y = pad + i * (h + pad)
            x = pad + j * (w + pad)
            out[y : y + h, x : x + w] = panel
    return out


def save_grid(rows: list[list[np.ndarray]], path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(assemble_grid(rows)).save(path)


def decomposition_row(image: np.ndarray, recon_image: np.ndarray,
                      slot_rgb: np.ndarray, masks: np.ndarray) -> list[np.ndarray]:
    """One grid row: input, reconstruction, then K mask-weighted slot panels.

    image/recon_image: (H, W, 3) in [-1, 1]; slot_rgb: (K, H, W, 3);
    masks: (K, H, W).
    """
    panels = [to_uint8(image), to_uint8(recon_image)]
    for k in range(slot_rgb.shape[0]):
        # unclaimed pixels fade to white so the slot's region stands out
        weighted = masks[k][..., None] * (slot_rgb[k] + 1.0) / 2.0 + (1.0 - masks[k][..., None])
        panels.append((np.clip(weighted, 0.0, 1.0) * 255).round().astype(np.uint8))
    return panels


def masks_row(image: np.ndarray, recon_image: np.ndarray, masks: np.ndarray) -> list[np.ndarray]:
    panels = [to_uint8(image), to_uint8(recon_image)]
    panels += [gray_to_uint8(masks[k]) for k in range(masks.shape[0])]
    return panels
