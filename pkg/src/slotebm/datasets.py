"""Synthetic multi-object sprite scenes with exact per-object masks.

Scenes are rasterized on a gray background from a small palette of flat-colored
shapes (squares, circles, triangles). Occlusion follows z-order, and the stored
masks partition every pixel exactly: index 0 is background, index k > 0 is the
visible region of object k.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np
import torch
import torchvision.transforms.functional as TF

SHAPES = ("square", "circle", "triangle")

DEFAULT_PALETTE = (
    (1.0, 0.0, 0.0),
    (0.0, 1.0, 0.0),
    (0.0, 0.0, 1.0),
    (1.0, 1.0, 0.0),
    (1.0, 0.0, 1.0),
    (0.0, 1.0, 1.0),
)

# Objects occluded below this many visible pixels are resampled; segmentation
# scores on near-invisible entities are meaningless.
MIN_VISIBLE_PIXELS = 8

# Fraction of an object's full silhouette that must stay inside the frame.
MIN_INSIDE_FRACTION = 0.25


@dataclass
class ObjectSpec:
    """One sprite: geometry, color, and depth rank (larger z_order is on top)."""

    shape: str
    color: tuple[float, float, float]
    size: float
    position: tuple[float, float]
    z_order: int


@dataclass
class SceneRecord:
    """An image in [-1, 1] plus its exact ground-truth decomposition.

    masks has shape (n_objects + 1, H, W); row 0 is the background, row k the
    visible pixels of objects[k - 1]. Rows are mutually exclusive and cover
    every pixel.
    """

    image: np.ndarray
    masks: np.ndarray
    objects: list[ObjectSpec]
    n_objects: int
    annotations: dict = field(default_factory=dict)


@dataclass(frozen=True)
class DatasetConfig:
    height: int = 48
    width: int = 48
    n_scenes: int = 5000
    object_count_range: tuple[int, int] = (2, 4)
    size_range: tuple[float, float] = (5.0, 9.0)
    palette: tuple[tuple[float, float, float], ...] = DEFAULT_PALETTE
    background_mode: str = "sampled"  # "fixed" or "sampled" gray level
    background_gray: float = 0.5
    rng_seed: int = 0

    def validate(self) -> None:
        if self.height < 16 or self.width < 16:
            raise ValueError(f"image size must be at least 16x16, got {self.height}x{self.width}")
        lo, hi = self.object_count_range
        if lo < 0 or hi < lo:
            raise ValueError(f"bad object_count_range {self.object_count_range}")
        smin, smax = self.size_range
        if smin <= 0 or smax < smin:
            raise ValueError(f"bad size_range {self.size_range}")
        if smax > min(self.height, self.width):
            raise ValueError(
                f"max object size {smax} does not fit a {self.height}x{self.width} image"
            )
        if self.background_mode not in ("fixed", "sampled"):
            raise ValueError(f"unknown background_mode {self.background_mode!r}")
        if len(self.palette) == 0:
            raise ValueError("palette is empty")
        for rgb in self.palette:
            if len(rgb) != 3 or any(c < 0 or c > 1 for c in rgb):
                raise ValueError(f"palette entries must be RGB triples in [0,1], got {rgb}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetConfig":
        d = dict(d)
        d["object_count_range"] = tuple(d["object_count_range"])
        d["size_range"] = tuple(d["size_range"])
        d["palette"] = tuple(tuple(c) for c in d["palette"])
        return cls(**d)


def _pixel_centers(height: int, width: int) -> tuple[np.ndarray, np.ndarray]:
    ys = np.arange(height, dtype=np.float64) + 0.5
    xs = np.arange(width, dtype=np.float64) + 0.5
    return np.meshgrid(xs, ys)  # px, py with shape (H, W)


def rasterize_shape(
    shape: str, position: tuple[float, float], size: float, height: int, width: int
) -> np.ndarray:
    """Boolean silhouette of a shape on an HxW grid, pixel-center inclusion test.

    position is the shape center (x, y) with x rightward and y downward;
    pixel (i, j) has center (j + 0.5, i + 0.5). size is the half-width
    (square), radius (circle), or half-height/half-base (triangle, apex up).
    """
    px, py = _pixel_centers(height, width)
    x, y = position
    if shape == "square":
        return (np.abs(px - x) <= size) & (np.abs(py - y) <= size)
    if shape == "circle":
        return (px - x) ** 2 + (py - y) ** 2 <= size**2
    if shape == "triangle":
        inside_y = (py >= y - size) & (py <= y + size)
        return inside_y & (np.abs(px - x) <= (py - y + size) / 2.0)
    raise ValueError(f"unknown shape {shape!r}")


def _full_silhouette_area(shape: str, size: float) -> int:
    """Pixel count of the unclipped silhouette, rasterized on a padded canvas."""
    pad = int(np.ceil(size)) * 2 + 4
    m = rasterize_shape(shape, (pad / 2.0, pad / 2.0), size, pad, pad)
    return int(m.sum())


def _draw_object(rng: np.random.Generator, config: DatasetConfig, z_order: int) -> ObjectSpec:
    shape = SHAPES[rng.integers(len(SHAPES))]
    color = tuple(float(c) for c in config.palette[rng.integers(len(config.palette))])
    smin, smax = config.size_range
    size = float(rng.uniform(smin, smax))
    x = float(rng.uniform(0.0, config.width))
    y = float(rng.uniform(0.0, config.height))
    return ObjectSpec(shape=shape, color=color, size=size, position=(x, y), z_order=z_order)


def _inside_fraction(obj: ObjectSpec, config: DatasetConfig) -> float:
    full = _full_silhouette_area(obj.shape, obj.size)
    if full == 0:
        return 0.0
    clipped = rasterize_shape(obj.shape, obj.position, obj.size, config.height, config.width)
    return clipped.sum() / full


def _visible_masks(objects: list[ObjectSpec], config: DatasetConfig) -> np.ndarray:
    """Stack of visible (unoccluded) masks, one per object, under z-order."""
    h, w = config.height, config.width
    silhouettes = [
        rasterize_shape(o.shape, o.position, o.size, h, w) for o in objects
    ]
    visible = []
    for i, obj in enumerate(objects):
        occluders = np.zeros((h, w), dtype=bool)
        for j, other in enumerate(objects):
            if other.z_order > obj.z_order:
                occluders |= silhouettes[j]
        visible.append(silhouettes[i] & ~occluders)
    return np.stack(visible) if visible else np.zeros((0, h, w), dtype=bool)


def generate_scene(seed: int, config: DatasetConfig) -> SceneRecord:
    """Deterministically generate one scene from (seed, config)."""
    config.validate()
    rng = np.random.default_rng(seed)
    h, w = config.height, config.width

    if config.background_mode == "sampled":
        gray = float(rng.uniform(0.2, 0.8))
    else:
        gray = float(config.background_gray)

    lo, hi = config.object_count_range
    n_target = int(rng.integers(lo, hi + 1))

    # Objects are placed in z-order; a candidate is rejected if it falls too
    # far outside the frame or would occlude any earlier object below the
    # visibility floor. A failed scene (rare) is regenerated from the same
    # stream, keeping the whole procedure a pure function of (seed, config).
    objects: list[ObjectSpec] = []
    for _ in range(20):
        objects = []
        ok = True
        for idx in range(n_target):
            placed = False
            for _attempt in range(100):
                cand = _draw_object(rng, config, z_order=idx + 1)
                if _inside_fraction(cand, config) < MIN_INSIDE_FRACTION:
                    continue
                trial = objects + [cand]
                vis = _visible_masks(trial, config)
                if (vis.sum(axis=(1, 2)) >= MIN_VISIBLE_PIXELS).all():
                    objects = trial
                    placed = True
                    break
            if not placed:
                ok = False
                break
        if ok:
            break
    if len(objects) != n_target:
        raise RuntimeError(
            f"could not place {n_target} objects in a {h}x{w} frame; relax the config"
        )

    vis = _visible_masks(objects, config)
    background = ~vis.any(axis=0) if len(objects) else np.ones((h, w), dtype=bool)
    masks = np.concatenate([background[None], vis]).astype(np.uint8)

    image01 = np.empty((h, w, 3), dtype=np.float64)
    image01[:] = gray
    for obj in sorted(objects, key=lambda o: o.z_order):
        sil = rasterize_shape(obj.shape, obj.position, obj.size, h, w)
        image01[sil] = obj.color
    image = (image01 * 2.0 - 1.0).astype(np.float32)

    return SceneRecord(image=image, masks=masks, objects=objects, n_objects=len(objects))


def validate_record(record: SceneRecord) -> None:
    """Raise if a record violates the mask partition or value-range contracts."""
    n, h, w = record.masks.shape[0] - 1, record.masks.shape[1], record.masks.shape[2]
    if n != record.n_objects or n != len(record.objects):
        raise ValueError("mask count, n_objects and object table disagree")
    if record.image.shape != (h, w, 3):
        raise ValueError(f"image shape {record.image.shape} does not match masks")
    if record.image.min() < -1.0 or record.image.max() > 1.0:
        raise ValueError("image values leave [-1, 1]")
    if not np.array_equal(record.masks.sum(axis=0), np.ones((h, w), dtype=record.masks.dtype)):
        raise ValueError("masks are not an exact partition of the pixels")
    z = [o.z_order for o in record.objects]
    if len(set(z)) != len(z):
        raise ValueError("duplicate z_order in object table")


def _jitter_factors(rng: np.random.Generator, strength: float) -> dict:
    """Brightness/contrast/saturation factors and hue shift, benchmark ranges scaled by strength."""
    half = 0.5 * strength
    return {
        "brightness": float(rng.uniform(max(0.0, 1.0 - half), 1.0 + half)),
        "contrast": float(rng.uniform(max(0.0, 1.0 - half), 1.0 + half)),
        "saturation": float(rng.uniform(max(0.0, 1.0 - half), 1.0 + half)),
        "hue": float(rng.uniform(-half, half)),
    }


def apply_color_jitter(
    image: np.ndarray,
    brightness: float = 1.0,
    contrast: float = 1.0,
    saturation: float = 1.0,
    hue: float = 0.0,
) -> np.ndarray:
    """Apply photometric jitter to an (H, W, 3) image in [-1, 1].

    Operations run in the fixed order brightness, contrast, saturation, hue;
    identity factors are skipped so a no-op call returns the input bit-exactly.
    """
    ops_applied = False
    t = torch.from_numpy(((image.astype(np.float64) + 1.0) / 2.0)).permute(2, 0, 1)
    if brightness != 1.0:
        t = TF.adjust_brightness(t, brightness)
        ops_applied = True
    if contrast != 1.0:
        t = TF.adjust_contrast(t, contrast)
        ops_applied = True
    if saturation != 1.0:
        t = TF.adjust_saturation(t, saturation)
        ops_applied = True
    if hue != 0.0:
        t = TF.adjust_hue(t, hue)
        ops_applied = True
    if not ops_applied:
        return image
    out01 = t.permute(1, 2, 0).numpy()
    return np.clip(out01 * 2.0 - 1.0, -1.0, 1.0).astype(image.dtype)


def color_jitter_object(record: SceneRecord, seed: int, strength: float) -> SceneRecord:
    """Recolor one randomly chosen object inside its ground-truth mask.

    Pixels outside the chosen object's visible mask are bitwise unchanged;
    masks and the property table are untouched. The jitter parameters are
    recorded under record.annotations["jitter"].
    """
    if record.n_objects < 1:
        raise ValueError("record has no objects to jitter")
    if not 0.0 <= strength <= 1.0:
        raise ValueError(f"strength must be in [0, 1], got {strength}")
    rng = np.random.default_rng(seed)
    target = int(rng.integers(record.n_objects))
    factors = _jitter_factors(rng, strength)

    jittered = apply_color_jitter(record.image, **factors)
    mask = record.masks[target + 1].astype(bool)
    image = np.where(mask[..., None], jittered, record.image)

    annotations = dict(record.annotations)
    annotations["jitter"] = {"object_index": target, "strength": strength, **factors}
    return SceneRecord(
        image=image,
        masks=record.masks,
        objects=record.objects,
        n_objects=record.n_objects,
        annotations=annotations,
    )


def scene_seed(dataset_seed: int, index: int) -> int:
    """Stable per-scene seed derived from the dataset seed and scene index."""
    ss = np.random.SeedSequence(entropy=(int(dataset_seed), int(index)))
    return int(ss.generate_state(1)[0])


def generate_scenes(config: DatasetConfig, n: int | None = None, offset: int = 0) -> list[SceneRecord]:
    """Generate config.n_scenes (or n) records, seeded from config.rng_seed."""
    count = config.n_scenes if n is None else n
    return [generate_scene(scene_seed(config.rng_seed, offset + i), config) for i in range(count)]
