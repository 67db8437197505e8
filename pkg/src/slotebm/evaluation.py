"""Segmentation metrics, slot-object matching, probes, and robustness harnesses.

Predicted masks are reduced to per-pixel labels by argmax over slots;
segmentation quality is the adjusted Rand index against the ground-truth
object partition, restricted to non-background pixels. Slots are matched to
objects with a minimum-cost assignment on negative mask IoU, which also feeds
the linear property probes.
"""

from __future__ import annotations

import dataclasses
import traceback
from dataclasses import dataclass

import numpy as np
import torch

from .datasets import DEFAULT_PALETTE, SHAPES, SceneRecord
from .model import SlotEnergyModel, images_to_tensor
from .sampler import SamplerConfig
from .training import TrainConfig, step_seed


def ari(a: np.ndarray, b: np.ndarray) -> float:
    """Adjusted Rand index between two labelings, via the contingency table.

    Degenerate agreement (both labelings a single cluster, or both all
    singletons) returns 1.0.
    """
    a = np.asarray(a).ravel()
    b = np.asarray(b).ravel()
    if a.shape != b.shape:
        raise ValueError(f"labelings differ in length: {a.shape} vs {b.shape}")
    n = a.size
    if n < 2:
        raise ValueError("ARI needs at least 2 points")
    _, ia = np.unique(a, return_inverse=True)
    _, ib = np.unique(b, return_inverse=True)
    table = np.zeros((ia.max() + 1, ib.max() + 1), dtype=np.int64)
    np.add.at(table, (ia, ib), 1)

    def comb2(x):
        return x * (x - 1) // 2

    sum_cells = comb2(table).sum()
    sum_rows = comb2(table.sum(axis=1)).sum()
    sum_cols = comb2(table.sum(axis=0)).sum()
    total = comb2(np.int64(n))
    expected = sum_rows * sum_cols / total
    maximum = (sum_rows + sum_cols) / 2.0
    if maximum == expected:
        return 1.0
    return float((sum_cells - expected) / (maximum - expected))


def masks_to_labels(masks: np.ndarray) -> np.ndarray:
    """(K, H, W) mask stack -> per-pixel slot index, ties to the lowest slot."""
    masks = np.asarray(masks)
    if masks.ndim != 3:
        raise ValueError(f"expected (K, H, W) masks, got shape {masks.shape}")
    return masks.argmax(axis=0)


def record_labels(record: SceneRecord) -> np.ndarray:
    """Ground-truth per-pixel labels: 0 background, k for object k."""
    return masks_to_labels(record.masks)


def foreground_ari(pred_masks: np.ndarray, record: SceneRecord) -> float | None:
    """ARI restricted to non-background pixels; None if the scene has no foreground."""
    gt = record_labels(record)
    fg = record.masks[0] == 0
    if fg.sum() < 2:
        return None
    pred = masks_to_labels(pred_masks)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction shape {pred.shape} != scene shape {gt.shape}")
    return ari(pred[fg], gt[fg])


@dataclass
class Assignment:
    """Minimum-cost one-to-one matching; row_to_col[i] is -1 for unmatched rows."""

    row_to_col: np.ndarray
    total_cost: float

    def pairs(self) -> list[tuple[int, int]]:
        return [(i, int(j)) for i, j in enumerate(self.row_to_col) if j >= 0]


def _assignment_cost(cost: np.ndarray) -> float:
    """Optimal assignment cost by shortest augmenting paths (rows <= cols inside)."""
    if cost.shape[0] > cost.shape[1]:
        cost = cost.T
    n, m = cost.shape
    if n == 0:
        return 0.0
    inf = np.inf
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    match = np.zeros(m + 1, dtype=np.int64)  # col j -> row, 1-based, 0 = free
    for i in range(1, n + 1):
        match[0] = i
        j0 = 0
        minv = np.full(m + 1, inf)
        way = np.zeros(m + 1, dtype=np.int64)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = match[j0]
            delta = inf
            j1 = 0
            for j in range(1, m + 1):
                if used[j]:
                    continue
                cur = cost[i0 - 1, j - 1] - u[i0] - v[j]
                if cur < minv[j]:
                    minv[j] = cur
                    way[j] = j0
                if minv[j] < delta:
                    delta = minv[j]
                    j1 = j
            for j in range(m + 1):
                if used[j]:
                    u[match[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if match[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            match[j0] = match[j1]
            j0 = j1
    total = 0.0
    for j in range(1, m + 1):
        if match[j]:
            total += cost[match[j] - 1, j - 1]
    return float(total)


def hungarian(cost: np.ndarray) -> Assignment:
    """Minimum-cost assignment, deterministic under ties.

    Among all minimum-cost matchings of size min(n, m), returns the one whose
    (row 0, row 1, ...) column choices are lexicographically smallest, with
    "unmatched" ordered after every column.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2 or cost.size == 0:
        raise ValueError(f"cost must be a nonempty 2-D matrix, got shape {cost.shape}")
    if not np.isfinite(cost).all():
        raise ValueError("cost matrix contains non-finite entries")
    n, m = cost.shape
    need = min(n, m)
    best = _assignment_cost(cost)
    tol = 1e-9 * (1.0 + abs(best))

    row_to_col = np.full(n, -1, dtype=np.int64)
    free_cols = list(range(m))
    made = 0
    running = 0.0
    for r in range(n):
        rows_left = n - r - 1
        chosen = None
        for c in free_cols:
            remaining = [cc for cc in free_cols if cc != c]
            sub = cost[np.ix_(range(r + 1, n), remaining)]
            completion = _assignment_cost(sub) if min(sub.shape) > 0 else 0.0
            # only valid if the tail can still finish the matching
            if made + 1 + min(rows_left, len(remaining)) < need:
                continue
            if running + cost[r, c] + completion <= best + tol:
                chosen = c
                break
        if chosen is None:
            # leave this row unmatched; legal only if later rows suffice
            if made + min(rows_left, len(free_cols)) < need:
                raise RuntimeError("assignment search failed to complete")  # pragma: no cover
            continue
        row_to_col[r] = chosen
        free_cols.remove(chosen)
        running += cost[r, chosen]
        made += 1
    return Assignment(row_to_col=row_to_col, total_cost=float(running))


def slot_object_iou(pred_masks: np.ndarray, record: SceneRecord) -> np.ndarray:
    """(K, n_objects) IoU between argmax slot regions and visible object masks."""
    labels = masks_to_labels(pred_masks)
    k = pred_masks.shape[0]
    out = np.zeros((k, record.n_objects))
    for s in range(k):
        slot = labels == s
        for o in range(record.n_objects):
            gt = record.masks[o + 1].astype(bool)
            union = (slot | gt).sum()
            out[s, o] = (slot & gt).sum() / union if union else 0.0
    return out


def match_slots(pred_masks: np.ndarray, record: SceneRecord) -> list[tuple[int, int, float]]:
    """Hungarian matching of slots to objects on negative IoU.

    Returns (slot, object, iou) triples; pairs with zero overlap are dropped.
    """
    if record.n_objects == 0:
        return []
    iou = slot_object_iou(pred_masks, record)
    assignment = hungarian(-iou)
    return [(s, o, float(iou[s, o])) for s, o in assignment.pairs() if iou[s, o] > 0.0]


def matched_foreground_mass(
    pred_masks: np.ndarray, record: SceneRecord, iou_threshold: float = 0.1
) -> int:
    """Pixels argmax-assigned to slots that credibly track an object.

    A slot counts as an object slot when its IoU with some ground-truth object
    reaches the threshold; the returned mass is the pixel count of those slots'
    argmax regions.
    """
    labels = masks_to_labels(pred_masks)
    if record.n_objects == 0:
        return 0
    iou = slot_object_iou(pred_masks, record)
    object_slots = np.where(iou.max(axis=1) >= iou_threshold)[0]
    return int(np.isin(labels, object_slots).sum())


def extra_slot_foreground_share(pred_masks: np.ndarray, record: SceneRecord) -> float:
    """Fraction of all pixels that are foreground claimed by unmatched slots."""
    labels = masks_to_labels(pred_masks)
    matched = {s for s, _, _ in match_slots(pred_masks, record)}
    extra = [s for s in range(pred_masks.shape[0]) if s not in matched]
    fg = record.masks[0] == 0
    claimed = np.isin(labels, extra) & fg
    return float(claimed.sum() / labels.size)


# ---------------------------------------------------------------------------
# model evaluation harness


def infer_masks(
    model: SlotEnergyModel,
    records: list[SceneRecord],
    *,
    seed: int = 0,
    sampler: SamplerConfig | None = None,
    batch_size: int = 32,
) -> list[np.ndarray]:
    """Per-scene predicted mask stacks (K, H, W) from the trained model."""
    out = []
    model.eval()
    for start in range(0, len(records), batch_size):
        chunk = records[start : start + batch_size]
        images = images_to_tensor(np.stack([r.image for r in chunk]))
        recon, _ = model.reconstruct(images, sampler=sampler, seed=step_seed(seed, start, 3))
        out.extend(m for m in recon.masks.numpy())
    return out


def evaluate_segmentation(
    model: SlotEnergyModel,
    records: list[SceneRecord],
    *,
    seed: int = 0,
    sampler: SamplerConfig | None = None,
) -> dict:
    """Foreground ARI over a record set; zero-foreground scenes are skipped."""
    masks = infer_masks(model, records, seed=seed, sampler=sampler)
    scores = []
    skipped = 0
    for pred, record in zip(masks, records):
        value = foreground_ari(pred, record)
        if value is None:
            skipped += 1
        else:
            scores.append(value)
    return {
        "mean_ari": float(np.mean(scores)) if scores else float("nan"),
        "std_ari": float(np.std(scores)) if scores else float("nan"),
        "n_scenes": len(scores),
        "n_skipped": skipped,
        "per_scene": scores,
    }


def eval_ood_counts(
    model: SlotEnergyModel,
    records: list[SceneRecord],
    k_test: int,
    *,
    seed: int = 0,
) -> dict:
    """Segmentation with an enlarged slot budget on denser test scenes.

    The architecture is K-agnostic, so only the sampler's slot count changes.
    Also reports how much foreground the surplus slots claim.
    """
    max_objects = max((r.n_objects for r in records), default=0)
    if k_test < max_objects + 1:
        raise ValueError(f"k_test={k_test} must be at least max objects + 1 = {max_objects + 1}")
    sampler = dataclasses.replace(model.sampler_config, n_slots=k_test)
    result = evaluate_segmentation(model, records, seed=seed, sampler=sampler)
    masks = infer_masks(model, records, seed=seed, sampler=sampler)
    extra_share = [extra_slot_foreground_share(p, r) for p, r in zip(masks, records)]
    result["k_test"] = k_test
    result["extra_slot_foreground_share"] = float(np.mean(extra_share))
    return result


# ---------------------------------------------------------------------------
# linear property probes

PROBE_PROPERTIES = {
    "shape": "categorical",
    "color_id": "categorical",
    "color_rgb": "numeric",
    "position": "numeric",
    "size": "numeric",
}


@dataclass
class ProbeModel:
    """One affine map per property; categorical heads score one-hot targets."""

    weights: dict[str, np.ndarray]  # (Dz + 1, out_dim), bias row last
    kinds: dict[str, str]

    def predict(self, prop: str, latents: np.ndarray) -> np.ndarray:
        x = np.concatenate([latents, np.ones((latents.shape[0], 1))], axis=1)
        scores = x @ self.weights[prop]
        if self.kinds[prop] == "categorical":
            return scores.argmax(axis=1)
        return scores


def _object_targets(record: SceneRecord, obj_index: int, palette) -> dict:
    obj = record.objects[obj_index]
    h, w = record.image.shape[:2]
    palette = np.asarray(palette)
    color = np.asarray(obj.color)
    color_id = int(np.argmin(((palette - color) ** 2).sum(axis=1)))
    return {
        "shape": SHAPES.index(obj.shape),
        "color_id": color_id,
        "color_rgb": color,
        "position": np.array([obj.position[0] / w, obj.position[1] / h]),
        "size": np.array([obj.size / min(h, w)]),
    }


def collect_probe_pairs(
    model: SlotEnergyModel,
    records: list[SceneRecord],
    *,
    seed: int = 0,
    palette=DEFAULT_PALETTE,
) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    """Matched (latent, property) pairs across a record set.

    Latents come from the model's Langevin inference; slots are paired with
    objects by IoU matching, and unmatched slots and objects are dropped.
    """
    model.eval()
    latents_out = []
    targets: dict[str, list] = {p: [] for p in PROBE_PROPERTIES}
    batch = 32
    for start in range(0, len(records), batch):
        chunk = records[start : start + batch]
        images = images_to_tensor(np.stack([r.image for r in chunk]))
        with torch.no_grad():
            trajectory = model.infer(images, seed=step_seed(seed, start, 4))
            recon = model.decoder(trajectory.final)
        z = trajectory.final.numpy()
        masks = recon.masks.numpy()
        for b, record in enumerate(chunk):
            for slot, obj, _ in match_slots(masks[b], record):
                latents_out.append(z[b, slot])
                t = _object_targets(record, obj, palette)
                for prop in PROBE_PROPERTIES:
                    targets[prop].append(t[prop])
    if not latents_out:
        return np.zeros((0, model.config.latent_dim)), {
            p: np.zeros((0,)) for p in PROBE_PROPERTIES
        }
    return np.stack(latents_out), {p: np.asarray(v) for p, v in targets.items()}


def probe_fit(latents: np.ndarray, targets: dict[str, np.ndarray]) -> ProbeModel:
    """Least-squares linear probes; categorical targets are fit as one-hot scores."""
    if latents.shape[0] == 0:
        raise ValueError("no matched slot/object pairs to fit probes on")
    x = np.concatenate([latents, np.ones((latents.shape[0], 1))], axis=1)
    weights = {}
    kinds = {}
    for prop, kind in PROBE_PROPERTIES.items():
        y = targets[prop]
        if kind == "categorical":
            n_classes = int(y.max()) + 1
            y = np.eye(n_classes)[y.astype(int)]
        elif y.ndim == 1:
            y = y[:, None]
        w, *_ = np.linalg.lstsq(x, y, rcond=None)
        weights[prop] = w
        kinds[prop] = kind
    return ProbeModel(weights=weights, kinds=kinds)


def r_squared(y_true: np.ndarray, y_pred: np.ndarray) -> float:
    """Coefficient of determination, averaged uniformly over output columns."""
    y_true = np.atleast_2d(np.asarray(y_true, dtype=np.float64))
    y_pred = np.atleast_2d(np.asarray(y_pred, dtype=np.float64))
    if y_true.shape[0] == 1:
        y_true, y_pred = y_true.T, y_pred.T
    scores = []
    for c in range(y_true.shape[1]):
        ss_res = ((y_true[:, c] - y_pred[:, c]) ** 2).sum()
        ss_tot = ((y_true[:, c] - y_true[:, c].mean()) ** 2).sum()
        if ss_tot == 0:
            scores.append(1.0 if ss_res == 0 else 0.0)
        else:
            scores.append(1.0 - ss_res / ss_tot)
    return float(np.mean(scores))


def probe_eval(
    probe: ProbeModel, latents: np.ndarray, targets: dict[str, np.ndarray]
) -> dict[str, dict]:
    """Accuracy for categorical properties, R^2 for numeric ones."""
    out = {}
    for prop, kind in probe.kinds.items():
        pred = probe.predict(prop, latents)
        y = targets[prop]
        if kind == "categorical":
            value = float((pred == y.astype(int)).mean())
            out[prop] = {"metric": "accuracy", "value": value}
        else:
            if y.ndim == 1:
                y = y[:, None]
            out[prop] = {"metric": "r2", "value": r_squared(y, pred)}
    return out


# ---------------------------------------------------------------------------
# hyperparameter ablation


def ablation_grid(
    base_config: TrainConfig,
    grid: list[dict],
    train_images: np.ndarray,
    test_records: list[SceneRecord],
    out_root,
    *,
    seeds: tuple[int, ...] = (0,),
    eval_seed: int = 0,
) -> list[dict]:
    """Train and score every configuration; failures are recorded, not raised.

    Each grid entry is a dict of overrides applied to the base config's
    sampler ("n_steps", "step_size", "noise_scale") or energy ("n_blocks").
    Returns one row per entry with ARI mean and sd over seeds.
    """
    from pathlib import Path

    from .training import fit

    rows = []
    for idx, overrides in enumerate(grid):
        scores = []
        error = None
        for seed in seeds:
            try:
                config = _apply_overrides(base_config, overrides, seed)
                out_dir = Path(out_root) / f"cell_{idx:02d}_seed{seed}"
                model, _ = fit(train_images, config, out_dir)
                result = evaluate_segmentation(model, test_records, seed=eval_seed)
                scores.append(result["mean_ari"])
            except Exception as err:  # noqa: BLE001 - grid must survive bad cells
                error = f"{type(err).__name__}: {err}"
                traceback.print_exc()
        row = {
            "config": dict(overrides),
            "seeds": list(seeds),
            "ari_mean": float(np.mean(scores)) if scores else float("nan"),
            "ari_sd": float(np.std(scores)) if scores else float("nan"),
            "n_ok": len(scores),
        }
        if error:
            row["error"] = error
        rows.append(row)
    return rows


def _apply_overrides(base: TrainConfig, overrides: dict, seed: int) -> TrainConfig:
    sampler_fields = {f.name for f in dataclasses.fields(SamplerConfig)}
    sampler_kwargs = {k: v for k, v in overrides.items() if k in sampler_fields}
    sampler = dataclasses.replace(base.sampler, **sampler_kwargs)
    model = base.model
    if "n_blocks" in overrides:
        energy = dataclasses.replace(model.energy, n_blocks=int(overrides["n_blocks"]))
        model = dataclasses.replace(model, energy=energy)
    leftover = set(overrides) - sampler_fields - {"n_blocks"}
    if leftover:
        raise ValueError(f"unknown ablation keys: {sorted(leftover)}")
    return dataclasses.replace(base, sampler=sampler, model=model, seed=seed)
