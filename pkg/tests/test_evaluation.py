import itertools
import math

import numpy as np
import pytest
import torch

from slotebm.datasets import DatasetConfig, generate_scenes
from slotebm.evaluation import (
    Assignment,
    ari,
    eval_ood_counts,
    evaluate_segmentation,
    extra_slot_foreground_share,
    foreground_ari,
    hungarian,
    masks_to_labels,
    match_slots,
    probe_eval,
    probe_fit,
    r_squared,
    slot_object_iou,
)

from conftest import make_tiny_model


# independent oracle: contingency table with explicit comb() sums
def ari_bruteforce(a, b):
    a, b = list(a), list(b)
    n = len(a)
    table = {}
    for x, y in zip(a, b):
        table[(x, y)] = table.get((x, y), 0) + 1
    rows, cols = {}, {}
    for (x, y), c in table.items():
        rows[x] = rows.get(x, 0) + c
        cols[y] = cols.get(y, 0) + c
    sum_cells = sum(math.comb(c, 2) for c in table.values())
    sum_rows = sum(math.comb(c, 2) for c in rows.values())
    sum_cols = sum(math.comb(c, 2) for c in cols.values())
    total = math.comb(n, 2)
    expected = sum_rows * sum_cols / total
    maximum = (sum_rows + sum_cols) / 2
    if maximum == expected:
        return 1.0
    return (sum_cells - expected) / (maximum - expected)


def assignment_bruteforce(cost):
    n, m = cost.shape
    best = None
    if n <= m:
        for perm in itertools.permutations(range(m), n):
            total = sum(cost[i, j] for i, j in enumerate(perm))
            if best is None or total < best:
                best = total
    else:
        for perm in itertools.permutations(range(n), m):
            total = sum(cost[i, j] for j, i in enumerate(perm))
            if best is None or total < best:
                best = total
    return best


class TestAri:
    def test_identical_labelings(self):
        labels = np.array([0, 0, 1, 2, 1, 2])
        assert ari(labels, labels) == 1.0

    def test_relabeling_invariance(self):
        a = np.array([0, 0, 1, 2, 1, 2])
        b = np.array([5, 5, 9, 7, 9, 7])
        assert ari(a, b) == 1.0

    def test_both_single_cluster_degenerate(self):
        assert ari(np.zeros(10, dtype=int), np.ones(10, dtype=int) * 3) == 1.0

    def test_symmetry(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            a = rng.integers(0, 4, size=30)
            b = rng.integers(0, 4, size=30)
            assert ari(a, b) == pytest.approx(ari(b, a), abs=1e-15)

    def test_matches_bruteforce_on_200_random_labelings(self):
        rng = np.random.default_rng(1)
        for _ in range(200):
            n = rng.integers(2, 51)
            a = rng.integers(0, rng.integers(1, 6), size=n)
            b = rng.integers(0, rng.integers(1, 6), size=n)
            assert ari(a, b) == pytest.approx(ari_bruteforce(a, b), abs=1e-12)

    def test_length_mismatch_rejected(self):
        with pytest.raises(ValueError):
            ari(np.zeros(3), np.zeros(4))

    def test_too_few_points_rejected(self):
        with pytest.raises(ValueError):
            ari(np.zeros(1), np.zeros(1))


class TestMasksToLabels:
    def test_one_hot_recovers_ids(self):
        masks = np.zeros((3, 2, 2))
        ids = np.array([[0, 1], [2, 1]])
        for k in range(3):
            masks[k][ids == k] = 1.0
        assert np.array_equal(masks_to_labels(masks), ids)

    def test_uniform_ties_pick_slot_zero(self):
        masks = np.full((4, 3, 3), 0.25)
        assert (masks_to_labels(masks) == 0).all()

    def test_matches_perpixel_scan(self):
        rng = np.random.default_rng(2)
        masks = rng.random((5, 6, 7))
        labels = masks_to_labels(masks)
        for i in range(6):
            for j in range(7):
                best, arg = -1.0, 0
                for k in range(5):
                    if masks[k, i, j] > best:
                        best, arg = masks[k, i, j], k
                assert labels[i, j] == arg


class TestForegroundAri:
    config = DatasetConfig(height=16, width=16, object_count_range=(1, 2), size_range=(2.5, 4))

    def test_ground_truth_permutation_scores_one(self):
        record = generate_scenes(self.config, n=1)[0]
        k = record.n_objects + 1
        perm = np.roll(np.arange(k), 1)
        pred = record.masks[perm].astype(float)
        assert foreground_ari(pred, record) == 1.0

    def test_split_object_matches_bruteforce(self):
        record = next(
            r for r in generate_scenes(self.config, n=20) if r.n_objects == 1
        )
        gt_fg = record.masks[0] == 0
        # split the single object into two slots along a column boundary
        columns = np.arange(16)[None, :].repeat(16, axis=0)
        median = np.median(columns[gt_fg])
        pred = np.zeros((3, 16, 16))
        pred[1] = gt_fg & (columns <= median)
        pred[2] = gt_fg & (columns > median)
        pred[0] = ~gt_fg
        value = foreground_ari(pred, record)
        assert value is not None and value < 1.0
        expected = ari_bruteforce(
            masks_to_labels(pred)[gt_fg], masks_to_labels(record.masks)[gt_fg]
        )
        assert value == pytest.approx(expected, abs=1e-12)

    def test_zero_object_scene_skipped(self):
        empty = generate_scenes(
            DatasetConfig(height=16, width=16, object_count_range=(0, 0)), n=1
        )[0]
        pred = np.ones((2, 16, 16)) * 0.5
        assert foreground_ari(pred, empty) is None


class TestHungarian:
    def test_diagonal_prefers_identity(self):
        cost = np.full((4, 4), 5.0)
        np.fill_diagonal(cost, 0.0)
        result = hungarian(cost)
        assert np.array_equal(result.row_to_col, [0, 1, 2, 3])
        assert result.total_cost == 0.0

    def test_all_equal_costs_lexicographic(self):
        result = hungarian(np.full((3, 5), 2.0))
        assert np.array_equal(result.row_to_col, [0, 1, 2])
        assert result.total_cost == pytest.approx(6.0)

    def test_all_equal_costs_wide_rows(self):
        result = hungarian(np.full((5, 3), 2.0))
        assert np.array_equal(result.row_to_col, [0, 1, 2, -1, -1])
        assert result.total_cost == pytest.approx(6.0)

    @pytest.mark.parametrize("shape", [(4, 4), (5, 3), (3, 5), (6, 6), (2, 6)])
    def test_matches_bruteforce(self, shape):
        rng = np.random.default_rng(hash(shape) % 2**32)
        for _ in range(25):
            cost = rng.random(shape)
            result = hungarian(cost)
            assert result.total_cost == pytest.approx(assignment_bruteforce(cost), abs=1e-9)
            pairs = result.pairs()
            assert len(pairs) == min(shape)
            assert len({c for _, c in pairs}) == len(pairs)  # one-to-one

    def test_total_never_beaten_by_enumeration(self):
        rng = np.random.default_rng(3)
        cost = rng.random((6, 6))
        result = hungarian(cost)
        for perm in itertools.permutations(range(6)):
            total = sum(cost[i, j] for i, j in enumerate(perm))
            assert result.total_cost <= total + 1e-9

    def test_rejects_nonfinite(self):
        with pytest.raises(ValueError):
            hungarian(np.array([[1.0, np.inf], [0.0, 1.0]]))

    def test_lexicographic_among_optimal(self):
        # two optimal matchings; rows must take the smallest available columns
        cost = np.array([[1.0, 1.0], [1.0, 1.0]])
        assert np.array_equal(hungarian(cost).row_to_col, [0, 1])


class TestSlotMatching:
    def test_perfect_masks_match_objects(self, tiny_records):
        record = next(r for r in tiny_records if r.n_objects == 2)
        pred = np.concatenate([record.masks[1:], record.masks[:1]]).astype(float)
        matches = match_slots(pred, record)
        assert {(s, o) for s, o, _ in matches} == {(0, 0), (1, 1)}
        assert all(iou == 1.0 for _, _, iou in matches)

    def test_iou_matrix_values(self, tiny_records):
        record = next(r for r in tiny_records if r.n_objects >= 1)
        pred = record.masks[[1, 0]].astype(float) if record.n_objects == 1 else (
            record.masks[[1, 2, 0]].astype(float)
        )
        iou = slot_object_iou(pred, record)
        assert iou[0, 0] == 1.0

    def test_extra_slot_share_zero_for_perfect_prediction(self, tiny_records):
        record = next(r for r in tiny_records if r.n_objects == 2)
        pred = record.masks[[1, 2, 0]].astype(float)
        assert extra_slot_foreground_share(pred, record) == 0.0


class TestProbes:
    def test_ground_truth_latents_reach_upper_bound(self):
        # fake latents carrying the exact properties: accuracy 1, R^2 1
        rng = np.random.default_rng(0)
        n = 200
        shape = rng.integers(0, 3, size=n)
        color_id = rng.integers(0, 6, size=n)
        position = rng.random((n, 2))
        size = rng.random((n, 1)) * 0.2 + 0.1
        color_rgb = rng.random((n, 3))
        latents = np.concatenate(
            [np.eye(3)[shape], np.eye(6)[color_id], position, size, color_rgb], axis=1
        )
        targets = {
            "shape": shape,
            "color_id": color_id,
            "color_rgb": color_rgb,
            "position": position,
            "size": size,
        }
        probe = probe_fit(latents, targets)
        scores = probe_eval(probe, latents, targets)
        assert scores["shape"]["value"] == 1.0
        assert scores["color_id"]["value"] == 1.0
        assert scores["position"]["value"] == pytest.approx(1.0, abs=1e-9)
        assert scores["size"]["value"] == pytest.approx(1.0, abs=1e-9)

    def test_noise_latents_score_at_chance(self):
        rng = np.random.default_rng(1)
        n_train, n_test, dz = 400, 200, 16
        shape = rng.integers(0, 3, size=n_train + n_test)
        majority = max(np.bincount(shape[n_train:])) / n_test
        targets_all = {
            "shape": shape,
            "color_id": rng.integers(0, 6, size=n_train + n_test),
            "color_rgb": rng.random((n_train + n_test, 3)),
            "position": rng.random((n_train + n_test, 2)),
            "size": rng.random((n_train + n_test, 1)),
        }
        latents = rng.standard_normal((n_train + n_test, dz))
        split = lambda arr, lo, hi: arr[lo:hi]
        train_targets = {k: split(v, 0, n_train) for k, v in targets_all.items()}
        test_targets = {k: split(v, n_train, n_train + n_test) for k, v in targets_all.items()}
        probe = probe_fit(latents[:n_train], train_targets)
        scores = probe_eval(probe, latents[n_train:], test_targets)
        assert abs(scores["shape"]["value"] - majority) < 0.15
        assert scores["position"]["value"] < 0.15  # roughly zero, can dip negative

    def test_constant_predictor_r2_is_zero(self):
        y = np.array([1.0, 2.0, 3.0, 4.0])
        pred = np.full_like(y, y.mean())
        assert r_squared(y, pred) == 0.0


class TestModelHarness:
    def test_random_model_ari_near_zero(self, tiny_records):
        model = make_tiny_model()
        result = evaluate_segmentation(model, tiny_records, seed=0)
        assert result["n_scenes"] + result["n_skipped"] == len(tiny_records)
        assert abs(result["mean_ari"]) < 0.35  # untrained: chance level

    def test_ood_counts_requires_spare_slot(self, tiny_records):
        model = make_tiny_model()
        max_objects = max(r.n_objects for r in tiny_records)
        with pytest.raises(ValueError):
            eval_ood_counts(model, tiny_records, k_test=max_objects)

    def test_ood_counts_changes_slot_budget(self, tiny_records):
        model = make_tiny_model()
        result = eval_ood_counts(model, tiny_records, k_test=5, seed=0)
        assert result["k_test"] == 5
        assert 0.0 <= result["extra_slot_foreground_share"] <= 1.0


class TestAblationGrid:
    def test_empty_grid(self, tiny_images, tmp_path):
        from slotebm.evaluation import ablation_grid
        from test_training import tiny_train_config

        rows = ablation_grid(tiny_train_config(), [], tiny_images, [], tmp_path)
        assert rows == []

    def test_two_point_grid_bookkeeping(self, tiny_images, tiny_records, tmp_path):
        from slotebm.evaluation import ablation_grid
        from test_training import tiny_train_config

        config = tiny_train_config(steps=2)
        grid = [{"step_size": 0.05}, {"n_steps": 1}]
        rows = ablation_grid(config, grid, tiny_images, tiny_records[:2], tmp_path)
        assert len(rows) == 2
        assert rows[0]["config"] == {"step_size": 0.05}
        assert rows[1]["config"] == {"n_steps": 1}
        assert all(r["n_ok"] == 1 for r in rows)

    def test_failures_recorded_not_raised(self, tiny_images, tiny_records, tmp_path):
        from slotebm.evaluation import ablation_grid
        from test_training import tiny_train_config

        config = tiny_train_config(steps=2)
        rows = ablation_grid(
            config, [{"bogus_key": 1}], tiny_images, tiny_records[:2], tmp_path
        )
        assert len(rows) == 1
        assert "error" in rows[0]
        assert rows[0]["n_ok"] == 0
