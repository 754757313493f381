import math

import numpy as np
import pytest

from conftest import random_model
from evaluation import (
    auroc,
    box_stats,
    calibrate_threshold,
    nearest_rank_percentile,
    rank_distance_curve,
    rank_distance_curve_from_probs,
    standardization_stats,
    standardize_scores,
    summarize,
    u1u2_summary,
)
from taxonomy import parse_taxonomy, soft_label_matrix


def _pairwise_auroc(known, novel) -> float:
    wins = 0.0
    for n in novel:
        for k in known:
            wins += 1.0 if n > k else 0.5 if n == k else 0.0
    return wins / (len(known) * len(novel))


class TestAuroc:
    def test_hand_case(self):
        assert auroc([0.1, 0.4], [0.35, 0.8]) == 0.75

    def test_ties_count_one_half(self):
        assert auroc([1.0, 1.0], [1.0]) == 0.5

    def test_perfect_and_reversed(self):
        assert auroc([0.0, 1.0], [2.0, 3.0]) == 1.0
        assert auroc([2.0, 3.0], [0.0, 1.0]) == 0.0

    def test_matches_pairwise_count(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            known = rng.integers(0, 20, size=rng.integers(1, 30)).astype(float)
            novel = rng.integers(0, 20, size=rng.integers(1, 30)).astype(float)
            assert auroc(known, novel) == pytest.approx(_pairwise_auroc(known, novel), abs=1e-12)

    def test_invariant_under_increasing_transforms(self):
        rng = np.random.default_rng(4)
        known, novel = rng.standard_normal(60), rng.standard_normal(40) + 0.5
        expected = auroc(known, novel)
        for transform in (np.exp, np.arctan, lambda s: 3.0 * s + 1.0, lambda s: s ** 3):
            assert auroc(transform(known), transform(novel)) == pytest.approx(expected, abs=1e-12)

    def test_empty_input(self):
        with pytest.raises(ValueError):
            auroc([], [1.0])
        with pytest.raises(ValueError):
            auroc([1.0], [])


class TestCalibration:
    def test_nearest_rank_percentile(self):
        values = np.arange(1.0, 11.0)
        assert nearest_rank_percentile(values, 0.9) == 9.0
        assert nearest_rank_percentile(values, 0.95) == 10.0
        assert nearest_rank_percentile([4.0], 0.5) == 4.0

    def test_iterates_until_removed_set_is_stable(self):
        result = calibrate_threshold(np.arange(1.0, 101.0), 0.05)
        assert result.threshold == 19.0
        assert result.iterations == 42
        assert result.removed == 81

    def test_rerun_on_kept_scores_is_a_fixed_point(self):
        first = calibrate_threshold(np.arange(1.0, 101.0), 0.05)
        kept = np.arange(1.0, 101.0)[np.arange(1.0, 101.0) <= first.threshold]
        again = calibrate_threshold(kept, 0.05)
        assert again.threshold == first.threshold
        assert again.iterations == 1
        assert again.removed == 0

    def test_constant_scores(self):
        result = calibrate_threshold([3.0] * 10, 0.05)
        assert result.threshold == 3.0
        assert result.removed == 0

    def test_shuffled_input_gives_same_threshold(self):
        scores = np.random.default_rng(1).standard_normal(200)
        a = calibrate_threshold(scores, 0.1)
        b = calibrate_threshold(scores[::-1], 0.1)
        assert a == b

    @pytest.mark.parametrize("alpha", [0.0, 1.0, -0.1, 1.5])
    def test_bad_alpha(self, alpha):
        with pytest.raises(ValueError):
            calibrate_threshold([1.0, 2.0], alpha)

    def test_empty_validation(self):
        with pytest.raises(ValueError):
            calibrate_threshold([], 0.05)


class TestSummaries:
    def test_standardization(self):
        mean, std = standardization_stats([1.0, 3.0])
        assert mean == 2.0
        assert std == pytest.approx(math.sqrt(2.0))
        np.testing.assert_allclose(standardize_scores([2.0, 4.0], 2.0, 2.0), [0.0, 1.0])

    def test_zero_std_is_rejected(self):
        with pytest.raises(ValueError):
            standardize_scores([1.0], 1.0, 0.0)
        with pytest.raises(ValueError):
            standardization_stats([1.0])

    def test_summarize(self):
        assert all(math.isnan(v) for v in summarize([]))
        assert summarize([2.5]) == (2.5, 0.0)
        mean, half = summarize([1.0, 3.0])
        assert mean == 2.0
        assert half == pytest.approx(1.959963984540054 * math.sqrt(2.0) / math.sqrt(2.0))

    def test_box_stats(self):
        stats = box_stats([1.0, 2.0, 3.0, 4.0, 5.0])
        assert stats == {"n": 5, "min": 1.0, "q1": 2.0, "median": 3.0, "q3": 4.0, "max": 5.0}
        assert box_stats([])["n"] == 0


class TestRankDistance:
    def test_hand_case(self, figure_tree):
        curve = rank_distance_curve_from_probs(np.array([[0.7, 0.2, 0.06, 0.04]]), None, figure_tree)
        np.testing.assert_array_equal(curve.ranks, [2, 3, 4])
        np.testing.assert_array_equal(curve.known_mean, [0.5, 1.0, 1.0])
        assert np.all(np.isnan(curve.novel_mean))

    def test_random_rankings_average_out(self, figure_tree):
        probs = np.random.default_rng(2).dirichlet(np.ones(4), size=4000)
        curve = rank_distance_curve_from_probs(probs, probs[:10], figure_tree)
        np.testing.assert_allclose(curve.known_mean, 5.0 / 6.0, atol=0.03)
        assert curve.known_mean.sum() == pytest.approx(2.5)

    def test_rows_cover_both_populations(self, figure_tree, small_model):
        rng = np.random.default_rng(3)

        class _Features:
            def __init__(self, X):
                self.features = X

        curve = rank_distance_curve(small_model, _Features(rng.standard_normal((5, 4))),
                                    _Features(rng.standard_normal((3, 4))), figure_tree)
        rows = list(curve.rows())
        assert [r[0] for r in rows] == ["known"] * 3 + ["novel"] * 3
        assert all(0.0 <= r[2] <= 1.0 for r in rows)

    @pytest.mark.parametrize("beta", [0.5, 10.0])
    def test_soft_label_exact_predictions_are_monotone(self, steel_tree, beta):
        soft = soft_label_matrix(steel_tree, beta)
        labels = np.random.default_rng(5).integers(0, steel_tree.num_classes, size=300)
        curve = rank_distance_curve_from_probs(soft.values[labels], None, steel_tree)
        assert np.all(np.diff(curve.known_mean) >= 0.0)
        assert curve.known_mean[-1] == 1.0

    def test_two_leaves(self):
        tree = parse_taxonomy('{"name": "root", "children": [{"name": "A"}, {"name": "B"}]}')
        curve = rank_distance_curve_from_probs(np.array([[0.7, 0.3], [0.1, 0.9]]), None, tree)
        np.testing.assert_array_equal(curve.ranks, [2])
        np.testing.assert_array_equal(curve.known_mean, [1.0])

    def test_class_count_mismatch(self, figure_tree):
        with pytest.raises(ValueError):
            rank_distance_curve_from_probs(np.ones((2, 3)) / 3, None, figure_tree)


def test_u1u2_summary(figure_tree):
    model = random_model(7)
    rng = np.random.default_rng(7)
    summary = u1u2_summary(model, rng.standard_normal((6, 4)), rng.standard_normal((4, 4)), 1000.0,
                           soft_label_matrix(figure_tree, 10.0))
    assert set(summary) == {"known", "novel"}
    assert summary["novel"]["n"] == 4
    assert set(summary["known"]) == {"u1_mean", "u1_halfwidth", "u2_mean", "u2_halfwidth", "n"}
    assert summary["known"]["u1_mean"] <= 0.0
    with pytest.raises(ValueError):
        u1u2_summary(model, np.zeros((0, 4)), np.zeros((1, 4)), 1000.0, soft_label_matrix(figure_tree, 10.0))
