"""
Tests for ranking and HR/NDCG
"""

import math

import numpy as np
import pytest

from bmlp.errors import InvalidTargetError, UndefinedMetricError
from bmlp.evaluation.metrics import hr_at_k, ndcg_at_k, rank_of_target


def sorted_rank(scores, target, exclude=(0,)):
    """Position of ``target`` after sorting candidates by (-score, index)."""
    candidates = [j for j in range(len(scores)) if j not in exclude]
    order = sorted(candidates, key=lambda j: (-scores[j], j))
    return order.index(target) + 1


class TestRank:

    def test_unique_maximum(self):
        assert rank_of_target(np.array([0.0, 0.1, 0.7, 0.2]), 2) == 1

    def test_ties_break_toward_lower_index(self):
        scores = np.array([0.0, 0.2, 0.2, 0.2, 0.2, 0.2])
        assert rank_of_target(scores, 3) == 3
        assert rank_of_target(scores, 1) == 1

    def test_padding_column_is_not_a_candidate(self):
        assert rank_of_target(np.array([[9.0, 0.1, 0.2]]), 2) == 1

    def test_excluded_target(self):
        with pytest.raises(InvalidTargetError):
            rank_of_target(np.array([0.0, 1.0]), 0)

    def test_target_outside_vector(self):
        with pytest.raises(InvalidTargetError):
            rank_of_target(np.array([0.0, 1.0]), 5)

    def test_matches_sorting(self):
        gen = np.random.default_rng(7)
        for _ in range(1000):
            n = int(gen.integers(2, 12))
            # coarse values so ties are common
            scores = np.round(gen.random(n + 1), 1)
            target = int(gen.integers(1, n + 1))
            assert rank_of_target(scores, target) == sorted_rank(list(scores), target)


class TestHitRatioAndNdcg:

    def test_hand_values(self):
        ranks = [1, 3, 11]
        assert hr_at_k(ranks, 10) == pytest.approx(2 / 3)
        assert ndcg_at_k(ranks, 10) == pytest.approx((1.0 + 0.5) / 3)

    def test_single_rank_gains(self):
        assert ndcg_at_k([1], 10) == 1.0
        assert ndcg_at_k([2], 10) == pytest.approx(1 / math.log2(3))
        assert ndcg_at_k([10], 10) == pytest.approx(1 / math.log2(11))
        assert ndcg_at_k([11], 10) == 0.0

    def test_monotone_in_k(self):
        ranks = list(np.random.default_rng(3).integers(1, 40, size=200))
        hrs = [hr_at_k(ranks, k) for k in range(1, 50)]
        ndcgs = [ndcg_at_k(ranks, k) for k in range(1, 50)]
        assert hrs == sorted(hrs)
        assert ndcgs == sorted(ndcgs)
        assert all(n <= h for n, h in zip(ndcgs, hrs))

    def test_empty(self):
        with pytest.raises(UndefinedMetricError):
            hr_at_k([], 10)
        with pytest.raises(UndefinedMetricError):
            ndcg_at_k([], 10)

    def test_rank_below_one(self):
        with pytest.raises(ValueError):
            hr_at_k([0, 1], 10)
