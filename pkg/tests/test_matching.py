import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import linear_sum_assignment

from deskdetr.errors import ConfigError, DimensionError, NumericError
from deskdetr.matching import CostWeights, class_cost, cost_matrix, hungarian, match
from oracles import brute_force


def total(cost, pairs):
    return sum(cost[i, j] for i, j in pairs)


class TestHungarian:
    def test_hand_case(self):
        cost = np.array([[4.0, 1.0, 3.0], [2.0, 0.0, 5.0], [3.0, 2.0, 2.0]])
        assert hungarian(cost) == [(0, 1), (1, 0), (2, 2)]

    def test_empty(self):
        assert hungarian(np.zeros((0, 3))) == []
        assert hungarian(np.zeros((3, 0))) == []

    def test_rectangular_sizes(self):
        rng = np.random.default_rng(0)
        assert len(hungarian(rng.uniform(size=(3, 7)))) == 3
        assert len(hungarian(rng.uniform(size=(7, 3)))) == 3

    def test_all_equal_costs_pick_identity(self):
        assert hungarian(np.ones((3, 3))) == [(0, 0), (1, 1), (2, 2)]

    def test_rejects_non_finite(self):
        with pytest.raises(NumericError):
            hungarian(np.array([[1.0, np.nan], [0.0, 1.0]]))

    def test_rejects_non_matrix(self):
        with pytest.raises(DimensionError):
            hungarian(np.zeros(3))

    def test_matches_brute_force_with_ties(self):
        rng = np.random.default_rng(1)
        for _ in range(60):
            n, m = rng.integers(1, 6, size=2)
            cost = rng.integers(0, 4, size=(n, m)).astype(float)  # small integers force ties
            assert hungarian(cost) == brute_force(cost)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(1, 30), st.integers(1, 30), st.integers(0, 2**31 - 1))
    def test_optimal_total_matches_scipy(self, n, m, seed):
        cost = np.random.default_rng(seed).normal(size=(n, m))
        r, c = linear_sum_assignment(cost)
        assert total(cost, hungarian(cost)) == pytest.approx(cost[r, c].sum(), abs=1e-9)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_permuting_rows_permutes_matching(self, seed):
        rng = np.random.default_rng(seed)
        cost = rng.uniform(size=(5, 6))
        perm = rng.permutation(5)
        base = dict(hungarian(cost))
        moved = dict(hungarian(cost[perm]))
        for new_row, old_row in enumerate(perm):
            assert moved[new_row] == base[old_row]  # continuous costs: the optimum is unique

    @settings(max_examples=40, deadline=None)
    @given(st.integers(1, 7), st.integers(1, 7), st.integers(-50, 50), st.integers(0, 2**31 - 1))
    def test_invariant_to_constant_shift(self, n, m, shift, seed):
        # integer costs keep the shifted totals exact, so ties resolve identically
        cost = np.random.default_rng(seed).integers(0, 5, size=(n, m)).astype(float)
        assert hungarian(cost + shift) == hungarian(cost)


class TestCost:
    def test_weights_default_values(self):
        w = CostWeights()
        assert (w.cls, w.bbox, w.giou, w.alpha, w.gamma) == (2.0, 5.0, 2.0, 0.25, 2.0)

    def test_negative_weight_rejected(self):
        with pytest.raises(ConfigError):
            CostWeights(bbox=-1.0)

    def test_class_cost_prefers_confident_correct_class(self):
        logits = np.array([[4.0, -4.0], [-4.0, 4.0]])
        c = class_cost(logits, np.array([0]))
        assert c[0, 0] < c[1, 0]

    def test_perfect_prediction_is_matched(self):
        gt_boxes = np.array([[0.3, 0.3, 0.2, 0.2], [0.7, 0.6, 0.1, 0.3]])
        gt_labels = np.array([1, 0])
        boxes = np.array([[0.5, 0.5, 0.4, 0.4], [0.7, 0.6, 0.1, 0.3], [0.3, 0.3, 0.2, 0.2]])
        logits = np.full((3, 2), -3.0)
        logits[1, 0] = logits[2, 1] = 3.0
        assert match(logits, boxes, gt_labels, gt_boxes) == [(1, 1), (2, 0)]

    def test_cost_matrix_shape_and_empty(self):
        logits = np.zeros((4, 3))
        boxes = np.full((4, 4), 0.5)
        assert cost_matrix(logits, boxes, np.array([0, 2]), np.full((2, 4), 0.4)).shape == (4, 2)
        assert cost_matrix(logits, boxes, np.zeros(0, dtype=int), np.zeros((0, 4))).shape == (4, 0)
        assert match(logits, boxes, np.zeros(0, dtype=int), np.zeros((0, 4))) == []
