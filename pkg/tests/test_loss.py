#!/usr/bin/env python3
"""
Tests for the detection head and the set-prediction loss
"""

import itertools
import math

import pytest
import numpy as np
from hypothesis import given, strategies as st, settings

import sys
import os
sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..'))

from src import tensor as T
from src.configuration import LossConfig
from src.head import BOX_PARAMS, PRIOR_PROBABILITY, BoxPrediction, DetectionHead, encode_boxes, predict
from src.loss import (
    assignment_cost, focal_loss, hungarian_match, l1_box_loss, layer_loss, match_cost, total_loss,
)
from src.models import GroundTruthSet, WorldRange
from src.tensor import ContractError, DimensionError, Tensor, grad_check


def brute_force_cost(cost: np.ndarray) -> float:
    n, m = cost.shape
    return min(
        sum(cost[rows[j], j] for j in range(m))
        for rows in itertools.permutations(range(n), m)
    )


def lowest_optimal_queries(cost: np.ndarray) -> list:
    """Lexicographically smallest sorted query set among the optimal assignments."""
    n, m = cost.shape
    best = brute_force_cost(cost)
    return min(
        sorted(rows) for rows in itertools.permutations(range(n), m)
        if sum(cost[rows[j], j] for j in range(m)) == best
    )


def make_gt(rng: np.random.Generator, m: int) -> GroundTruthSet:
    boxes = np.column_stack([
        rng.uniform(-40.0, 40.0, size=(m, 2)),
        rng.uniform(0.0, 1.0, size=m),
        rng.uniform(0.5, 4.0, size=(m, 3)),
        rng.uniform(-3.0, 3.0, size=m),
        rng.normal(0.0, 2.0, size=(m, 2)),
    ])
    return GroundTruthSet(boxes, rng.integers(0, 3, size=m))


@pytest.fixture
def cfg():
    return LossConfig()


@pytest.mark.unit
class TestHungarianMatch:

    def test_matches_brute_force_optimum(self):
        rng = np.random.default_rng(99)
        for _ in range(1000):
            n = int(rng.integers(1, 8))
            m = int(rng.integers(0, n + 1))
            cost = rng.integers(0, 50, size=(n, m)).astype(np.float64)
            rows, cols = hungarian_match(cost)
            assert len(rows) == m
            assert len(set(rows.tolist())) == m
            assert sorted(cols.tolist()) == list(range(m))
            if m:
                assert assignment_cost(cost, rows, cols) == brute_force_cost(cost)

    @pytest.mark.parametrize("n", [2, 3, 5])
    def test_tie_goes_to_first_query(self, n):
        rows, cols = hungarian_match(np.zeros((n, 1)))
        assert rows.tolist() == [0] and cols.tolist() == [0]

    def test_ties_prefer_low_query_indices(self):
        rows, _ = hungarian_match(np.zeros((3, 2)))
        assert rows.tolist() == [0, 1]
        rows, cols = hungarian_match(np.array([[1.0], [0.0], [0.0]]))
        assert rows.tolist() == [1] and cols.tolist() == [0]

    def test_cheaper_late_query_still_wins(self):
        rows, cols = hungarian_match(np.array([[5.0, 5.0], [5.0, 5.0], [0.0, 1.0], [1.0, 0.0]]))
        assert rows.tolist() == [2, 3] and cols.tolist() == [0, 1]

    @given(st.integers(0, 10_000))
    @settings(max_examples=200, deadline=None)
    def test_tie_break_matches_brute_force(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(1, 7))
        m = int(rng.integers(1, n + 1))
        cost = rng.integers(0, 3, size=(n, m)).astype(np.float64)
        rows, _ = hungarian_match(cost)
        assert rows.tolist() == lowest_optimal_queries(cost)

    def test_rejects_fewer_queries_than_objects(self):
        with pytest.raises(ContractError):
            hungarian_match(np.zeros((2, 3)))

    def test_rejects_non_finite_cost(self):
        cost = np.zeros((3, 2))
        cost[1, 1] = np.nan
        with pytest.raises(ContractError):
            hungarian_match(cost)

    def test_rejects_non_matrix(self):
        with pytest.raises(ContractError):
            hungarian_match(np.zeros(4))

    def test_no_objects(self):
        rows, cols = hungarian_match(np.zeros((5, 0)))
        assert rows.size == cols.size == 0


@pytest.mark.unit
class TestFocalLoss:

    def test_reduces_to_scaled_cross_entropy(self):
        rng = np.random.default_rng(1)
        logits = rng.normal(size=(6, 3))
        targets = (rng.uniform(size=(6, 3)) > 0.7).astype(float)
        p = 1.0 / (1.0 + np.exp(-logits))
        bce = -(targets * np.log(p) + (1 - targets) * np.log(1 - p)).sum()
        value = focal_loss(Tensor(logits), targets, alpha=0.5, gamma=0.0).item()
        assert value == pytest.approx(0.5 * bce, rel=1e-10)

    def test_positive_only_with_alpha_one(self):
        logits = np.array([[0.3, -1.2]])
        targets = np.array([[1.0, 0.0]])
        value = focal_loss(Tensor(logits), targets, alpha=1.0, gamma=0.0).item()
        assert value == pytest.approx(math.log1p(math.exp(-0.3)), rel=1e-12)

    def test_focusing_downweights_easy_examples(self):
        easy = focal_loss(Tensor(np.array([[4.0]])), np.array([[1.0]]), alpha=0.25, gamma=2.0).item()
        hard = focal_loss(Tensor(np.array([[-4.0]])), np.array([[1.0]]), alpha=0.25, gamma=2.0).item()
        assert easy < 1e-3 * hard

    def test_normalizer_divides(self):
        logits, targets = Tensor(np.array([[0.1, 0.2]])), np.array([[1.0, 0.0]])
        once = focal_loss(logits, targets).item()
        assert focal_loss(logits, targets, normalizer=4).item() == pytest.approx(once / 4)
        # normalizers below one are treated as one
        assert focal_loss(logits, targets, normalizer=0).item() == pytest.approx(once)

    def test_gradient(self):
        rng = np.random.default_rng(2)
        logits = Tensor(rng.normal(size=(5, 3)), requires_grad=True)
        targets = (rng.uniform(size=(5, 3)) > 0.6).astype(float)
        assert grad_check(lambda t: focal_loss(t, targets, 0.25, 2.0, 3), logits) < 1e-5

    def test_stable_for_extreme_logits(self):
        value = focal_loss(Tensor(np.array([[80.0, -80.0]])), np.array([[0.0, 1.0]])).item()
        assert np.isfinite(value) and value > 0

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            focal_loss(Tensor(np.zeros((2, 3))), np.zeros((3, 2)))


@pytest.mark.unit
class TestBoxLoss:

    def test_weighted_mean_absolute_error(self):
        pred = Tensor(np.zeros((2, BOX_PARAMS)))
        target = np.ones((2, BOX_PARAMS))
        weights = [2.0] + [0.0] * 9
        assert l1_box_loss(pred, target).item() == pytest.approx(1.0)
        assert l1_box_loss(pred, target, weights).item() == pytest.approx(2.0 * 2 / (BOX_PARAMS * 2))

    def test_encode_boxes(self):
        boxes = np.array([[1.0, 2.0, 0.5, 2.0, 4.0, 1.5, math.pi / 2, 3.0, -1.0]])
        enc = encode_boxes(boxes)[0]
        np.testing.assert_allclose(enc, [1.0, 2.0, 0.5, math.log(2.0), math.log(4.0), math.log(1.5),
                                         1.0, 0.0, 3.0, -1.0], atol=1e-15)

    def test_head_decode_inverts_encoding(self):
        wr = WorldRange()
        refs = Tensor(np.array([[0.5, 0.5, 0.5]]))
        box = np.array([[3.0, -2.0, 0.1, 1.8, 4.5, 1.6, -2.0, 4.0, 0.5]])
        enc = encode_boxes(box)[0]
        center_offset = enc[:3] - (refs.data[0] * wr.span + wr.lower)
        params = np.concatenate([center_offset, enc[3:]])[None, :]
        decoded = BoxPrediction(Tensor(np.zeros((1, 3))), Tensor(params), refs, wr).decode()
        np.testing.assert_allclose(decoded, box, atol=1e-12)

    def test_head_prior_bias(self):
        head = DetectionHead(8, 3, np.random.default_rng(0))
        pred = predict(Tensor(np.zeros((4, 8))), Tensor(np.full((4, 3), 0.5)), head, WorldRange())
        np.testing.assert_allclose(pred.scores(), PRIOR_PROBABILITY)
        assert pred.box_params.shape == (4, BOX_PARAMS)


@pytest.mark.unit
class TestSetLoss:

    @pytest.fixture
    def head(self):
        return DetectionHead(8, 3, np.random.default_rng(4))

    def predictions(self, head, rng, n=6, layers=3):
        preds = []
        for _ in range(layers):
            feats = Tensor(rng.normal(size=(n, 8)))
            refs = Tensor(rng.uniform(size=(n, 3)))
            preds.append(head(feats, refs, WorldRange()))
        return preds

    def test_one_term_per_layer(self, head, cfg):
        rng = np.random.default_rng(5)
        gt = make_gt(rng, 3)
        breakdown = total_loss(self.predictions(head, rng), gt, cfg)
        assert [layer.layer for layer in breakdown.layers] == [1, 2, 3]
        expected = sum(layer.weighted_cls + layer.weighted_reg for layer in breakdown.layers)
        assert breakdown.value == pytest.approx(expected)
        assert breakdown.cls_component + breakdown.reg_component == pytest.approx(expected)
        for layer in breakdown.layers:
            assert len(layer.matches) == 3
            assert len({q for q, _ in layer.matches}) == 3
            assert layer.weighted_cls == pytest.approx(cfg.cls_weight * layer.cls)

    def test_matching_uses_the_configured_cost(self, head, cfg):
        rng = np.random.default_rng(6)
        gt = make_gt(rng, 2)
        pred = self.predictions(head, rng, layers=1)[0]
        cost = match_cost(pred, gt, cfg)
        _, _, matches = layer_loss(pred, gt, cfg)
        rows = np.array([q for q, _ in matches])
        cols = np.array([o for _, o in matches])
        assert assignment_cost(cost, rows, cols) == pytest.approx(brute_force_cost(cost))

    def test_empty_scene_is_pure_background(self, head, cfg):
        rng = np.random.default_rng(7)
        breakdown = total_loss(self.predictions(head, rng), GroundTruthSet.empty(), cfg)
        assert breakdown.reg_component == 0.0
        assert breakdown.cls_component > 0.0
        assert all(layer.matches == [] for layer in breakdown.layers)

    def test_no_layers_rejected(self, cfg):
        with pytest.raises(ContractError):
            total_loss([], GroundTruthSet.empty(), cfg)

    @pytest.mark.parametrize("target", ["reg", "cls", "features", "refs"])
    def test_full_loss_gradient(self, cfg, target):
        rng = np.random.default_rng(8)
        head = DetectionHead(8, 3, rng)
        feats = Tensor(rng.normal(size=(2, 8)), requires_grad=True)
        refs = Tensor(rng.uniform(0.2, 0.8, size=(2, 3)), requires_grad=True)
        gt = make_gt(rng, 1)
        x = {
            "reg": head.reg_branch.head.weight,
            "cls": head.cls_branch.head.weight,
            "features": feats,
            "refs": refs,
        }[target]

        def loss(_):
            return total_loss([head(feats, refs, WorldRange())], gt, cfg).total

        assert grad_check(loss, x) < 1e-4

    @given(st.integers(min_value=0, max_value=2**32 - 1), st.integers(min_value=0, max_value=6))
    @settings(max_examples=30, deadline=None)
    def test_loss_is_finite_and_non_negative(self, seed, m):
        rng = np.random.default_rng(seed)
        head = DetectionHead(8, 3, rng)
        preds = [head(Tensor(rng.normal(size=(6, 8))), Tensor(rng.uniform(size=(6, 3))), WorldRange())]
        value = total_loss(preds, make_gt(rng, m), LossConfig()).value
        assert np.isfinite(value) and value >= 0.0

    def test_backward_reaches_every_head_parameter(self, head, cfg):
        rng = np.random.default_rng(9)
        breakdown = total_loss(self.predictions(head, rng), make_gt(rng, 2), cfg)
        head.zero_grad()
        T.backward(breakdown.total)
        for name, p in head.named_parameters():
            assert p.grad is not None, name
