#!/usr/bin/env python3
"""
Tests for radar pillarization and the dense BEV encoder
"""

import pytest
import numpy as np
from hypothesis import given, strategies as st, settings

import sys
import os
sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..'))

from src import tensor as T
from src.configuration import ConfigurationValidationError
from src.models import RadarPoints, WorldRange
from src.radar_bev import (
    BevGeometry, PillarFeatureNet, RadarDenseEncoder, pillarize, point_features, rde_forward,
    sparsity_stats,
)
from src.tensor import Tensor


def random_points(rng: np.random.Generator, n: int) -> np.ndarray:
    points = np.zeros((n, 6))
    points[:, 0:2] = rng.uniform(-50.0, 50.0, size=(n, 2))
    points[:, 2] = rng.uniform(0.0, 2.0, size=n)
    points[:, 3:5] = rng.normal(0.0, 5.0, size=(n, 2))
    points[:, 5] = -rng.uniform(0.0, 0.3, size=n)
    return points


@pytest.fixture
def geometry():
    return BevGeometry(32, WorldRange())


@pytest.fixture
def pillar_net():
    return PillarFeatureNet(6, 8, np.random.default_rng(0))


@pytest.mark.unit
class TestBevGeometry:

    @pytest.mark.parametrize("size", [0, 4, 12, 30])
    def test_size_must_be_multiple_of_eight(self, size):
        with pytest.raises(ConfigurationValidationError):
            BevGeometry(size, WorldRange())

    def test_cell_index_origin_and_layout(self, geometry):
        rows, cols = geometry.cell_index(np.array([[-51.2, -51.2], [51.0, -51.0], [-51.0, 51.0]]))
        np.testing.assert_array_equal(rows, [0, 0, 31])
        np.testing.assert_array_equal(cols, [0, 31, 0])

    def test_cell_centers_are_inside_their_cells(self, geometry):
        rows, cols = np.meshgrid(np.arange(32), np.arange(32), indexing="ij")
        centers = geometry.cell_centers(rows.reshape(-1), cols.reshape(-1))
        back_rows, back_cols = geometry.cell_index(centers)
        np.testing.assert_array_equal(back_rows, rows.reshape(-1))
        np.testing.assert_array_equal(back_cols, cols.reshape(-1))

    def test_normalized_centers_row_major(self, geometry):
        centers = geometry.normalized_centers()
        assert centers.shape == (32 * 32, 2)
        np.testing.assert_allclose(centers[0], [0.5 / 32, 0.5 / 32])
        np.testing.assert_allclose(centers[1], [1.5 / 32, 0.5 / 32])
        np.testing.assert_allclose(centers[32], [0.5 / 32, 1.5 / 32])


@pytest.mark.unit
class TestPillarize:

    def test_no_radar_gives_all_zero_grid(self, geometry, pillar_net):
        grid = pillarize(RadarPoints.empty(), geometry, pillar_net)
        assert grid.features.shape == (32, 32, 8)
        assert not np.any(grid.features.data)
        assert grid.empty_fraction == 1.0

    def test_padding_and_out_of_range_rows_are_dropped(self, geometry, pillar_net):
        points = np.zeros((4, 6))
        points[1, :2] = [80.0, 0.0]
        points[2, :2] = [0.0, 51.2]
        grid = pillarize(RadarPoints(points), geometry, pillar_net)
        assert not np.any(grid.features.data)
        assert not grid.occupied.any()

    def test_only_occupied_cells_carry_features(self, geometry, pillar_net):
        points = random_points(np.random.default_rng(1), 40)
        grid = pillarize(RadarPoints(points), geometry, pillar_net)
        assert not np.any(grid.features.data[~grid.occupied])
        rows, cols = geometry.cell_index(points[:, :2])
        assert grid.occupied[rows, cols].all()

    @given(st.integers(min_value=0, max_value=2**32 - 1), st.integers(min_value=1, max_value=120))
    @settings(max_examples=50, deadline=None)
    def test_point_order_does_not_matter(self, seed, n):
        rng = np.random.default_rng(seed)
        geometry = BevGeometry(32, WorldRange())
        net = PillarFeatureNet(6, 8, np.random.default_rng(0))
        points = random_points(rng, n)
        shuffled = points[rng.permutation(n)]
        a = pillarize(RadarPoints(points), geometry, net).features.data
        b = pillarize(RadarPoints(shuffled), geometry, net).features.data
        np.testing.assert_array_equal(a, b)

    def test_cell_max_pooling(self, geometry, pillar_net):
        rng = np.random.default_rng(3)
        points = random_points(rng, 3)
        points[:, :2] = [[10.1, 10.1], [10.3, 10.2], [10.2, 10.4]]
        feats, flat = point_features(points, geometry)
        assert len(set(flat.tolist())) == 1
        per_point = pillar_net(Tensor(feats)).data
        grid = pillarize(RadarPoints(points), geometry, pillar_net)
        row, col = divmod(int(flat[0]), 32)
        np.testing.assert_array_equal(grid.features.data[row, col], per_point.max(axis=0))

    def test_features_use_cell_center_offsets(self, geometry):
        points = np.zeros((2, 6))
        points[:, 2:] = [0.5, 1.0, -1.0, -0.1]
        points[0, :2] = geometry.cell_centers(np.array([3]), np.array([4]))[0] + [0.2, -0.3]
        points[1, :2] = geometry.cell_centers(np.array([20]), np.array([9]))[0] + [0.2, -0.3]
        feats, _ = point_features(points, geometry)
        np.testing.assert_allclose(feats[0], feats[1], atol=1e-12)
        np.testing.assert_allclose(feats[0, :2], [0.2, -0.3], atol=1e-12)

    def test_channel_mismatch_rejected(self, geometry, pillar_net):
        with pytest.raises(ConfigurationValidationError):
            pillarize(RadarPoints(np.ones((2, 5))), geometry, pillar_net)

    def test_sparsity_stats(self, geometry):
        points = np.zeros((3, 6))
        points[:, :2] = [[0.1, 0.1], [0.2, 0.2], [30.0, -20.0]]
        stats = sparsity_stats(points, geometry)
        assert stats["points"] == 3
        assert stats["occupied_cells"] == 2
        assert stats["empty_fraction"] == pytest.approx(1.0 - 2 / 1024)


@pytest.mark.unit
class TestRadarDenseEncoder:

    def test_intermediate_and_output_shapes(self):
        rde = RadarDenseEncoder(16, 64, 32, np.random.default_rng(0))
        grid = Tensor(np.random.default_rng(1).normal(size=(32, 32, 16)))
        assert rde.intermediate_shapes(grid) == [(16, 16, 32), (8, 8, 64), (4, 4, 64)]
        assert rde(grid).shape == (32, 32, 64)

    def test_rejects_wrong_grid_size(self):
        rde = RadarDenseEncoder(4, 8, 16, np.random.default_rng(0))
        with pytest.raises(ConfigurationValidationError):
            rde(Tensor(np.zeros((32, 32, 4))))
        with pytest.raises(ConfigurationValidationError):
            RadarDenseEncoder(4, 8, 20, np.random.default_rng(0))

    def test_every_output_cell_sees_a_far_input_cell(self):
        """A single occupied corner cell must reach every part of the dense output."""
        for seed in range(10):
            rng = np.random.default_rng(seed)
            rde = RadarDenseEncoder(4, 8, 16, rng, attention_layers=1, attention_heads=2)
            grid = Tensor(rng.normal(size=(16, 16, 4)), requires_grad=True)
            for row, col in [(15, 15), (8, 3), (0, 12)]:
                grid.zero_grad()
                out = rde(grid)
                weights = Tensor(rng.uniform(0.5, 1.5, size=8))
                T.backward((out[row, col] * weights).sum())
                assert np.abs(grid.grad[0, 0]).sum() > 0.0

    def test_ablation_flags_change_the_parameter_set(self):
        full = RadarDenseEncoder(4, 8, 16, np.random.default_rng(0))
        no_skip = RadarDenseEncoder(4, 8, 16, np.random.default_rng(0), use_skip=False)
        no_attn = RadarDenseEncoder(4, 8, 16, np.random.default_rng(0), use_attention=False)
        assert no_skip.num_parameters() < full.num_parameters()
        assert no_attn.num_parameters() < full.num_parameters()
        assert no_attn.grid_pos is None and not no_attn.attention
        grid = Tensor(np.random.default_rng(2).normal(size=(16, 16, 4)))
        assert no_skip(grid).shape == no_attn(grid).shape == (16, 16, 8)

    def test_rde_forward_keeps_occupancy(self, geometry, pillar_net):
        points = random_points(np.random.default_rng(5), 30)
        grid = pillarize(RadarPoints(points), geometry, pillar_net)
        rde = RadarDenseEncoder(8, 16, 32, np.random.default_rng(0))
        dense = rde_forward(grid, rde)
        assert dense.features.shape == (32, 32, 16)
        np.testing.assert_array_equal(dense.occupied, grid.occupied)
        assert np.count_nonzero(np.abs(dense.features.data).sum(axis=-1)) > grid.occupied.sum()
