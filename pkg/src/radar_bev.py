#!/usr/bin/env python3
"""
RCTrans Desk - Radar BEV Encoding

Turns radar returns into a dense bird's-eye-view feature map:

1. ``pillarize``: a per-point MLP over each return (its x, y replaced by the
   offset from its cell center), max-pooled into the grid cell it falls in.
2. ``RadarDenseEncoder``: three stride-2 conv blocks, self-attention over the
   coarsest map with a learned grid position table, then three upsampling
   stages that fuse same-resolution features by concat + 1x1 conv.

Grid rows follow world y and columns follow world x; cell (0, 0) has its
corner at (x_min, y_min).
"""

import logging
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np

from . import tensor as T
from .configuration import ConfigurationValidationError
from .models import RadarPoints, WorldRange
from .nn import FeedForward, LayerNorm, Linear, Module, MultiHeadAttention, Parameter, Conv2d
from .tensor import Tensor

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class BevGeometry:
    """Cell layout of a square BEV grid over the WorldRange xy box."""

    size: int
    world_range: WorldRange

    def __post_init__(self):
        if self.size < 8 or self.size % 8 != 0:
            raise ConfigurationValidationError(f"BEV grid size {self.size} must be a positive multiple of 8")

    @property
    def shape(self) -> Tuple[int, int]:
        return self.size, self.size

    @property
    def num_cells(self) -> int:
        return self.size * self.size

    @property
    def origin(self) -> np.ndarray:
        return np.array([self.world_range.x_min, self.world_range.y_min])

    @property
    def cell_size(self) -> np.ndarray:
        """(x, y) extent of one cell in meters."""
        return self.world_range.span[:2] / self.size

    def cell_index(self, xy: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """(row, col) of each xy point: floor((p - origin) / cell)."""
        xy = np.asarray(xy, dtype=np.float64)
        cols = np.floor((xy[..., 0] - self.origin[0]) / self.cell_size[0]).astype(np.int64)
        rows = np.floor((xy[..., 1] - self.origin[1]) / self.cell_size[1]).astype(np.int64)
        return rows, cols

    def cell_centers(self, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
        x = self.origin[0] + (np.asarray(cols) + 0.5) * self.cell_size[0]
        y = self.origin[1] + (np.asarray(rows) + 0.5) * self.cell_size[1]
        return np.stack([x, y], axis=-1)

    def normalized_centers(self) -> np.ndarray:
        """Normalized (x, y) of every cell center, row-major, shape [cells, 2]."""
        rows, cols = np.meshgrid(np.arange(self.size), np.arange(self.size), indexing="ij")
        x = (cols.reshape(-1) + 0.5) / self.size
        y = (rows.reshape(-1) + 0.5) / self.size
        return np.stack([x, y], axis=-1)


@dataclass
class BevGrid:
    """Dense BEV features [H, W, C] plus the mask of cells that received a point."""

    geometry: BevGeometry
    features: Tensor
    occupied: np.ndarray

    @property
    def empty_fraction(self) -> float:
        return 1.0 - float(self.occupied.mean())

    @property
    def channels(self) -> int:
        return self.features.shape[-1]


class PillarFeatureNet(Module):
    """Per-point Linear + relu; rows are reduced independently so results do not depend on point order."""

    def __init__(self, in_channels: int, out_channels: int, rng: np.random.Generator):
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.linear = Linear(in_channels, out_channels, rng, exact=True)

    def forward(self, x: Tensor) -> Tensor:
        return T.relu(self.linear(x))


def point_features(points: np.ndarray, geometry: BevGeometry) -> Tuple[np.ndarray, np.ndarray]:
    """Keep in-range non-padding rows; return (features, flat cell index).

    x and y are replaced by the offset from the cell center, so identical
    returns in different cells produce identical features.
    """
    points = np.asarray(points, dtype=np.float64)
    keep = np.any(points != 0.0, axis=1) & geometry.world_range.contains_xy(points[:, :2])
    kept = points[keep]
    rows, cols = geometry.cell_index(kept[:, :2])
    # contains_xy is half-open, but floor can still land on size for values just below the max
    rows = np.clip(rows, 0, geometry.size - 1)
    cols = np.clip(cols, 0, geometry.size - 1)
    offsets = kept[:, :2] - geometry.cell_centers(rows, cols)
    feats = np.concatenate([offsets, kept[:, 2:]], axis=1)
    return feats, rows * geometry.size + cols


def pillarize(points: RadarPoints, geometry: BevGeometry, net: PillarFeatureNet) -> BevGrid:
    """Scatter per-point MLP features into the grid with a per-cell max."""
    if points.channels != net.in_channels:
        raise ConfigurationValidationError(
            f"radar points have {points.channels} channels, pillar net expects {net.in_channels}"
        )
    feats, flat = point_features(points.data, geometry)
    occupied = np.zeros(geometry.num_cells, dtype=bool)
    if feats.shape[0] == 0:
        features = T.zeros((geometry.size, geometry.size, net.out_channels))
        return BevGrid(geometry, features, occupied.reshape(geometry.shape))

    occupied[flat] = True
    pooled = T.scatter_max(net(Tensor(feats)), flat, geometry.num_cells)
    features = pooled.reshape(geometry.size, geometry.size, net.out_channels)
    return BevGrid(geometry, features, occupied.reshape(geometry.shape))


class DownBlock(Module):
    def __init__(self, in_channels: int, out_channels: int, rng: np.random.Generator):
        self.conv = Conv2d(in_channels, out_channels, 3, rng, stride=2)
        self.norm = LayerNorm(out_channels)

    def forward(self, x: Tensor) -> Tensor:
        return T.relu(self.norm(self.conv(x)))


class UpBlock(Module):
    """Nearest 2x upsample, optional concat with the skip map, 1x1 conv."""

    def __init__(self, in_channels: int, skip_channels: int, out_channels: int,
                 rng: np.random.Generator, activation: bool = True):
        self.fuse = Linear(in_channels + skip_channels, out_channels, rng)
        self.skip_channels = skip_channels
        self.activation = activation

    def forward(self, x: Tensor, skip: Optional[Tensor]) -> Tensor:
        up = T.upsample2x(x)
        if self.skip_channels:
            up = T.concat([up, skip], axis=-1)
        out = self.fuse(up)
        return T.relu(out) if self.activation else out


class GridAttentionLayer(Module):
    def __init__(self, dims: int, heads: int, rng: np.random.Generator):
        self.attn = MultiHeadAttention(dims, heads, rng)
        self.norm1 = LayerNorm(dims)
        self.ffn = FeedForward(dims, 2 * dims, rng)
        self.norm2 = LayerNorm(dims)

    def forward(self, x: Tensor) -> Tensor:
        x = self.norm1(x + self.attn(x, x, x))
        return self.norm2(x + self.ffn(x))


class RadarDenseEncoder(Module):
    """
    Downsample-then-upsample encoder that spreads sparse pillar features over
    the whole grid.

    Widths: B1 = 2C, B2 = 4C, B3 = 4C for input width C; the output has
    ``out_channels`` channels at the input resolution.
    """

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        grid_size: int,
        rng: np.random.Generator,
        attention_layers: int = 2,
        attention_heads: int = 4,
        use_skip: bool = True,
        use_attention: bool = True,
    ):
        if grid_size % 8 != 0:
            raise ConfigurationValidationError(f"RDE grid size {grid_size} must be divisible by 8")
        c = in_channels
        self.grid_size = grid_size
        self.use_skip = use_skip
        self.use_attention = use_attention and attention_layers > 0
        self.down = [DownBlock(c, 2 * c, rng), DownBlock(2 * c, 4 * c, rng), DownBlock(4 * c, 4 * c, rng)]

        coarse = grid_size // 8
        self.attention = []
        self.grid_pos = None
        if self.use_attention:
            self.grid_pos = Parameter(rng.normal(0.0, 0.02, size=(coarse * coarse, 4 * c)))
            self.attention = [GridAttentionLayer(4 * c, attention_heads, rng) for _ in range(attention_layers)]

        skip = (lambda width: width) if use_skip else (lambda width: 0)
        self.up = [
            UpBlock(4 * c, skip(4 * c), 4 * c, rng),
            UpBlock(4 * c, skip(2 * c), 2 * c, rng),
            UpBlock(2 * c, skip(c), out_channels, rng, activation=False),
        ]

    def forward(self, grid: Tensor) -> Tensor:
        h, w = grid.shape[0], grid.shape[1]
        if h != self.grid_size or w != self.grid_size:
            raise ConfigurationValidationError(
                f"RDE built for {self.grid_size}x{self.grid_size} grids, got {h}x{w}"
            )
        b1 = self.down[0](grid)
        b2 = self.down[1](b1)
        b3 = self.down[2](b2)

        fused = b3
        if self.use_attention:
            ch, cw, cc = b3.shape
            tokens = b3.reshape(ch * cw, cc) + self.grid_pos
            for layer in self.attention:
                tokens = layer(tokens)
            fused = tokens.reshape(ch, cw, cc)

        x = self.up[0](fused, b2)
        x = self.up[1](x, b1)
        return self.up[2](x, grid)

    def intermediate_shapes(self, grid: Tensor) -> List[Tuple[int, ...]]:
        """Shapes of B1, B2, B3 for ``grid``."""
        shapes = []
        x = grid
        with T.no_grad():
            for block in self.down:
                x = block(x)
                shapes.append(x.shape)
        return shapes


def rde_forward(grid: BevGrid, encoder: RadarDenseEncoder) -> BevGrid:
    """Densify a pillar grid; the occupancy mask is carried through unchanged."""
    return BevGrid(grid.geometry, encoder(grid.features), grid.occupied)


def sparsity_stats(points: np.ndarray, geometry: BevGeometry) -> dict:
    """Occupied-cell statistics of a point set on ``geometry`` (no features computed)."""
    _, flat = point_features(points, geometry)
    occupied = np.unique(flat).size
    return {
        "grid_size": geometry.size,
        "points": int(flat.size),
        "occupied_cells": int(occupied),
        "empty_fraction": 1.0 - occupied / geometry.num_cells,
    }
