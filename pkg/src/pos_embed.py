#!/usr/bin/env python3
"""
RCTrans Desk - Position Embeddings

Four embeddings share two encoders:

- image tokens:  Phi_im(world points along the token's camera ray, normalized)
- radar tokens:  Phi_ra(sincos(normalized BEV cell center))
- query PE_3d:   Phi_im(query reference tiled d times)
- query PE_2d:   Phi_ra(sincos(query reference x, y))

Token and query paths call the same encoder instances, so an identical
encoder input yields an identical embedding.
"""

import logging
import math
from typing import Dict, Tuple

import numpy as np

from . import tensor as T
from .geometry import feature_pixel_centers, frustum_points, frustum_to_world, normalize_refs
from .models import CameraCalib, DepthBins, WorldRange
from .nn import MLP, Module
from .radar_bev import BevGeometry
from .tensor import Tensor

logger = logging.getLogger(__name__)


class SinCosEncoder:
    """
    Sine-cosine encoding of normalized coordinates.

    For coordinate x and frequency k in [0, num_freqs):
        angle_k = x * scale * base ** (-k / num_freqs)
    Each axis contributes [sin(angle_0..), cos(angle_0..)]; axes are
    concatenated in input order, so a 2-D input gives 4 * num_freqs values.
    """

    def __init__(self, num_freqs: int, base: float = 10000.0, scale: float = 2.0 * math.pi):
        if num_freqs < 1:
            raise ValueError("num_freqs must be at least 1")
        self.num_freqs = num_freqs
        self.base = base
        self.scale = scale
        self.freqs = scale * np.power(base, -np.arange(num_freqs) / num_freqs)

    def output_dims(self, axes: int = 2) -> int:
        return 2 * self.num_freqs * axes

    def __call__(self, coords) -> Tensor:
        coords = T.as_tensor(coords)
        parts = []
        for axis in range(coords.shape[-1]):
            value = coords[..., axis : axis + 1]
            angles = value * self.freqs
            parts.extend([T.sin(angles), T.cos(angles)])
        return T.concat(parts, axis=-1)


class SharedPeEncoders(Module):
    """Phi_im and Phi_ra, each a 2-layer MLP (hidden = hidden_ratio * D, relu)."""

    def __init__(self, embed_dims: int, depth_count: int, num_freqs: int,
                 rng: np.random.Generator, hidden_ratio: int = 4):
        self.depth_count = depth_count
        self.sincos = SinCosEncoder(num_freqs)
        hidden = hidden_ratio * embed_dims
        self.image_encoder = MLP([3 * depth_count, hidden, embed_dims], rng)
        self.radar_encoder = MLP([self.sincos.output_dims(2), hidden, embed_dims], rng)

    def encode_image(self, coords: Tensor) -> Tensor:
        return self.image_encoder(coords)

    def encode_bev(self, xy: Tensor) -> Tensor:
        return self.radar_encoder(self.sincos(xy))


_COORD_CACHE: Dict[Tuple[bytes, bytes, bytes], np.ndarray] = {}


def image_token_coords(calib: CameraCalib, bins: DepthBins, world_range: WorldRange) -> np.ndarray:
    """
    Normalized world points along every feature-cell ray, [tokens, 3 * d]
    laid out as x1, y1, z1, x2, ... Cached per calibration.
    """
    key = (calib.key(), bins.as_array().tobytes(), world_range.lower.tobytes() + world_range.upper.tobytes())
    cached = _COORD_CACHE.get(key)
    if cached is None:
        u, v = feature_pixel_centers(calib)
        world = frustum_to_world(calib, frustum_points(u, v, bins))
        cached = normalize_refs(world, world_range).reshape(u.shape[0], 3 * bins.count)
        cached.setflags(write=False)
        _COORD_CACHE[key] = cached
    return cached


def clear_cache() -> None:
    _COORD_CACHE.clear()


def image_token_pe(calib: CameraCalib, bins: DepthBins, world_range: WorldRange, enc: SharedPeEncoders) -> Tensor:
    if bins.count != enc.depth_count:
        raise ValueError(f"encoder built for {enc.depth_count} depth bins, got {bins.count}")
    return enc.encode_image(Tensor(image_token_coords(calib, bins, world_range)))


def radar_token_pe(geometry: BevGeometry, enc: SharedPeEncoders) -> Tensor:
    return enc.encode_bev(Tensor(geometry.normalized_centers()))


def query_pe(refs: Tensor, enc: SharedPeEncoders) -> Tuple[Tensor, Tensor]:
    """(PE_2d, PE_3d) for normalized references [n, 3]; PE_2d ignores z."""
    refs = T.as_tensor(refs)
    pe_2d = enc.encode_bev(refs[:, 0:2])
    pe_3d = enc.encode_image(T.tile_last(refs, enc.depth_count))
    return pe_2d, pe_3d
