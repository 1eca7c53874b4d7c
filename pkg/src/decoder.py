#!/usr/bin/env python3
"""
RCTrans Desk - Pruning Sequential Decoder

Object queries start from zero features and uniformly sampled reference
points. Every decoder layer fuses radar tokens first and image tokens second,
then nudges the reference points by a predicted offset. Training runs every
layer; inference runs only the first ``inference_layers`` (the layer outputs
form a pure prefix, so truncation changes nothing upstream).

Position embeddings are added to attention queries (and self-attention keys)
only; the residual stream carries content.
"""

import logging
from dataclasses import dataclass
from typing import Dict, List, Optional

import numpy as np
from scipy.spatial.distance import pdist

from . import tensor as T
from .configuration import ConfigurationValidationError
from .models import WorldRange
from .nn import FeedForward, LayerNorm, Linear, Module, MultiHeadAttention, Parameter
from .pos_embed import SharedPeEncoders, query_pe
from .tensor import ContractError, Tensor

logger = logging.getLogger(__name__)

MODES = ("train", "infer")


@dataclass
class QueryState:
    """Query features F_q [n, D], normalized references [n, 3] and the number of layers applied."""

    features: Tensor
    refs: Tensor
    layer_index: int = 0

    @property
    def num_queries(self) -> int:
        return self.features.shape[0]


class QueryEmbedding(Module):
    """Learnable reference points, uniform on [0, 1]^3 at initialization."""

    def __init__(self, num_queries: int, seed: int):
        if num_queries < 1:
            raise ContractError(f"need at least one query, got {num_queries}")
        rng = np.random.default_rng(seed)
        self.reference_points = Parameter(rng.uniform(0.0, 1.0, size=(num_queries, 3)))

    def initial_state(self, embed_dims: int) -> QueryState:
        n = self.reference_points.shape[0]
        return QueryState(T.zeros((n, embed_dims)), self.reference_points, 0)


def init_queries(n: int, seed: int, embed_dims: int = 64) -> QueryState:
    return QueryEmbedding(n, seed).initial_state(embed_dims)


class DecoderLayer(Module):
    """
    One layer of sequential fusion.

    sequential: self-attn -> radar cross-attn -> FFN -> image cross-attn -> FFN
    joint:      self-attn -> cross-attn over radar and image tokens together -> FFN

    Every sub-block is residual and ends in layer-norm.
    """

    def __init__(
        self,
        dims: int,
        heads: int,
        ffn_hidden: int,
        rng: np.random.Generator,
        fusion: str = "sequential",
        update_positions: bool = True,
    ):
        if fusion not in ("sequential", "joint"):
            raise ConfigurationValidationError(f"unknown fusion {fusion!r}")
        self.dims = dims
        self.fusion = fusion
        self.update_positions = update_positions

        self.self_attn = MultiHeadAttention(dims, heads, rng)
        self.norm1 = LayerNorm(dims)
        if fusion == "sequential":
            self.radar_attn = MultiHeadAttention(dims, heads, rng)
            self.norm2 = LayerNorm(dims)
            self.ffn1 = FeedForward(dims, ffn_hidden, rng)
            self.norm3 = LayerNorm(dims)
            self.image_attn = MultiHeadAttention(dims, heads, rng)
            self.norm4 = LayerNorm(dims)
            self.ffn2 = FeedForward(dims, ffn_hidden, rng)
            self.norm5 = LayerNorm(dims)
        else:
            self.cross_attn = MultiHeadAttention(dims, heads, rng)
            self.norm2 = LayerNorm(dims)
            self.ffn1 = FeedForward(dims, ffn_hidden, rng)
            self.norm3 = LayerNorm(dims)
        self.offset_head = Linear(dims, 3, rng)

    def _check_tokens(self, name: str, tokens: Optional[Tensor]) -> None:
        if tokens is not None and (tokens.ndim != 2 or tokens.shape[1] != self.dims):
            raise ConfigurationValidationError(
                f"{name} tokens have width {tokens.shape[-1]}, queries have {self.dims}"
            )

    def forward(
        self,
        state: QueryState,
        radar_tokens: Optional[Tensor],
        image_tokens: Optional[Tensor],
        enc: SharedPeEncoders,
    ) -> QueryState:
        self._check_tokens("radar", radar_tokens)
        self._check_tokens("image", image_tokens)
        if state.features.shape[1] != self.dims:
            raise ConfigurationValidationError(
                f"query features have width {state.features.shape[1]}, layer expects {self.dims}"
            )

        pe_2d, pe_3d = query_pe(state.refs, enc)
        f = state.features
        q = f + pe_2d
        f = self.norm1(f + self.self_attn(q, q, f))

        if self.fusion == "sequential":
            if radar_tokens is not None:
                f = self.norm2(f + self.radar_attn(f + pe_2d, radar_tokens, radar_tokens))
            f = self.norm3(f + self.ffn1(f))
            if image_tokens is not None:
                f = self.norm4(f + self.image_attn(f + pe_3d, image_tokens, image_tokens))
            f = self.norm5(f + self.ffn2(f))
        else:
            tokens = [t for t in (radar_tokens, image_tokens) if t is not None]
            if tokens:
                memory = T.concat(tokens, axis=0) if len(tokens) > 1 else tokens[0]
                f = self.norm2(f + self.cross_attn(f + pe_2d + pe_3d, memory, memory))
            f = self.norm3(f + self.ffn1(f))

        refs = state.refs
        if self.update_positions:
            refs = T.clamp(refs + self.offset_head(f), 0.0, 1.0)
        return QueryState(f, refs, state.layer_index + 1)


class DecoderStack(Module):
    def __init__(self, layers: List[DecoderLayer], inference_layers: int):
        if not 1 <= inference_layers <= len(layers):
            raise ConfigurationValidationError(
                f"inference_layers {inference_layers} must lie in [1, {len(layers)}]"
            )
        self.layers = list(layers)
        self.inference_layers = inference_layers

    @property
    def num_layers(self) -> int:
        return len(self.layers)

    def run_stack(
        self,
        state: QueryState,
        radar_tokens: Optional[Tensor],
        image_tokens: Optional[Tensor],
        enc: SharedPeEncoders,
        mode: str = "train",
        depth: Optional[int] = None,
    ) -> List[QueryState]:
        """
        Apply the layers in order and return the state after each executed
        layer. ``train`` executes every layer; ``infer`` stops after
        ``inference_layers`` (or ``depth`` when given), so its last entry is
        the pruned output.
        """
        if mode not in MODES:
            raise ContractError(f"mode must be one of {MODES}, got {mode!r}")
        if mode == "train":
            depth = self.num_layers
        elif depth is None:
            depth = self.inference_layers
        elif not 1 <= depth <= self.num_layers:
            raise ContractError(f"depth {depth} outside [1, {self.num_layers}]")
        states = []
        for layer in self.layers[:depth]:
            state = layer(state, radar_tokens, image_tokens, enc)
            states.append(state)
        return states


def run_stack(state, radar_tokens, image_tokens, stack: DecoderStack, enc: SharedPeEncoders,
              mode: str = "train") -> List[QueryState]:
    return stack.run_stack(state, radar_tokens, image_tokens, enc, mode)


def query_spread(states: List[QueryState], world_range: WorldRange) -> List[Dict[str, float]]:
    """Mean and minimum pairwise BEV distance (m) between reference points, per layer."""
    report = []
    span = world_range.span[:2]
    for state in states:
        xy = state.refs.data[:, :2] * span
        if xy.shape[0] < 2:
            report.append({"layer": state.layer_index, "mean_distance": 0.0, "min_distance": 0.0})
            continue
        dists = pdist(xy)
        report.append({
            "layer": state.layer_index,
            "mean_distance": float(dists.mean()),
            "min_distance": float(dists.min()),
        })
    return report
