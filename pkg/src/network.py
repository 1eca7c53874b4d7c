#!/usr/bin/env python3
"""
RCTrans Desk - Detector Assembly

RCTransNet wires the token generators, position embeddings, decoder and head
together and turns the last decoder state into scored detections.
"""

import logging
from dataclasses import dataclass
from typing import List, Optional

import numpy as np

from . import tensor as T
from .backbone import ImageBackbone
from .configuration import ConfigurationValidationError, RunConfig
from .decoder import DecoderLayer, DecoderStack, QueryEmbedding, QueryState
from .head import BoxPrediction, DetectionHead
from .models import Detection, Scene
from .nn import Linear, Module
from .pos_embed import SharedPeEncoders, image_token_pe, radar_token_pe
from .radar_bev import BevGeometry, BevGrid, PillarFeatureNet, RadarDenseEncoder, pillarize, rde_forward
from .tensor import Tensor

logger = logging.getLogger(__name__)


@dataclass
class NetworkOutput:
    states: List[QueryState]
    predictions: List[BoxPrediction]
    bev: Optional[BevGrid] = None

    @property
    def final(self) -> BoxPrediction:
        return self.predictions[-1]


class RCTransNet(Module):
    """
    Radar-camera detector built from a RunConfig.

    All weights are drawn from one generator seeded with ``model_seed``; the
    query reference points use their own stream so they do not depend on the
    layer widths.
    """

    def __init__(self, config: RunConfig):
        self.config = config
        m = config.model
        d = m.embed_dims
        rng = np.random.default_rng(config.model_seed)
        self.geometry = BevGeometry(config.grid.size, config.world)
        self.bins = config.bins
        self.world_range = config.world

        self.backbone = ImageBackbone(m.backbone_channels, d, rng)
        self.pillar_net = PillarFeatureNet(m.radar_channels, m.pillar_channels, rng)
        if m.radar_encoder == "rde":
            self.radar_encoder = RadarDenseEncoder(
                m.pillar_channels,
                d,
                config.grid.size,
                rng,
                attention_layers=m.rde_attention_layers,
                attention_heads=m.rde_attention_heads,
                use_skip=m.rde_skip,
                use_attention=m.rde_attention,
            )
        else:
            self.radar_encoder = Linear(m.pillar_channels, d, rng)
        self.pe = SharedPeEncoders(d, self.bins.count, m.sincos_freqs, rng, hidden_ratio=m.pe_hidden_ratio)
        self.queries = QueryEmbedding(m.num_queries, config.model_seed + 1)
        self.decoder = DecoderStack(
            [
                DecoderLayer(d, m.num_heads, m.ffn_ratio * d, rng, fusion=m.fusion, update_positions=m.update_positions)
                for _ in range(m.num_layers)
            ],
            m.inference_layers,
        )
        self.head = DetectionHead(d, m.num_classes, rng)

    # -- token generation -------------------------------------------------

    def radar_tokens(self, scene: Scene) -> Optional[tuple]:
        if self.config.model.modalities == "camera":
            return None
        grid = pillarize(scene.radar, self.geometry, self.pillar_net)
        if isinstance(self.radar_encoder, RadarDenseEncoder):
            dense = rde_forward(grid, self.radar_encoder)
        else:
            dense = BevGrid(grid.geometry, self.radar_encoder(grid.features), grid.occupied)
        h, w, d = dense.features.shape
        tokens = dense.features.reshape(h * w, d) + radar_token_pe(self.geometry, self.pe)
        return tokens, grid

    def image_tokens(self, scene: Scene) -> Optional[Tensor]:
        if self.config.model.modalities == "radar":
            return None
        per_camera = []
        feats = self.backbone.tokens(scene.images)
        for calib, tokens in zip(scene.calibrations, feats):
            feat_h, feat_w = calib.feature_size
            if tokens.shape[0] != feat_h * feat_w:
                raise ConfigurationValidationError(
                    f"backbone produced {tokens.shape[0]} tokens, calibration expects {feat_h}x{feat_w}"
                )
            per_camera.append(tokens + image_token_pe(calib, self.bins, self.world_range, self.pe))
        return T.concat(per_camera, axis=0) if len(per_camera) > 1 else per_camera[0]

    # -- forward ----------------------------------------------------------

    def forward(self, scene: Scene, mode: str = "train", layers: Optional[int] = None) -> NetworkOutput:
        radar = self.radar_tokens(scene)
        radar_tokens, bev = radar if radar is not None else (None, None)
        image_tokens = self.image_tokens(scene)
        state = self.queries.initial_state(self.config.model.embed_dims)
        states = self.decoder.run_stack(state, radar_tokens, image_tokens, self.pe, mode, depth=layers)
        predictions = [self.head(s.features, s.refs, self.world_range) for s in states]
        return NetworkOutput(states, predictions, bev)

    def detect(self, scene: Scene, layers: Optional[int] = None) -> List[Detection]:
        """Inference: run the pruned stack (or the first ``layers`` layers) and post-process."""
        with T.no_grad():
            output = self.forward(scene, mode="infer", layers=layers)
        ev = self.config.evaluation
        return postprocess(output.final, ev.score_threshold, ev.max_detections)


def postprocess(pred: BoxPrediction, score_threshold: float = 0.0, max_detections: Optional[int] = None) -> List[Detection]:
    """Score = max class probability, label = its argmax; keep the top-k above the threshold."""
    probs = pred.scores()
    labels = probs.argmax(axis=1)
    scores = probs[np.arange(probs.shape[0]), labels]
    boxes = pred.decode()
    order = np.argsort(-scores, kind="stable")
    order = order[scores[order] >= score_threshold]
    if max_detections is not None:
        order = order[:max_detections]
    return [Detection.from_box(boxes[i], scores[i], labels[i]) for i in order]
