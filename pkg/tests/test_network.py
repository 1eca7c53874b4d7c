#!/usr/bin/env python3
"""
Tests for the assembled detector: token generation, forward modes,
post-processing and end-to-end gradients on a micro configuration
"""

import pytest
import numpy as np

import sys
import os
sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..'))

from src import tensor as T
from src.configuration import RunConfig
from src.head import BoxPrediction
from src.loss import total_loss
from src.models import GroundTruthSet, WorldRange
from src.network import RCTransNet, postprocess
from src.scene_sim import dropout_harness, gen_scene
from src.tensor import Tensor

MICRO = {
    "model": {
        "embed_dims": 8, "num_heads": 2, "num_layers": 2, "inference_layers": 1, "num_queries": 2,
        "backbone_channels": [4, 4, 8], "pillar_channels": 4, "rde_attention_layers": 1,
        "rde_attention_heads": 2, "pe_hidden_ratio": 2,
    },
    "grid": {"size": 8},
    "depth": {"count": 4},
    "scene": {"num_cameras": 1, "camera_yaws_deg": [0.0], "image_height": 32, "image_width": 32,
              "focal_length": 16.0, "num_objects": 1},
}


def micro_config(**sections):
    data = {key: dict(value) for key, value in MICRO.items()}
    for section, values in sections.items():
        data.setdefault(section, {}).update(values)
    return RunConfig.from_dict(data)


@pytest.fixture
def config():
    return micro_config()


@pytest.fixture
def scene(config):
    return gen_scene(5, config)


@pytest.mark.unit
class TestForward:

    def test_train_mode_returns_every_layer(self, config, scene):
        output = RCTransNet(config).forward(scene, mode="train")
        assert len(output.states) == len(output.predictions) == 2
        assert output.final.class_logits.shape == (2, 3)
        assert output.final.box_params.shape == (2, 10)
        assert output.bev.features.shape[:2] == (8, 8)

    def test_infer_mode_stops_early(self, config, scene):
        output = RCTransNet(config).forward(scene, mode="infer")
        assert len(output.predictions) == 1

    def test_construction_is_seeded(self, config):
        a, b = RCTransNet(config).state_dict(), RCTransNet(config).state_dict()
        for name in a:
            np.testing.assert_array_equal(a[name], b[name])
        other = RCTransNet(RunConfig.from_dict({**MICRO, "model_seed": 1}))
        assert any(not np.array_equal(a[n], other.state_dict()[n]) for n in a)

    def test_camera_only(self, scene):
        model = RCTransNet(micro_config(model={"modalities": "camera"}))
        assert model.radar_tokens(scene) is None
        output = model.forward(scene)
        assert output.bev is None

    def test_radar_only(self, scene):
        model = RCTransNet(micro_config(model={"modalities": "radar"}))
        assert model.image_tokens(scene) is None
        assert len(model.forward(scene).predictions) == 2

    def test_without_dense_encoder(self, scene):
        model = RCTransNet(micro_config(model={"radar_encoder": "none"}))
        tokens, _ = model.radar_tokens(scene)
        assert tokens.shape == (64, 8)

    def test_token_counts(self, config, scene):
        model = RCTransNet(config)
        assert model.image_tokens(scene).shape == (4, 8)
        tokens, grid = model.radar_tokens(scene)
        assert tokens.shape == (64, 8)
        assert grid.features.shape == (8, 8, 4)

    @pytest.mark.parametrize("cameras,radar", [([0], False), ([], True), ([0], True)])
    def test_dropped_sensors_still_run(self, config, scene, cameras, radar):
        dets = RCTransNet(config).detect(dropout_harness(scene, cameras=cameras, radar=radar))
        assert len(dets) == 2
        assert all(np.isfinite(d.x) and np.isfinite(d.score) for d in dets)


@pytest.mark.unit
class TestDetect:

    def test_detect_matches_pruned_forward(self, config, scene):
        model = RCTransNet(config)
        dets = model.detect(scene)
        with T.no_grad():
            reference = postprocess(model.forward(scene, mode="train").predictions[0])
        assert [(d.label, d.score) for d in dets] == [(d.label, d.score) for d in reference]
        np.testing.assert_array_equal([d.x for d in dets], [d.x for d in reference])

    def test_layer_override(self, config, scene):
        model = RCTransNet(config)
        with T.no_grad():
            deep = postprocess(model.forward(scene, mode="train").predictions[1])
        assert [d.score for d in model.detect(scene, layers=2)] == [d.score for d in deep]

    def test_detect_builds_no_graph(self, config, scene):
        model = RCTransNet(config)
        model.detect(scene)
        assert all(p.grad is None for p in model.parameters())

    def test_postprocess_orders_and_filters(self):
        logits = Tensor(np.array([[0.0, 2.0, -1.0], [3.0, 0.0, 0.0], [-5.0, -6.0, -7.0]]))
        pred = BoxPrediction(logits, Tensor(np.zeros((3, 10))), Tensor(np.full((3, 3), 0.5)), WorldRange())
        dets = postprocess(pred)
        assert [d.label for d in dets] == [0, 1, 0]
        assert dets[0].score > dets[1].score > dets[2].score
        assert (dets[0].x, dets[0].y, dets[0].z) == (0.0, 0.0, -1.0)
        assert (dets[0].w, dets[0].yaw) == (1.0, 0.0)
        assert len(postprocess(pred, score_threshold=0.5)) == 2
        assert len(postprocess(pred, max_detections=1)) == 1
        assert postprocess(pred, score_threshold=1.0) == []


def central_difference(loss_fn, param, index, eps=1e-5):
    original = param.data[index]
    param.data[index] = original + eps
    up = loss_fn()
    param.data[index] = original - eps
    down = loss_fn()
    param.data[index] = original
    return (up - down) / (2.0 * eps)


@pytest.mark.slow
class TestEndToEndGradient:
    """Backpropagation through the whole detector against central differences."""

    @pytest.mark.parametrize("prefix", [
        "backbone.", "pillar_net.", "radar_encoder.", "pe.", "decoder.layers.0.", "decoder.layers.1.", "head.",
    ])
    def test_gradient_matches_finite_differences(self, config, scene, prefix):
        model = RCTransNet(config)
        gt = GroundTruthSet(scene.objects.boxes[:1], scene.objects.labels[:1])

        def loss():
            return total_loss(model.forward(scene, mode="train").predictions, gt, config.loss).total

        def value():
            with T.no_grad():
                return loss().item()

        name, param = next((n, p) for n, p in model.named_parameters() if n.startswith(prefix))
        model.zero_grad()
        T.backward(loss())
        analytic = param.grad.reshape(-1)

        rng = np.random.default_rng(0)
        picks = {int(np.argmax(np.abs(analytic)))} | set(rng.choice(analytic.size, size=min(4, analytic.size),
                                                                       replace=False).tolist())
        for flat in sorted(picks):
            index = np.unravel_index(flat, param.data.shape)
            numeric = central_difference(value, param, index)
            assert analytic[flat] == pytest.approx(numeric, rel=1e-4, abs=1e-7), f"{name}{list(index)}"
        assert np.abs(analytic).max() > 0
