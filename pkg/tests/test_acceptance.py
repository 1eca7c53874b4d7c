#!/usr/bin/env python3
"""
Desk-scale acceptance experiments

These train the default-size model for thousands of steps or time many
inference runs; they are marked slow and excluded by ``-m "not slow"``.
"""

import statistics
import time

import pytest

import sys
import os
sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..'))

from src.configuration import RunConfig
from src.evaluation import evaluate_detections, ground_truth_tracks, tracking_metrics
from src.models import Detection
from src.network import RCTransNet
from src.scene_sim import dropout_harness, gen_scene, sequence, sparsity_report
from src.tracker import run_tracker
from src.training import Trainer

OVERFIT_STEPS = 2000


def detect_all(model, scenes, layers=None):
    return [model.detect(s, layers=layers) for s in scenes]


@pytest.fixture(scope="module")
def overfit_run():
    """Default-size model trained on the 8 frames of one sequence."""
    config = RunConfig()
    scenes = sequence(2024, 8, config)
    trainer = Trainer(config)
    result = trainer.train(scenes, steps=OVERFIT_STEPS)
    return config, scenes, trainer.model, result


@pytest.mark.slow
class TestOverfit:

    def test_loss_collapses(self, overfit_run):
        _, _, _, result = overfit_run
        assert result.final_loss < 0.1 * result.initial_loss

    def test_training_set_is_detected(self, overfit_run):
        config, scenes, model, _ = overfit_run
        metrics = evaluate_detections(detect_all(model, scenes), [s.objects for s in scenes],
                                      config.model.num_classes, thresholds=(2.0,))
        assert metrics.mAP >= 0.9
        assert metrics.mAVE < 0.3

    def test_tracking_with_learned_detections(self, overfit_run):
        config, scenes, model, _ = overfit_run
        records = run_tracker(detect_all(model, scenes), config.scene.frame_interval, config.tracker)
        metrics = tracking_metrics(ground_truth_tracks(scenes), records, config.evaluation.tracking_threshold)
        assert metrics.ids <= 2


@pytest.mark.slow
class TestPruningLatency:

    def test_three_layers_are_faster_than_six(self):
        config = RunConfig()
        model = RCTransNet(config)
        scenes = [gen_scene(seed, config) for seed in range(config.evaluation.latency_scenes)]
        timings = {3: [], 6: []}
        for scene in scenes:
            # interleaved depths
            for layers in (3, 6):
                start = time.perf_counter()
                model.detect(scene, layers=layers)
                timings[layers].append(time.perf_counter() - start)
        assert statistics.median(timings[3]) < statistics.median(timings[6])


@pytest.mark.slow
class TestRobustness:

    def test_single_camera_drop_after_drop_training(self):
        data = RunConfig().to_dict()
        data["drop_augmentation"] = True
        config = RunConfig.from_dict(data)
        scenes = [gen_scene(seed, config) for seed in range(8)]
        trainer = Trainer(config)
        trainer.train(scenes, steps=OVERFIT_STEPS)
        gts = [s.objects for s in scenes]

        baseline = evaluate_detections(detect_all(trainer.model, scenes), gts, thresholds=(2.0,)).mAP
        for camera in range(config.scene.num_cameras):
            dropped = [dropout_harness(s, cameras=[camera]) for s in scenes]
            degraded = evaluate_detections(detect_all(trainer.model, dropped), gts, thresholds=(2.0,)).mAP
            assert degraded >= 0.7 * baseline


@pytest.mark.slow
class TestSensorRegime:

    def test_radar_grid_is_mostly_empty(self):
        config = RunConfig()
        scenes = [gen_scene(seed, config) for seed in range(100)]
        assert sparsity_report(scenes, config.world, grid_size=128)["mean_empty_fraction"] > 0.9

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_oracle_tracking_is_perfect(self, seed):
        config = RunConfig()
        scenes = sequence(seed, 20, config)
        frames = [
            [Detection.from_box(box, 1.0, label) for box, label in zip(s.objects.boxes, s.objects.labels)]
            for s in scenes
        ]
        records = run_tracker(frames, config.scene.frame_interval, config.tracker)
        metrics = tracking_metrics(ground_truth_tracks(scenes), records, config.evaluation.tracking_threshold)
        assert metrics.ids == 0
        assert metrics.accuracy == 1.0
