#!/usr/bin/env python3
"""
Tests for the synthetic scene generator and the sensor-drop harness
"""

import math

import pytest
import numpy as np
from hypothesis import given, strategies as st, settings

import sys
import os
sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..'))

from src.configuration import ConfigurationValidationError, RunConfig
from src.models import GroundTruthSet, WorldRange
from src.scene_sim import (
    CLASS_COLORS, MIN_SEPARATION, RadarNoiseModel, box_corners, build_calibrations, drop_patterns,
    dropout_harness, gen_scene, nearest_footprint_point, radar_return, random_camera_drop,
    render_images, sample_objects, sequence, simulate_radar, sparsity_report,
)


@pytest.fixture
def config():
    return RunConfig()


def static_box(x, y, label_yaw=0.0, vx=0.0, vy=0.0):
    return np.array([x, y, 0.8, 1.9, 4.5, 1.6, label_yaw, vx, vy])


@pytest.mark.unit
class TestSceneGeneration:

    def test_same_seed_is_bitwise_identical(self, config):
        a, b = gen_scene(42, config), gen_scene(42, config)
        np.testing.assert_array_equal(a.objects.boxes, b.objects.boxes)
        np.testing.assert_array_equal(a.radar.data, b.radar.data)
        np.testing.assert_array_equal(a.images, b.images)

    def test_different_seeds_differ(self, config):
        a, b = gen_scene(1, config), gen_scene(2, config)
        assert not np.array_equal(a.objects.boxes, b.objects.boxes)

    def test_scene_layout(self, config):
        scene = gen_scene(3, config)
        assert scene.images.shape == (2, 64, 176, 3)
        assert np.all((scene.images >= 0.0) & (scene.images <= 1.0))
        assert scene.radar.channels == 6
        assert len(scene.objects) == config.scene.num_objects
        np.testing.assert_array_equal(scene.object_ids, np.arange(len(scene.objects)))
        assert scene.num_cameras == len(build_calibrations(config.scene))

    @given(st.integers(min_value=0, max_value=2**32 - 1))
    @settings(max_examples=30, deadline=None)
    def test_objects_keep_their_distance(self, seed):
        objects = sample_objects(np.random.default_rng(seed), 12)
        centers = objects.boxes[:, :2]
        for i in range(len(centers)):
            for j in range(i):
                assert np.hypot(*(centers[i] - centers[j])) >= MIN_SEPARATION
        assert np.all(objects.boxes[:, 3:6] > 0)
        assert np.all((objects.boxes[:, 6] > -math.pi) & (objects.boxes[:, 6] <= math.pi))

    def test_barriers_do_not_move(self):
        objects = sample_objects(np.random.default_rng(0), 30)
        barriers = objects.labels == 2
        assert barriers.any()
        np.testing.assert_array_equal(objects.boxes[barriers, 7:9], 0.0)

    def test_object_colors_reach_the_image(self):
        config = RunConfig.from_dict({"scene": {"num_cameras": 1, "camera_yaws_deg": [0.0]}})
        objects = GroundTruthSet(static_box(12.0, 0.0)[None, :], np.array([0]))
        image = render_images(objects, build_calibrations(config.scene), [np.random.default_rng(0)])[0]
        np.testing.assert_array_equal(image[32, 88], CLASS_COLORS[0])

    def test_box_corners(self):
        corners = box_corners(np.array([1.0, 2.0, 0.5, 2.0, 4.0, 1.0, math.pi / 2, 0.0, 0.0]))
        assert corners.shape == (8, 3)
        np.testing.assert_allclose(corners.mean(axis=0), [1.0, 2.0, 0.5], atol=1e-12)
        # length runs along world y after a quarter turn
        np.testing.assert_allclose(np.ptp(corners, axis=0), [2.0, 4.0, 1.0], atol=1e-12)


@pytest.mark.unit
class TestRadarModel:

    def test_sweep_offsets(self):
        offsets = RadarNoiseModel(num_sweeps=3, sweep_interval=0.1).sweep_offsets()
        np.testing.assert_allclose(offsets, [0.0, -0.1, -0.2])
        assert not np.signbit(offsets[0])

    def test_nearest_footprint_point(self):
        point = nearest_footprint_point(np.array([10.0, 0.0]), 0.0, width=2.0, length=4.0)
        np.testing.assert_allclose(point, [8.0, 0.0])
        rotated = nearest_footprint_point(np.array([10.0, 0.0]), math.pi / 2, width=2.0, length=4.0)
        np.testing.assert_allclose(rotated, [9.0, 0.0], atol=1e-12)

    def test_range_noise_has_configured_spread(self):
        noise = RadarNoiseModel(depth_sigma=0.3, azimuth_sigma=0.0, z_sigma=0.0)
        box = static_box(20.0, 5.0)
        anchor = nearest_footprint_point(box[:2], box[6], box[3], box[4])
        radial = anchor / np.hypot(*anchor)
        rng = np.random.default_rng(0)
        displacement = np.array([
            np.dot(radar_return(box, 0.0, noise, rng.standard_normal(3))[:2] - anchor, radial)
            for _ in range(10000)
        ])
        assert displacement.std() == pytest.approx(0.3, rel=0.05)

    def test_returns_carry_velocity_and_time(self):
        box = static_box(15.0, 0.0, vx=2.0, vy=-1.0)
        row = radar_return(box, -0.15, RadarNoiseModel(), np.zeros(3))
        np.testing.assert_array_equal(row[3:], [2.0, -1.0, -0.15])
        # the object is observed where it was 0.15 s earlier
        assert row[0] == pytest.approx(15.0 - 0.3 - 2.25)

    def test_silent_radar(self):
        noise = RadarNoiseModel(hit_probability=0.0, clutter_rate=0.0)
        objects = sample_objects(np.random.default_rng(1), 5)
        radar = simulate_radar(objects, noise, np.random.default_rng(2), WorldRange())
        assert radar.count == 0 and radar.channels == 6

    def test_point_budget_is_respected(self):
        noise = RadarNoiseModel(hit_probability=1.0, clutter_rate=0.0)
        objects = sample_objects(np.random.default_rng(1), 10)
        radar = simulate_radar(objects, noise, np.random.default_rng(2), WorldRange(), max_points=20)
        assert radar.count == 20

    def test_channel_subset(self):
        objects = sample_objects(np.random.default_rng(1), 3)
        radar = simulate_radar(objects, RadarNoiseModel(hit_probability=1.0), np.random.default_rng(2),
                               WorldRange(), channels=5)
        assert radar.channels == 5
        with pytest.raises(ConfigurationValidationError):
            simulate_radar(objects, RadarNoiseModel(), np.random.default_rng(2), WorldRange(), channels=7)

    @pytest.mark.parametrize("kwargs", [
        {"hit_probability": 1.5},
        {"depth_sigma": -0.1},
        {"num_sweeps": 0},
        {"num_sweeps": 11, "max_sweeps": 10},
    ])
    def test_noise_model_validation(self, kwargs):
        with pytest.raises(ValueError):
            RadarNoiseModel(**kwargs)

    def test_radar_is_sparse(self, config):
        scenes = [gen_scene(seed, config) for seed in range(20)]
        report = sparsity_report(scenes, config.world, grid_size=128)
        assert report["scenes"] == 20
        assert report["mean_empty_fraction"] > 0.9
        assert sparsity_report([], config.world)["scenes"] == 0


@pytest.mark.unit
class TestSequences:

    def test_constant_velocity_motion(self, config):
        scenes = sequence(5, 4, config)
        assert [s.frame_index for s in scenes] == [0, 1, 2, 3]
        first = scenes[0]
        for k, scene in enumerate(scenes[1:], start=1):
            for obj_id, box in zip(scene.object_ids, scene.objects.boxes):
                start = first.objects.boxes[first.object_ids == obj_id][0]
                expected = start[:2] + start[7:9] * k * config.scene.frame_interval
                np.testing.assert_allclose(box[:2], expected, atol=1e-12)

    def test_frame_zero_is_the_single_scene(self, config):
        np.testing.assert_array_equal(sequence(9, 2, config)[0].images, gen_scene(9, config).images)

    def test_objects_leave_the_world_range(self):
        config = RunConfig.from_dict({"scene": {"frame_interval": 10.0}})
        scenes = sequence(2, 3, config)
        first = scenes[0]
        predicted = first.objects.boxes[:, :2] + first.objects.boxes[:, 7:9] * 20.0
        inside = set(first.object_ids[config.world.contains_xy(predicted)].tolist())
        assert set(scenes[-1].object_ids.tolist()) == inside
        for scene in scenes[1:]:
            assert np.all(config.world.contains_xy(scene.objects.boxes[:, :2]))

    def test_births_get_fresh_ids(self):
        config = RunConfig.from_dict({"scene": {"birth_probability": 1.0, "num_objects": 2}})
        scenes = sequence(4, 5, config)
        all_ids = np.concatenate([s.object_ids for s in scenes])
        assert all_ids.max() >= 2
        for scene in scenes:
            assert len(set(scene.object_ids.tolist())) == len(scene.object_ids)

    def test_deaths_remove_objects(self):
        config = RunConfig.from_dict({"scene": {"death_probability": 1.0, "birth_probability": 0.0}})
        scenes = sequence(4, 2, config)
        assert len(scenes[1].objects) == 0
        assert scenes[1].object_ids.size == 0

    def test_needs_a_frame(self, config):
        with pytest.raises(ValueError):
            sequence(0, 0, config)


@pytest.mark.unit
class TestDropHarness:

    def test_shapes_kept_and_values_zeroed(self, config):
        scene = gen_scene(6, config)
        dropped = dropout_harness(scene, cameras=[1], radar=True)
        assert dropped.images.shape == scene.images.shape
        assert not np.any(dropped.images[1])
        np.testing.assert_array_equal(dropped.images[0], scene.images[0])
        assert dropped.radar.data.shape == scene.radar.data.shape
        assert not np.any(dropped.radar.data)
        assert dropped.metadata == {"dropped_cameras": [1], "radar_dropped": True}
        # the source scene is untouched
        assert np.any(scene.images[1]) and np.any(scene.radar.data)

    def test_unknown_camera(self, config):
        with pytest.raises(ValueError):
            dropout_harness(gen_scene(6, config), cameras=[2])

    def test_patterns(self):
        assert list(drop_patterns(2)) == ["none", "camera_0", "camera_1", "all_cameras", "radar"]
        assert drop_patterns(2)["all_cameras"] == {"cameras": [0, 1], "radar": False}

    def test_random_drop(self, config):
        scene = gen_scene(7, config)
        assert random_camera_drop(scene, np.random.default_rng(0), 1, 0.0) is scene
        dropped = random_camera_drop(scene, np.random.default_rng(0), 1, 1.0)
        zeroed = [c for c in range(2) if not np.any(dropped.images[c])]
        assert len(zeroed) == 1
        assert random_camera_drop(scene, np.random.default_rng(0), 0, 1.0) is scene
