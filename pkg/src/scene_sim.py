#!/usr/bin/env python3
"""
RCTrans Desk - Synthetic Scene Generator

Desk-scale stand-in for a driving dataset. Objects are boxes with constant
velocities placed in front of a two-camera rig. Radar returns are sparse:
each object is hit with some probability per sweep, the return sits on the
footprint point nearest the sensor with range and azimuth noise, and its
height is drawn near the ground regardless of the object. Camera images are
filled class-colored rectangles over a noisy gradient background.

Random streams are derived from the scene seed, so every scene is bitwise
reproducible.
"""

import logging
import math
from dataclasses import dataclass, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .configuration import ConfigurationValidationError, RunConfig, SceneConfig
from .models import (
    CLASS_NAMES,
    RADAR_CHANNELS,
    CameraCalib,
    GroundTruthSet,
    RadarPoints,
    Scene,
    WorldRange,
    wrap_yaw,
)
from .geometry import world_to_frustum
from .radar_bev import BevGeometry, sparsity_stats

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ObjectTemplate:
    name: str
    width: float
    length: float
    height: float
    max_speed: float


CLASS_TEMPLATES: Tuple[ObjectTemplate, ...] = (
    ObjectTemplate("car", 1.9, 4.5, 1.6, 8.0),
    ObjectTemplate("pedestrian", 0.7, 0.7, 1.75, 1.5),
    ObjectTemplate("barrier", 0.5, 2.5, 1.0, 0.0),
)

CLASS_COLORS = np.array([
    [0.9, 0.1, 0.1],
    [0.1, 0.8, 0.1],
    [0.1, 0.2, 0.9],
])

SIZE_JITTER = 0.1
PLACEMENT_RANGE = (6.0, 40.0)
PLACEMENT_AZIMUTH_DEG = 70.0
MIN_SEPARATION = 3.0


@dataclass
class RadarNoiseModel:
    """Sparsity and noise of the simulated radar."""

    hit_probability: float = 0.5
    azimuth_sigma: float = 0.3
    depth_sigma: float = 0.3
    z_sigma: float = 0.5
    clutter_rate: float = 4.0
    num_sweeps: int = 6
    max_sweeps: int = 10
    sweep_interval: float = 0.075

    def __post_init__(self):
        if not 0.0 <= self.hit_probability <= 1.0:
            raise ValueError("hit_probability must lie in [0, 1]")
        if min(self.azimuth_sigma, self.depth_sigma, self.z_sigma, self.clutter_rate) < 0:
            raise ValueError("noise sigmas and clutter rate must be non-negative")
        if not 1 <= self.num_sweeps <= self.max_sweeps:
            raise ValueError(f"num_sweeps must lie in [1, {self.max_sweeps}]")

    @classmethod
    def from_config(cls, cfg: SceneConfig) -> "RadarNoiseModel":
        return cls(
            hit_probability=cfg.hit_probability,
            azimuth_sigma=cfg.azimuth_sigma,
            depth_sigma=cfg.depth_sigma,
            z_sigma=cfg.z_sigma,
            clutter_rate=cfg.clutter_rate,
            num_sweeps=cfg.num_sweeps,
            max_sweeps=cfg.max_sweeps,
            sweep_interval=cfg.sweep_interval,
        )

    def sweep_offsets(self) -> np.ndarray:
        """t_offset of every sweep, newest first (0, -dt, -2dt, ...)."""
        return 0.0 - np.arange(self.num_sweeps) * self.sweep_interval


def build_calibrations(cfg: SceneConfig) -> List[CameraCalib]:
    return [
        CameraCalib.looking_along(
            math.radians(yaw),
            cfg.camera_height,
            cfg.focal_length,
            (cfg.image_height, cfg.image_width),
            cfg.feature_stride,
        )
        for yaw in cfg.camera_yaws_deg
    ]


def _sample_box(rng: np.random.Generator, label: int) -> np.ndarray:
    template = CLASS_TEMPLATES[label]
    jitter = 1.0 + rng.uniform(-SIZE_JITTER, SIZE_JITTER, size=3)
    w, l, h = template.width * jitter[0], template.length * jitter[1], template.height * jitter[2]
    r = rng.uniform(*PLACEMENT_RANGE)
    azimuth = math.radians(rng.uniform(-PLACEMENT_AZIMUTH_DEG, PLACEMENT_AZIMUTH_DEG))
    yaw = wrap_yaw(rng.uniform(-math.pi, math.pi))
    speed = rng.uniform(0.0, template.max_speed)
    return np.array([
        r * math.cos(azimuth), r * math.sin(azimuth), h / 2.0,
        w, l, h, yaw,
        speed * math.cos(yaw), speed * math.sin(yaw),
    ])


def sample_objects(rng: np.random.Generator, count: int, num_classes: int = len(CLASS_TEMPLATES),
                   avoid: Optional[np.ndarray] = None, attempts: int = 100) -> GroundTruthSet:
    """Place up to ``count`` boxes whose centers keep MIN_SEPARATION apart."""
    num_classes = min(num_classes, len(CLASS_TEMPLATES))
    boxes: List[np.ndarray] = []
    labels: List[int] = []
    taken = [] if avoid is None else [np.asarray(c) for c in np.asarray(avoid).reshape(-1, 2)]
    for _ in range(count):
        label = int(rng.integers(num_classes))
        for _ in range(attempts):
            box = _sample_box(rng, label)
            if all(np.hypot(*(box[:2] - c)) >= MIN_SEPARATION for c in taken):
                boxes.append(box)
                labels.append(label)
                taken.append(box[:2])
                break
    if not boxes:
        return GroundTruthSet.empty()
    return GroundTruthSet(np.stack(boxes), np.asarray(labels))


def _rotation(yaw: float) -> np.ndarray:
    c, s = math.cos(yaw), math.sin(yaw)
    return np.array([[c, -s], [s, c]])


def nearest_footprint_point(center_xy: np.ndarray, yaw: float, width: float, length: float,
                            sensor_xy: Sequence[float] = (0.0, 0.0)) -> np.ndarray:
    """Point of the box footprint boundary closest to the sensor."""
    rot = _rotation(yaw)
    local = rot.T @ (np.asarray(sensor_xy, dtype=np.float64) - center_xy)
    half = np.array([length / 2.0, width / 2.0])
    clamped = np.clip(local, -half, half)
    if np.all(np.abs(local) < half):
        # sensor inside the footprint: move to the nearest edge
        axis = int(np.argmin(half - np.abs(local)))
        clamped[axis] = math.copysign(half[axis], local[axis] if local[axis] != 0 else 1.0)
    return center_xy + rot @ clamped


def radar_return(box: np.ndarray, t_offset: float, noise: RadarNoiseModel, draws: np.ndarray) -> np.ndarray:
    """
    One radar row for ``box`` observed ``t_offset`` seconds from the frame.

    ``draws`` holds three standard normals: range, azimuth and height noise.
    """
    center = box[0:2] + box[7:9] * t_offset
    point = nearest_footprint_point(center, box[6], box[3], box[4])
    norm = float(np.hypot(*point))
    radial = point / norm if norm > 0 else np.array([1.0, 0.0])
    tangential = np.array([-radial[1], radial[0]])
    xy = point + noise.depth_sigma * draws[0] * radial + noise.azimuth_sigma * draws[1] * tangential
    z = noise.z_sigma * draws[2]
    return np.array([xy[0], xy[1], z, box[7], box[8], t_offset])


def simulate_radar(
    objects: GroundTruthSet,
    noise: RadarNoiseModel,
    rng: np.random.Generator,
    world_range: WorldRange,
    max_points: int = 2048,
    channels: int = len(RADAR_CHANNELS),
) -> RadarPoints:
    if not 3 <= channels <= len(RADAR_CHANNELS):
        raise ConfigurationValidationError(f"radar channels must lie in [3, {len(RADAR_CHANNELS)}]")
    rows = []
    offsets = noise.sweep_offsets()
    for box in objects.boxes:
        for t in offsets:
            hit = rng.random() < noise.hit_probability
            draws = rng.standard_normal(3)
            if hit:
                rows.append(radar_return(box, float(t), noise, draws))

    clutter = int(rng.poisson(noise.clutter_rate)) if noise.clutter_rate > 0 else 0
    for _ in range(clutter):
        x = rng.uniform(world_range.x_min, world_range.x_max)
        y = rng.uniform(world_range.y_min, world_range.y_max)
        z = noise.z_sigma * rng.standard_normal()
        t = float(offsets[rng.integers(noise.num_sweeps)])
        rows.append(np.array([x, y, z, 0.0, 0.0, t]))

    if len(rows) > max_points:
        logger.debug(f"Radar returns truncated from {len(rows)} to {max_points}")
        rows = rows[:max_points]
    data = np.stack(rows)[:, :channels] if rows else np.zeros((0, channels))
    return RadarPoints(data, max_points)


def box_corners(box: np.ndarray) -> np.ndarray:
    """The 8 corners [8, 3] of a (x, y, z, w, l, h, yaw, ...) box."""
    x, y, z, w, l, h, yaw = box[:7]
    signs = np.array([[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)], dtype=np.float64)
    local = signs * np.array([l / 2.0, w / 2.0, h / 2.0])
    rot = np.eye(3)
    rot[:2, :2] = _rotation(yaw)
    return local @ rot.T + np.array([x, y, z])


def render_background(rng: np.random.Generator, height: int, width: int) -> np.ndarray:
    sky = np.array([0.6, 0.7, 0.9])
    ground = np.array([0.35, 0.35, 0.3])
    frac = (np.arange(height) / max(height - 1, 1))[:, None, None]
    image = np.broadcast_to(sky * (1.0 - frac) + ground * frac, (height, width, 3)).copy()
    image += 0.02 * rng.standard_normal((height, width, 3))
    return np.clip(image, 0.0, 1.0)


def render_images(objects: GroundTruthSet, calibrations: Sequence[CameraCalib],
                  rngs: Sequence[np.random.Generator]) -> np.ndarray:
    """Rasterize every object's projected bounding rectangle, far to near."""
    images = []
    for calib, rng in zip(calibrations, rngs):
        height, width = calib.image_size
        image = render_background(rng, height, width)
        distance = np.linalg.norm(objects.centers - calib.translation, axis=1) if len(objects) else np.zeros(0)
        for k in np.argsort(-distance, kind="stable"):
            pts, _ = world_to_frustum(calib, box_corners(objects.boxes[k]))
            depth = pts[:, 2]
            if np.any(depth <= 0.1):
                continue
            u = pts[:, 0] / depth
            v = pts[:, 1] / depth
            u0, u1 = max(0, int(math.floor(u.min()))), min(width, int(math.ceil(u.max())))
            v0, v1 = max(0, int(math.floor(v.min()))), min(height, int(math.ceil(v.max())))
            if u0 >= u1 or v0 >= v1:
                continue
            image[v0:v1, u0:u1] = CLASS_COLORS[objects.labels[k] % len(CLASS_COLORS)]
        images.append(image)
    return np.stack(images)


def _sensor_rngs(seed: int, frame_index: int, num_cameras: int) -> Tuple[np.random.Generator, List[np.random.Generator]]:
    children = np.random.SeedSequence([seed, frame_index, 2]).spawn(num_cameras + 1)
    return np.random.default_rng(children[0]), [np.random.default_rng(c) for c in children[1:]]


def render_frame(seed: int, frame_index: int, objects: GroundTruthSet, object_ids: np.ndarray,
                 cfg: RunConfig) -> Scene:
    """Simulate sensors for a fixed set of objects."""
    calibrations = build_calibrations(cfg.scene)
    radar_rng, camera_rngs = _sensor_rngs(seed, frame_index, len(calibrations))
    radar = simulate_radar(
        objects,
        RadarNoiseModel.from_config(cfg.scene),
        radar_rng,
        cfg.world,
        cfg.grid.max_radar_points,
        cfg.model.radar_channels,
    )
    images = render_images(objects, calibrations, camera_rngs)
    return Scene(frame_index, objects, calibrations, radar, images, seed=seed, object_ids=object_ids)


def gen_scene(seed: int, cfg: RunConfig, frame_index: int = 0) -> Scene:
    """One scene with ``cfg.scene.num_objects`` objects (fewer if placement fails)."""
    rng = np.random.default_rng(seed)
    objects = sample_objects(rng, cfg.scene.num_objects, cfg.model.num_classes)
    return render_frame(seed, frame_index, objects, np.arange(len(objects)), cfg)


def sequence(seed: int, frames: int, cfg: RunConfig) -> List[Scene]:
    """
    ``frames`` consecutive scenes ``frame_interval`` seconds apart. Frame 0 is
    ``gen_scene(seed, cfg)``; objects then move at constant velocity, may die
    or be born per the configured probabilities, and leave once their center
    exits the WorldRange.
    """
    if frames < 1:
        raise ValueError(f"sequence needs at least one frame, got {frames}")
    sc = cfg.scene
    world = cfg.world
    first = gen_scene(seed, cfg)
    scenes = [first]

    start_boxes = first.objects.boxes.copy()
    labels = first.objects.labels.copy()
    ids = first.object_ids.copy()
    birth_frame = np.zeros(len(ids), dtype=np.int64)
    next_id = len(ids)
    dyn_rng = np.random.default_rng([seed, 1])

    for frame in range(1, frames):
        elapsed = (frame - birth_frame) * sc.frame_interval
        boxes = start_boxes.copy()
        boxes[:, 0:2] = start_boxes[:, 0:2] + start_boxes[:, 7:9] * elapsed[:, None]

        alive = world.contains_xy(boxes[:, 0:2])
        if sc.death_probability > 0:
            alive &= dyn_rng.random(len(ids)) >= sc.death_probability
        start_boxes, boxes = start_boxes[alive], boxes[alive]
        labels, ids, birth_frame = labels[alive], ids[alive], birth_frame[alive]

        if sc.birth_probability > 0 and dyn_rng.random() < sc.birth_probability:
            born = sample_objects(dyn_rng, 1, cfg.model.num_classes, avoid=boxes[:, 0:2])
            if len(born):
                start_boxes = np.concatenate([start_boxes, born.boxes])
                boxes = np.concatenate([boxes, born.boxes])
                labels = np.concatenate([labels, born.labels])
                ids = np.concatenate([ids, [next_id]])
                birth_frame = np.concatenate([birth_frame, [frame]])
                next_id += 1

        objects = GroundTruthSet(boxes, labels) if len(labels) else GroundTruthSet.empty()
        scenes.append(render_frame(seed, frame, objects, ids, cfg))
    return scenes


def dropout_harness(scene: Scene, cameras: Sequence[int] = (), radar: bool = False) -> Scene:
    """Copy of ``scene`` with the chosen camera images and/or the radar tensor zeroed, shapes kept."""
    cameras = sorted(set(int(c) for c in cameras))
    for c in cameras:
        if not 0 <= c < scene.num_cameras:
            raise ValueError(f"camera {c} does not exist (scene has {scene.num_cameras})")
    images = scene.images.copy()
    images[cameras] = 0.0
    radar_points = scene.radar
    if radar:
        radar_points = RadarPoints(np.zeros_like(scene.radar.data), scene.radar.max_points)
    metadata = dict(scene.metadata)
    metadata.update(dropped_cameras=cameras, radar_dropped=bool(radar or metadata.get("radar_dropped", False)))
    return replace(scene, images=images, radar=radar_points, metadata=metadata)


def random_camera_drop(scene: Scene, rng: np.random.Generator, count: int, probability: float) -> Scene:
    """Training augmentation: with ``probability``, zero ``count`` randomly chosen cameras."""
    if count <= 0 or rng.random() >= probability:
        return scene
    chosen = rng.choice(scene.num_cameras, size=min(count, scene.num_cameras), replace=False)
    return dropout_harness(scene, cameras=chosen.tolist())


def drop_patterns(num_cameras: int) -> Dict[str, Dict]:
    """The robustness grid: nothing, each single camera, all cameras, radar."""
    patterns: Dict[str, Dict] = {"none": {"cameras": [], "radar": False}}
    for c in range(num_cameras):
        patterns[f"camera_{c}"] = {"cameras": [c], "radar": False}
    patterns["all_cameras"] = {"cameras": list(range(num_cameras)), "radar": False}
    patterns["radar"] = {"cameras": [], "radar": True}
    return patterns


def sparsity_report(scenes: Sequence[Scene], world_range: WorldRange, grid_size: int = 128) -> Dict:
    """Mean radar occupancy of ``scenes`` on a ``grid_size`` BEV grid."""
    geometry = BevGeometry(grid_size, world_range)
    stats = [sparsity_stats(s.radar.data, geometry) for s in scenes]
    if not stats:
        return {"grid_size": grid_size, "scenes": 0, "mean_empty_fraction": 1.0,
                "mean_occupied_cells": 0.0, "mean_points": 0.0}
    return {
        "grid_size": grid_size,
        "scenes": len(stats),
        "mean_empty_fraction": float(np.mean([s["empty_fraction"] for s in stats])),
        "mean_occupied_cells": float(np.mean([s["occupied_cells"] for s in stats])),
        "mean_points": float(np.mean([s["points"] for s in stats])),
    }
