#!/usr/bin/env python3
"""
RCTrans Desk - Core Data Models

This module defines the records shared across the package: calibration and
range descriptions, radar returns, ground truth, detections, tracks and scenes.
Records validate themselves on construction and convert to and from plain
dictionaries for JSON persistence.
"""

import math
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

RADAR_CHANNELS: Tuple[str, ...] = ("x", "y", "z", "vx", "vy", "t_offset")
BOX_FIELDS: Tuple[str, ...] = ("x", "y", "z", "w", "l", "h", "yaw", "vx", "vy")
CLASS_NAMES: Tuple[str, ...] = ("car", "pedestrian", "barrier")


class CalibrationError(ValueError):
    """Raised when a camera calibration violates its invariants."""
    pass


def wrap_yaw(yaw: Any) -> Any:
    """Map angles into (-pi, pi]."""
    wrapped = np.pi - np.mod(np.pi - np.asarray(yaw, dtype=np.float64), 2.0 * np.pi)
    return float(wrapped) if np.ndim(wrapped) == 0 else wrapped


@dataclass(frozen=True)
class WorldRange:
    """Valid 3D region in meters; reference points are normalized against it."""

    x_min: float = -51.2
    x_max: float = 51.2
    y_min: float = -51.2
    y_max: float = 51.2
    z_min: float = -5.0
    z_max: float = 3.0

    def __post_init__(self):
        for axis in "xyz":
            if getattr(self, f"{axis}_max") <= getattr(self, f"{axis}_min"):
                raise ValueError(f"WorldRange {axis}_max must be strictly greater than {axis}_min")

    @property
    def lower(self) -> np.ndarray:
        return np.array([self.x_min, self.y_min, self.z_min])

    @property
    def upper(self) -> np.ndarray:
        return np.array([self.x_max, self.y_max, self.z_max])

    @property
    def span(self) -> np.ndarray:
        return self.upper - self.lower

    def contains_xy(self, xy: np.ndarray) -> np.ndarray:
        xy = np.asarray(xy, dtype=np.float64)
        return (
            (xy[..., 0] >= self.x_min) & (xy[..., 0] < self.x_max)
            & (xy[..., 1] >= self.y_min) & (xy[..., 1] < self.y_max)
        )

    def to_dict(self) -> Dict[str, float]:
        return {k: getattr(self, k) for k in ("x_min", "x_max", "y_min", "y_max", "z_min", "z_max")}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "WorldRange":
        return cls(**{k: float(v) for k, v in data.items()})


@dataclass(frozen=True)
class DepthBins:
    """Depths (meters) sampled along every camera ray."""

    values: Tuple[float, ...]

    def __post_init__(self):
        if len(self.values) < 1:
            raise ValueError("DepthBins needs at least one depth")
        if any(v <= 0 for v in self.values):
            raise ValueError("DepthBins values must be positive")
        if any(b <= a for a, b in zip(self.values, self.values[1:])):
            raise ValueError("DepthBins values must be strictly increasing")

    @classmethod
    def linear(cls, count: int, min_depth: float, max_depth: float) -> "DepthBins":
        if count == 1:
            return cls((float(min_depth),))
        return cls(tuple(float(v) for v in np.linspace(min_depth, max_depth, count)))

    @property
    def count(self) -> int:
        return len(self.values)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.values, dtype=np.float64)


@dataclass
class CameraCalib:
    """
    Pinhole camera: intrinsics in pixels, camera-to-world extrinsics in meters.

    The camera frame is x right, y down, z forward.
    """

    intrinsics: np.ndarray
    extrinsics: np.ndarray
    image_size: Tuple[int, int]
    feature_stride: int = 16

    def __post_init__(self):
        self.intrinsics = np.asarray(self.intrinsics, dtype=np.float64)
        self.extrinsics = np.asarray(self.extrinsics, dtype=np.float64)
        self.image_size = (int(self.image_size[0]), int(self.image_size[1]))
        if self.intrinsics.shape != (3, 3) or self.extrinsics.shape != (4, 4):
            raise CalibrationError("intrinsics must be 3x3 and extrinsics 4x4")
        if abs(np.linalg.det(self.intrinsics)) < 1e-12:
            raise CalibrationError("intrinsics matrix is singular")
        rotation = self.extrinsics[:3, :3]
        if np.max(np.abs(rotation.T @ rotation - np.eye(3))) > 1e-9:
            raise CalibrationError("extrinsics rotation block is not orthonormal")
        if np.max(np.abs(self.extrinsics[3] - np.array([0.0, 0.0, 0.0, 1.0]))) > 0:
            raise CalibrationError("extrinsics bottom row must be [0, 0, 0, 1]")
        height, width = self.image_size
        if self.feature_stride < 1 or height % self.feature_stride or width % self.feature_stride:
            raise CalibrationError(
                f"image size {self.image_size} not divisible by feature stride {self.feature_stride}"
            )

    @property
    def rotation(self) -> np.ndarray:
        return self.extrinsics[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.extrinsics[:3, 3]

    @property
    def feature_size(self) -> Tuple[int, int]:
        return self.image_size[0] // self.feature_stride, self.image_size[1] // self.feature_stride

    def key(self) -> bytes:
        """Hashable identity used to cache per-calibration token coordinates."""
        return (
            self.intrinsics.tobytes() + self.extrinsics.tobytes()
            + np.array(self.image_size + (self.feature_stride,), dtype=np.int64).tobytes()
        )

    @classmethod
    def looking_along(
        cls,
        yaw: float,
        height: float,
        focal: float,
        image_size: Tuple[int, int],
        feature_stride: int = 16,
        position_xy: Tuple[float, float] = (0.0, 0.0),
    ) -> "CameraCalib":
        """Level camera at ``height`` whose optical axis points along world heading ``yaw``."""
        c, s = math.cos(yaw), math.sin(yaw)
        # columns: camera x (right), y (down), z (forward) expressed in world axes
        rotation = np.array([[s, 0.0, c], [-c, 0.0, s], [0.0, -1.0, 0.0]])
        extrinsics = np.eye(4)
        extrinsics[:3, :3] = rotation
        extrinsics[:3, 3] = [position_xy[0], position_xy[1], height]
        h, w = image_size
        intrinsics = np.array([[focal, 0.0, w / 2.0], [0.0, focal, h / 2.0], [0.0, 0.0, 1.0]])
        return cls(intrinsics, extrinsics, image_size, feature_stride)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "intrinsics": self.intrinsics.tolist(),
            "extrinsics": self.extrinsics.tolist(),
            "image_size": list(self.image_size),
            "feature_stride": self.feature_stride,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "CameraCalib":
        return cls(
            intrinsics=np.asarray(data["intrinsics"]),
            extrinsics=np.asarray(data["extrinsics"]),
            image_size=tuple(data["image_size"]),
            feature_stride=int(data.get("feature_stride", 16)),
        )


@dataclass
class RadarPoints:
    """
    Radar returns, one row per point: x, y, z (world, m), vx, vy (compensated m/s),
    t_offset (s relative to the current frame).

    Rows whose channels are all exactly zero are padding.
    """

    data: np.ndarray
    max_points: int = 2048

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 2 or self.data.shape[1] < 3:
            raise ValueError(f"RadarPoints data must be [N, C>=3], got {self.data.shape}")
        if self.data.shape[0] > self.max_points:
            raise ValueError(f"{self.data.shape[0]} radar points exceed the maximum {self.max_points}")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("RadarPoints channels must be finite")

    @classmethod
    def empty(cls, channels: int = len(RADAR_CHANNELS), max_points: int = 2048) -> "RadarPoints":
        return cls(np.zeros((0, channels)), max_points)

    @property
    def count(self) -> int:
        return self.data.shape[0]

    @property
    def channels(self) -> int:
        return self.data.shape[1]

    def valid_rows(self) -> np.ndarray:
        return np.any(self.data != 0.0, axis=1)


@dataclass
class GroundTruthSet:
    """Ground-truth boxes (x, y, z, w, l, h, yaw, vx, vy) and integer class labels."""

    boxes: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.boxes = np.asarray(self.boxes, dtype=np.float64).reshape(-1, len(BOX_FIELDS))
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if self.boxes.shape[0] != self.labels.shape[0]:
            raise ValueError("GroundTruthSet boxes and labels differ in length")
        if np.any(self.boxes[:, 3:6] <= 0):
            raise ValueError("GroundTruthSet extents must be positive")
        yaw = self.boxes[:, 6]
        if np.any(yaw <= -np.pi) or np.any(yaw > np.pi):
            raise ValueError("GroundTruthSet yaw must lie in (-pi, pi]")

    @classmethod
    def empty(cls) -> "GroundTruthSet":
        return cls(np.zeros((0, len(BOX_FIELDS))), np.zeros(0, dtype=np.int64))

    def __len__(self) -> int:
        return self.boxes.shape[0]

    @property
    def centers(self) -> np.ndarray:
        return self.boxes[:, 0:3]

    @property
    def velocities(self) -> np.ndarray:
        return self.boxes[:, 7:9]

    def to_dict(self) -> List[Dict[str, Any]]:
        return [
            dict(zip(BOX_FIELDS, (float(v) for v in box)), label=int(label))
            for box, label in zip(self.boxes, self.labels)
        ]

    @classmethod
    def from_dict(cls, data: Sequence[Dict[str, Any]]) -> "GroundTruthSet":
        if not data:
            return cls.empty()
        boxes = [[float(obj[k]) for k in BOX_FIELDS] for obj in data]
        labels = [int(obj["label"]) for obj in data]
        return cls(np.asarray(boxes), np.asarray(labels))


@dataclass
class Detection:
    """A decoded 3D box with its class score."""

    x: float
    y: float
    z: float
    w: float
    l: float
    h: float
    yaw: float
    vx: float
    vy: float
    score: float
    label: int

    @property
    def center_xy(self) -> np.ndarray:
        return np.array([self.x, self.y])

    @property
    def velocity(self) -> np.ndarray:
        return np.array([self.vx, self.vy])

    def to_dict(self) -> Dict[str, Any]:
        data = {k: float(getattr(self, k)) for k in BOX_FIELDS}
        data.update(score=float(self.score), label=int(self.label))
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "Detection":
        values = {k: float(data[k]) for k in BOX_FIELDS}
        return cls(**values, score=float(data["score"]), label=int(data["label"]))

    @classmethod
    def from_box(cls, box: Sequence[float], score: float, label: int) -> "Detection":
        return cls(*(float(v) for v in box[: len(BOX_FIELDS)]), score=float(score), label=int(label))


@dataclass
class Track:
    """A tracked object: identity, last center, velocity and bookkeeping."""

    id: int
    x: float
    y: float
    vx: float
    vy: float
    label: int
    score: float
    age_since_update: int = 0
    hits: int = 1

    @property
    def center(self) -> np.ndarray:
        return np.array([self.x, self.y])


@dataclass
class TrackRecord:
    """One tracked box in one frame, as written to the tracking JSONL output."""

    frame: int
    id: int
    label: int
    x: float
    y: float
    score: float = 1.0

    def to_dict(self) -> Dict[str, Any]:
        return {
            "frame": int(self.frame),
            "id": int(self.id),
            "class": CLASS_NAMES[self.label] if 0 <= self.label < len(CLASS_NAMES) else int(self.label),
            "label": int(self.label),
            "x": float(self.x),
            "y": float(self.y),
            "score": float(self.score),
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "TrackRecord":
        return cls(
            frame=int(data["frame"]),
            id=int(data["id"]),
            label=int(data["label"]),
            x=float(data["x"]),
            y=float(data["y"]),
            score=float(data.get("score", 1.0)),
        )


@dataclass
class Scene:
    """
    One synthetic frame: ground truth, per-camera calibration, radar and images.

    ``images`` is [num_cameras, H, W, 3] with values in [0, 1].
    """

    frame_index: int
    objects: GroundTruthSet
    calibrations: List[CameraCalib]
    radar: RadarPoints
    images: np.ndarray
    seed: int = 0
    object_ids: Optional[np.ndarray] = None
    metadata: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        if self.images.ndim != 4 or self.images.shape[-1] != 3:
            raise ValueError(f"Scene images must be [N, H, W, 3], got {self.images.shape}")
        if self.images.shape[0] != len(self.calibrations):
            raise ValueError("Scene needs exactly one calibration per image")
        for calib in self.calibrations:
            if tuple(calib.image_size) != self.images.shape[1:3]:
                raise ValueError(f"calibration image size {calib.image_size} does not match images")
        if self.object_ids is None:
            self.object_ids = np.arange(len(self.objects), dtype=np.int64)
        self.object_ids = np.asarray(self.object_ids, dtype=np.int64)

    @property
    def num_cameras(self) -> int:
        return len(self.calibrations)
