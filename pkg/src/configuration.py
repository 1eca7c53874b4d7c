#!/usr/bin/env python3
"""
RCTrans Desk - Configuration Management System

This module provides the run configuration schema (pydantic), JSON-based
configuration persistence, validation and a stable configuration hash.

Every field has a default and unknown keys are rejected, so a configuration
file only needs to state what differs from the desk-scale defaults.
"""

import hashlib
import json
import logging
import os
import tempfile
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .models import DepthBins, WorldRange

DEFAULT_CONFIG_DIR = Path(__file__).resolve().parent.parent / "config"


class ConfigurationValidationError(Exception):
    """Raised when configuration validation fails."""
    pass


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_assignment=True)


class ModelConfig(_Section):
    """Network dimensions and ablation switches."""

    embed_dims: int = Field(64, ge=4)
    num_heads: int = Field(4, ge=1)
    num_layers: int = Field(6, ge=1)
    inference_layers: int = Field(3, ge=1)
    num_queries: int = Field(24, ge=1)
    num_classes: int = Field(3, ge=1)
    ffn_ratio: int = Field(2, ge=1)
    pe_hidden_ratio: int = Field(4, ge=1)
    num_freqs: Optional[int] = Field(None, ge=1)
    backbone_channels: List[int] = Field(default_factory=lambda: [16, 32, 64])
    radar_channels: int = Field(6, ge=3)
    pillar_channels: int = Field(16, ge=1)
    rde_attention_layers: int = Field(2, ge=0)
    rde_attention_heads: int = Field(4, ge=1)
    radar_encoder: str = "rde"
    rde_skip: bool = True
    rde_attention: bool = True
    fusion: str = "sequential"
    update_positions: bool = True
    modalities: str = "radar_camera"

    @model_validator(mode="after")
    def _check_model(self) -> "ModelConfig":
        if self.embed_dims % self.num_heads != 0:
            raise ValueError(f"embed_dims {self.embed_dims} not divisible by num_heads {self.num_heads}")
        if self.inference_layers > self.num_layers:
            raise ValueError(
                f"inference_layers {self.inference_layers} exceeds num_layers {self.num_layers}"
            )
        if len(self.backbone_channels) != 3:
            raise ValueError("backbone_channels must list exactly 3 widths (4 stride-2 stages)")
        if self.radar_encoder not in ("rde", "none"):
            raise ValueError(f"unknown radar_encoder {self.radar_encoder!r}")
        if self.fusion not in ("sequential", "joint"):
            raise ValueError(f"unknown fusion {self.fusion!r}")
        if self.modalities not in ("radar_camera", "camera", "radar"):
            raise ValueError(f"unknown modalities {self.modalities!r}")
        return self

    @property
    def sincos_freqs(self) -> int:
        """Frequencies per axis; by default the 2-D sine-cosine vector is embed_dims wide."""
        return self.num_freqs if self.num_freqs is not None else max(1, self.embed_dims // 4)


class GridConfig(_Section):
    """Radar BEV grid size (cells per side)."""

    size: int = Field(32, ge=8)
    max_radar_points: int = Field(2048, ge=1)

    @model_validator(mode="after")
    def _check_grid(self) -> "GridConfig":
        if self.size % 8 != 0:
            raise ValueError(f"grid size {self.size} must be divisible by 8")
        return self


class DepthConfig(_Section):
    count: int = Field(16, ge=1)
    min_depth: float = Field(1.0, gt=0)
    max_depth: float = Field(40.0, gt=0)

    @model_validator(mode="after")
    def _check_depth(self) -> "DepthConfig":
        if self.count > 1 and self.max_depth <= self.min_depth:
            raise ValueError("max_depth must exceed min_depth")
        return self

    def to_bins(self) -> DepthBins:
        return DepthBins.linear(self.count, self.min_depth, self.max_depth)


class WorldRangeConfig(_Section):
    x_min: float = -51.2
    x_max: float = 51.2
    y_min: float = -51.2
    y_max: float = 51.2
    z_min: float = -5.0
    z_max: float = 3.0

    @model_validator(mode="after")
    def _check_range(self) -> "WorldRangeConfig":
        for axis in "xyz":
            if getattr(self, f"{axis}_max") <= getattr(self, f"{axis}_min"):
                raise ValueError(f"{axis}_max must be strictly greater than {axis}_min")
        return self

    def to_world_range(self) -> WorldRange:
        return WorldRange(**self.model_dump())


class LossConfig(_Section):
    """Loss weights: total = cls_weight * focal + reg_weight * L1 (per decoder layer)."""

    cls_weight: float = Field(2.0, ge=0)
    reg_weight: float = Field(0.25, ge=0)
    focal_alpha: float = Field(0.25, ge=0, le=1)
    focal_gamma: float = Field(2.0, ge=0)
    l1_weights: List[float] = Field(default_factory=lambda: [1.0] * 10)

    @model_validator(mode="after")
    def _check_l1(self) -> "LossConfig":
        if len(self.l1_weights) != 10:
            raise ValueError("l1_weights needs one weight per box parameter (10)")
        if any(w < 0 for w in self.l1_weights):
            raise ValueError("l1_weights must be non-negative")
        return self


class OptimizerConfig(_Section):
    lr: float = Field(2e-3, ge=0)
    weight_decay: float = Field(1e-2, ge=0)
    betas: List[float] = Field(default_factory=lambda: [0.9, 0.999])
    eps: float = Field(1e-8, gt=0)
    schedule: str = "onecycle"
    pct_start: float = Field(0.1, gt=0, lt=1)
    steps: int = Field(2000, ge=0)
    batch_size: int = Field(4, ge=1)
    grad_clip: float = Field(10.0, ge=0)

    @model_validator(mode="after")
    def _check_schedule(self) -> "OptimizerConfig":
        if self.schedule not in ("onecycle", "constant"):
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if len(self.betas) != 2 or not all(0 <= b < 1 for b in self.betas):
            raise ValueError("betas must be two values in [0, 1)")
        return self


class SceneConfig(_Section):
    """Synthetic scene generation and radar noise model."""

    num_scenes: int = Field(8, ge=0)
    num_objects: int = Field(10, ge=0)
    num_cameras: int = Field(2, ge=1)
    image_height: int = Field(64, ge=16)
    image_width: int = Field(176, ge=16)
    feature_stride: int = Field(16, ge=1)
    focal_length: float = Field(88.0, gt=0)
    camera_height: float = 1.5
    camera_yaws_deg: List[float] = Field(default_factory=lambda: [35.0, -35.0])
    hit_probability: float = Field(0.5, ge=0, le=1)
    azimuth_sigma: float = Field(0.3, ge=0)
    depth_sigma: float = Field(0.3, ge=0)
    z_sigma: float = Field(0.5, ge=0)
    clutter_rate: float = Field(4.0, ge=0)
    num_sweeps: int = Field(6, ge=1)
    max_sweeps: int = Field(10, ge=1)
    sweep_interval: float = Field(0.075, ge=0)
    frame_interval: float = Field(0.5, gt=0)
    birth_probability: float = Field(0.0, ge=0, le=1)
    death_probability: float = Field(0.0, ge=0, le=1)
    drop_probability: float = Field(0.5, ge=0, le=1)
    drop_cameras_in_training: int = Field(1, ge=0)
    stats_grid_size: int = Field(128, ge=8)

    @model_validator(mode="after")
    def _check_scene(self) -> "SceneConfig":
        if self.num_sweeps > self.max_sweeps:
            raise ValueError(f"num_sweeps {self.num_sweeps} exceeds max_sweeps {self.max_sweeps}")
        if len(self.camera_yaws_deg) != self.num_cameras:
            raise ValueError("camera_yaws_deg needs one yaw per camera")
        if self.image_height % self.feature_stride or self.image_width % self.feature_stride:
            raise ValueError("image size must be divisible by feature_stride")
        if self.drop_cameras_in_training > self.num_cameras:
            raise ValueError("drop_cameras_in_training exceeds num_cameras")
        return self


class TrackerConfig(_Section):
    match_radius: float = Field(2.0, gt=0)
    max_age: int = Field(3, ge=0)
    min_score: float = Field(0.3, ge=0, le=1)


class EvaluationConfig(_Section):
    distance_thresholds: List[float] = Field(default_factory=lambda: [0.5, 1.0, 2.0, 4.0])
    score_threshold: float = Field(0.0, ge=0, le=1)
    max_detections: Optional[int] = Field(None, ge=1)
    tracking_threshold: float = Field(2.0, gt=0)
    latency_scenes: int = Field(50, ge=1)


class RunConfig(_Section):
    """Complete configuration of a run."""

    model: ModelConfig = Field(default_factory=ModelConfig)
    grid: GridConfig = Field(default_factory=GridConfig)
    depth: DepthConfig = Field(default_factory=DepthConfig)
    world_range: WorldRangeConfig = Field(default_factory=WorldRangeConfig)
    loss: LossConfig = Field(default_factory=LossConfig)
    optimizer: OptimizerConfig = Field(default_factory=OptimizerConfig)
    scene: SceneConfig = Field(default_factory=SceneConfig)
    tracker: TrackerConfig = Field(default_factory=TrackerConfig)
    evaluation: EvaluationConfig = Field(default_factory=EvaluationConfig)
    seed: int = Field(0, ge=0)
    model_seed: int = Field(0, ge=0)
    drop_augmentation: bool = False
    log_level: str = "INFO"
    log_every: int = Field(50, ge=1)

    def to_dict(self) -> Dict[str, Any]:
        return self.model_dump(mode="json")

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "RunConfig":
        try:
            return cls.model_validate(data)
        except ValidationError as e:
            raise ConfigurationValidationError(f"Invalid run configuration: {e}") from e

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode("utf-8")).hexdigest()

    def model_hash(self) -> str:
        """Hash of the sections that determine parameter shapes."""
        payload = {
            "model": self.model.model_dump(mode="json"),
            "grid": self.grid.model_dump(mode="json"),
            "depth": self.depth.model_dump(mode="json"),
        }
        text = json.dumps(payload, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode("utf-8")).hexdigest()

    @property
    def world(self) -> WorldRange:
        return self.world_range.to_world_range()

    @property
    def bins(self) -> DepthBins:
        return self.depth.to_bins()


def full_scale_config() -> RunConfig:
    """Full-scale settings (128x128 BEV, D=256, 900 queries, 6/3 layers, 6 cameras)."""
    return RunConfig(
        model=ModelConfig(
            embed_dims=256,
            num_heads=8,
            num_layers=6,
            inference_layers=3,
            num_queries=900,
            num_classes=10,
            backbone_channels=[64, 128, 256],
            pillar_channels=64,
            rde_attention_heads=8,
        ),
        grid=GridConfig(size=128, max_radar_points=2048),
        scene=SceneConfig(
            num_cameras=6,
            camera_yaws_deg=[0.0, 55.0, 110.0, 180.0, -110.0, -55.0],
            image_height=256,
            image_width=704,
            focal_length=560.0,
            drop_cameras_in_training=3,
        ),
        optimizer=OptimizerConfig(lr=4e-4, batch_size=32),
    )


class ConfigurationManager:
    """
    Loads, validates and persists run configurations as JSON files.
    """

    def __init__(self, config_dir: Optional[Union[str, Path]] = None):
        """
        Initialize configuration manager.

        Args:
            config_dir: Directory holding the default configuration file
                (defaults to the project's config/ directory)
        """
        self.config_dir = Path(config_dir) if config_dir is not None else DEFAULT_CONFIG_DIR
        self.logger = logging.getLogger(__name__)
        self.default_config_file = self.config_dir / "run_config.json"

    def get_default_config(self) -> RunConfig:
        """Return the shipped default configuration, or the built-in defaults."""
        if self.default_config_file.exists():
            return self.load_config(self.default_config_file)
        return RunConfig()

    def load_config(self, path: Union[str, Path]) -> RunConfig:
        """
        Load and validate a configuration file.

        Raises:
            ConfigurationValidationError: If the file is not valid JSON or fails validation
            OSError: If the file cannot be read
        """
        path = Path(path)
        with open(path, "r", encoding="utf-8") as f:
            try:
                data = json.load(f)
            except json.JSONDecodeError as e:
                raise ConfigurationValidationError(f"{path}: not valid JSON ({e})") from e
        if not isinstance(data, dict):
            raise ConfigurationValidationError(f"{path}: top-level value must be an object")
        config = RunConfig.from_dict(data)
        self.logger.info(f"Loaded configuration {path} (hash {config.config_hash()[:12]})")
        return config

    def validate_config(self, data: Dict[str, Any]) -> bool:
        """
        Validate configuration data.

        Returns:
            bool: True if the configuration is valid

        Raises:
            ConfigurationValidationError: If validation fails with details
        """
        RunConfig.from_dict(data)
        return True

    def save_config(self, config: RunConfig, path: Union[str, Path]) -> Path:
        """Write the configuration as indented JSON, replacing any existing file atomically."""
        path = Path(path)
        write_text_atomic(path, json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n")
        self.logger.info(f"Configuration saved to {path}")
        return path


def write_text_atomic(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(dir=str(path.parent), prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as f:
            f.write(text)
        os.replace(tmp_name, path)
    except BaseException:
        if os.path.exists(tmp_name):
            os.unlink(tmp_name)
        raise


def load_run_config(path: Optional[Union[str, Path]] = None) -> RunConfig:
    """Load ``path`` if given, else the default configuration."""
    manager = ConfigurationManager()
    if path is None:
        return manager.get_default_config()
    return manager.load_config(path)
