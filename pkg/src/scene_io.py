#!/usr/bin/env python3
"""
RCTrans Desk - Scene Files

Scenes are stored one per line as JSON. Boxes and calibrations are plain
JSON; radar and image arrays are base64 strings of little-endian float64 data
with their shape alongside. Every record carries ``format_version``.
"""

import base64
import binascii
import json
import logging
import os
import tempfile
from pathlib import Path
from typing import Any, Dict, Iterable, List, Union

import numpy as np

from .models import CameraCalib, GroundTruthSet, RadarPoints, Scene

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1


class SceneFormatError(ValueError):
    """Raised when a scene record cannot be decoded."""
    pass


def encode_array(array: np.ndarray) -> Dict[str, Any]:
    array = np.ascontiguousarray(array, dtype="<f8")
    return {"shape": list(array.shape), "data": base64.b64encode(array.tobytes()).decode("ascii")}


def decode_array(payload: Dict[str, Any]) -> np.ndarray:
    try:
        shape = tuple(int(s) for s in payload["shape"])
        raw = base64.b64decode(payload["data"], validate=True)
        return np.frombuffer(raw, dtype="<f8").reshape(shape).astype(np.float64)
    except binascii.Error as e:
        raise SceneFormatError(f"array data is not valid base64 ({e})") from e
    except (TypeError, ValueError) as e:
        raise SceneFormatError(f"array payload does not match its shape ({e})") from e


def scene_to_record(scene: Scene) -> Dict[str, Any]:
    return {
        "format_version": FORMAT_VERSION,
        "frame_index": int(scene.frame_index),
        "seed": int(scene.seed),
        "objects": scene.objects.to_dict(),
        "object_ids": [int(i) for i in scene.object_ids],
        "calibrations": [c.to_dict() for c in scene.calibrations],
        "radar": encode_array(scene.radar.data),
        "max_radar_points": int(scene.radar.max_points),
        "images": encode_array(scene.images),
        "metadata": scene.metadata,
    }


def scene_from_record(record: Dict[str, Any]) -> Scene:
    if not isinstance(record, dict):
        raise SceneFormatError(f"scene record must be a JSON object, got {type(record).__name__}")
    version = record.get("format_version")
    if version != FORMAT_VERSION:
        raise SceneFormatError(f"unsupported scene format_version {version!r}")
    try:
        return Scene(
            frame_index=int(record["frame_index"]),
            objects=GroundTruthSet.from_dict(record["objects"]),
            calibrations=[CameraCalib.from_dict(c) for c in record["calibrations"]],
            radar=RadarPoints(decode_array(record["radar"]), int(record.get("max_radar_points", 2048))),
            images=decode_array(record["images"]),
            seed=int(record.get("seed", 0)),
            object_ids=np.asarray(record["object_ids"], dtype=np.int64) if record.get("object_ids") else None,
            metadata=dict(record.get("metadata", {})),
        )
    except SceneFormatError:
        raise
    except KeyError as e:
        raise SceneFormatError(f"scene record is missing {e}") from e
    except (TypeError, ValueError) as e:
        raise SceneFormatError(f"scene record has invalid values ({e})") from e


def write_scenes(path: Union[str, Path], scenes: Iterable[Scene]) -> int:
    """Write scenes as JSONL (replacing the file atomically); returns the count."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(dir=str(path.parent), prefix=f".{path.name}.", suffix=".tmp")
    count = 0
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as f:
            for scene in scenes:
                f.write(json.dumps(scene_to_record(scene), sort_keys=True) + "\n")
                count += 1
        os.replace(tmp_name, path)
    except BaseException:
        if os.path.exists(tmp_name):
            os.unlink(tmp_name)
        raise
    logger.info(f"Wrote {count} scenes to {path}")
    return count


def read_scenes(path: Union[str, Path]) -> List[Scene]:
    scenes = []
    with open(path, "r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as e:
                raise SceneFormatError(f"{path}:{line_no}: not valid JSON ({e})") from e
            scenes.append(scene_from_record(record))
    logger.info(f"Read {len(scenes)} scenes from {path}")
    return scenes
