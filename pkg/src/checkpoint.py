#!/usr/bin/env python3
"""
RCTrans Desk - Checkpoint Persistence

A checkpoint is two files: ``<path>`` is a JSON manifest listing every tensor
by name, shape and byte offset, and ``<path>.bin`` holds the tensors as one
little-endian float64 blob in manifest order.
"""

import json
import logging
import os
import tempfile
from pathlib import Path
from typing import Dict, List, Optional, Union

import numpy as np

from .configuration import write_text_atomic

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
_DTYPE = np.dtype("<f8")


class CheckpointMismatchError(Exception):
    """Raised when a checkpoint does not fit the model built from the configuration."""

    def __init__(self, message: str, mismatched: Optional[List[str]] = None):
        super().__init__(message)
        self.mismatched = list(mismatched or [])


def blob_path(path: Union[str, Path]) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".bin")


def save_checkpoint(
    path: Union[str, Path],
    state: Dict[str, np.ndarray],
    config_hash: str = "",
) -> Path:
    """Write ``state`` as manifest + blob. Both files are replaced atomically."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)

    entries = []
    offset = 0
    chunks = []
    for name in state:
        array = np.ascontiguousarray(state[name], dtype=_DTYPE)
        entries.append({"name": name, "shape": list(array.shape), "offset": offset})
        chunks.append(array.tobytes())
        offset += array.nbytes

    blob = blob_path(path)
    fd, tmp_name = tempfile.mkstemp(dir=str(blob.parent), prefix=f".{blob.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            for chunk in chunks:
                f.write(chunk)
        os.replace(tmp_name, blob)
    except BaseException:
        if os.path.exists(tmp_name):
            os.unlink(tmp_name)
        raise

    manifest = {"format_version": FORMAT_VERSION, "config_hash": config_hash, "tensors": entries}
    write_text_atomic(path, json.dumps(manifest, indent=2) + "\n")
    logger.info(f"Checkpoint written to {path} ({len(entries)} tensors, {offset} bytes)")
    return path


def read_manifest(path: Union[str, Path]) -> Dict:
    with open(path, "r", encoding="utf-8") as f:
        try:
            manifest = json.load(f)
        except json.JSONDecodeError as e:
            raise CheckpointMismatchError(f"checkpoint manifest {path} is not valid JSON ({e})") from e
    if not isinstance(manifest, dict):
        raise CheckpointMismatchError(f"checkpoint manifest {path} is not a JSON object")
    if manifest.get("format_version") != FORMAT_VERSION:
        raise CheckpointMismatchError(
            f"unsupported checkpoint format_version {manifest.get('format_version')!r}"
        )
    return manifest


def load_checkpoint(path: Union[str, Path]) -> Dict[str, np.ndarray]:
    """Read every tensor listed in the manifest."""
    manifest = read_manifest(path)
    raw = blob_path(path).read_bytes()
    state: Dict[str, np.ndarray] = {}
    for entry in manifest.get("tensors", []):
        try:
            shape = tuple(int(s) for s in entry["shape"])
            start = int(entry["offset"])
            name = str(entry["name"])
        except (KeyError, TypeError, ValueError) as e:
            raise CheckpointMismatchError(f"malformed tensor entry in {path}: {entry!r}") from e
        count = int(np.prod(shape)) if shape else 1
        end = start + count * _DTYPE.itemsize
        if end > len(raw):
            raise CheckpointMismatchError(f"blob too short for tensor {name}", [name])
        state[name] = np.frombuffer(raw[start:end], dtype=_DTYPE).reshape(shape).astype(np.float64)
    return state


def check_compatible(state: Dict[str, np.ndarray], expected: Dict[str, np.ndarray]) -> None:
    """Raise CheckpointMismatchError naming every missing, unexpected or mis-shaped tensor."""
    mismatched = []
    for name, array in expected.items():
        if name not in state:
            mismatched.append(f"{name} (missing)")
        elif tuple(state[name].shape) != tuple(array.shape):
            mismatched.append(f"{name} (checkpoint {tuple(state[name].shape)}, model {tuple(array.shape)})")
    for name in state:
        if name not in expected:
            mismatched.append(f"{name} (unexpected)")
    if mismatched:
        raise CheckpointMismatchError(
            f"checkpoint does not match model: {len(mismatched)} tensor(s) differ", mismatched
        )


def restore_into(module, path: Union[str, Path]) -> Dict:
    """Load a checkpoint into ``module`` after validating shapes; returns the manifest."""
    manifest = read_manifest(path)
    state = load_checkpoint(path)
    check_compatible(state, module.state_dict())
    module.load_state_dict(state)
    logger.info(f"Restored {len(state)} tensors from {path}")
    return manifest
