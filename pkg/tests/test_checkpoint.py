#!/usr/bin/env python3
"""
Tests for checkpoint persistence and the parameter containers it serializes
"""

import json

import pytest
import numpy as np

import sys
import os
sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..'))

from src.checkpoint import (
    CheckpointMismatchError, blob_path, check_compatible, load_checkpoint, read_manifest,
    restore_into, save_checkpoint,
)
from src.nn import MLP, Linear, Module


class TinyModel(Module):
    def __init__(self, seed: int, hidden: int = 4):
        rng = np.random.default_rng(seed)
        self.encoder = MLP([3, hidden, 2], rng)
        self.blocks = [Linear(2, 2, rng), Linear(2, 2, rng, bias=False)]


@pytest.mark.unit
class TestModuleState:

    def test_parameter_names_follow_attribute_order(self):
        names = [name for name, _ in TinyModel(0).named_parameters()]
        assert names == [
            "encoder.layers.0.weight", "encoder.layers.0.bias",
            "encoder.layers.1.weight", "encoder.layers.1.bias",
            "blocks.0.weight", "blocks.0.bias",
            "blocks.1.weight",
        ]

    def test_load_state_dict_validates(self):
        model = TinyModel(0)
        state = model.state_dict()
        state.pop("blocks.1.weight")
        with pytest.raises(KeyError):
            model.load_state_dict(state)
        state = model.state_dict()
        state["blocks.0.bias"] = np.zeros(3)
        with pytest.raises(ValueError):
            model.load_state_dict(state)

    def test_state_dict_is_a_copy(self):
        model = TinyModel(0)
        state = model.state_dict()
        state["blocks.0.bias"][:] = 99.0
        assert not np.any(model.blocks[0].bias.data == 99.0)


@pytest.mark.unit
class TestCheckpointFiles:

    def test_save_load_preserves_every_bit(self, tmp_path):
        model = TinyModel(1)
        path = save_checkpoint(tmp_path / "model.ckpt", model.state_dict(), "abc123")
        assert blob_path(path).exists()
        loaded = load_checkpoint(path)
        assert list(loaded) == list(model.state_dict())
        for name, array in model.state_dict().items():
            np.testing.assert_array_equal(loaded[name], array)
        assert read_manifest(path)["config_hash"] == "abc123"

    def test_restore_into_fresh_model(self, tmp_path):
        source, target = TinyModel(1), TinyModel(2)
        path = save_checkpoint(tmp_path / "model.ckpt", source.state_dict())
        restore_into(target, path)
        for (_, a), (_, b) in zip(source.named_parameters(), target.named_parameters()):
            np.testing.assert_array_equal(a.data, b.data)

    def test_shape_mismatch_names_the_tensors(self, tmp_path):
        path = save_checkpoint(tmp_path / "model.ckpt", TinyModel(1, hidden=4).state_dict())
        with pytest.raises(CheckpointMismatchError) as exc_info:
            restore_into(TinyModel(1, hidden=5), path)
        mismatched = " ".join(exc_info.value.mismatched)
        assert "encoder.layers.0.weight" in mismatched
        assert "encoder.layers.1.weight" in mismatched
        assert "blocks.0.weight" not in mismatched

    def test_missing_and_unexpected_tensors(self):
        expected = {"a": np.zeros(2), "b": np.zeros(3)}
        with pytest.raises(CheckpointMismatchError) as exc_info:
            check_compatible({"a": np.zeros(2), "c": np.zeros(1)}, expected)
        assert exc_info.value.mismatched == ["b (missing)", "c (unexpected)"]

    def test_truncated_blob(self, tmp_path):
        path = save_checkpoint(tmp_path / "model.ckpt", {"w": np.arange(6.0)})
        blob = blob_path(path)
        blob.write_bytes(blob.read_bytes()[:16])
        with pytest.raises(CheckpointMismatchError):
            load_checkpoint(path)

    def test_unknown_format_version(self, tmp_path):
        path = save_checkpoint(tmp_path / "model.ckpt", {"w": np.zeros(1)})
        manifest = json.loads(path.read_text())
        manifest["format_version"] = 99
        path.write_text(json.dumps(manifest))
        with pytest.raises(CheckpointMismatchError):
            read_manifest(path)

    def test_manifest_is_not_json(self, tmp_path):
        path = save_checkpoint(tmp_path / "model.ckpt", {"w": np.zeros(1)})
        path.write_text("{truncated")
        with pytest.raises(CheckpointMismatchError, match="not valid JSON"):
            read_manifest(path)

    def test_scalar_tensor(self, tmp_path):
        path = save_checkpoint(tmp_path / "scalar.ckpt", {"s": np.array(2.5)})
        assert load_checkpoint(path)["s"].shape == ()
        assert float(load_checkpoint(path)["s"]) == 2.5
