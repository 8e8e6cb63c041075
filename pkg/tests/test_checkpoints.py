import numpy as np
import pytest

from maskdiff.checkpoints import load_checkpoint, save_checkpoint
from maskdiff.errors import CheckpointError


def test_roundtrip(tmp_path):
    tensors = {
        "layer.weight": np.arange(12, dtype=np.float32).reshape(3, 4),
        "layer.bias": np.array([1.5, -2.5, 3.5], dtype=np.float32),
        "scalar": np.float32(7.0),
    }
    fp = save_checkpoint(tmp_path / "m.ckpt", "test", {"width": 3}, {"note": "x"}, tensors)
    kind, config, meta, back, fp2 = load_checkpoint(tmp_path / "m.ckpt")
    assert kind == "test" and config == {"width": 3} and meta == {"note": "x"}
    assert fp == fp2
    for name, arr in tensors.items():
        assert np.array_equal(back[name], np.asarray(arr, dtype=np.float32))


def test_truncated_file(tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, "test", {}, {}, {"w": np.ones((64, 64), dtype=np.float32)})
    blob = path.read_bytes()
    path.write_bytes(blob[: len(blob) - 100])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(path)


def test_bad_magic(tmp_path):
    path = tmp_path / "m.ckpt"
    path.write_bytes(b"garbagegarbagegarbage")
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(path)


def test_corrupt_header(tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, "test", {}, {}, {"w": np.ones(4, dtype=np.float32)})
    blob = bytearray(path.read_bytes())
    blob[20] = 0xFF
    path.write_bytes(bytes(blob))
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_missing_file(tmp_path):
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "absent.ckpt")
