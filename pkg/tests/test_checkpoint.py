"""Checkpoint format: bit-exact round trips, byte-identical rewrites,
and loud failures on corrupt files."""

from __future__ import annotations

import numpy as np
import pytest

from dmrn.backbone import BackboneConfig
from dmrn.checkpoint import (
    CheckpointError,
    load_arrays,
    load_model,
    save_arrays,
    save_model,
)
from dmrn.model import DmrnModel

TINY = BackboneConfig(input_size=32, stage_channels=(2, 2, 4, 4), blocks_per_stage=1)


def sample_arrays():
    rng = np.random.default_rng(0)
    return {
        "w": rng.normal(size=(3, 2, 3, 3)).astype(np.float32),
        "b": rng.normal(size=(3,)).astype(np.float32),
        "stats/running": rng.normal(size=(4,)).astype(np.float64),
        "scalar": np.float32(2.5).reshape(()),
    }


def test_roundtrip_exact(tmp_path):
    arrays = sample_arrays()
    path = tmp_path / "a.ckpt"
    save_arrays(arrays, path, meta={"note": "hi", "n": 3})
    loaded, meta = load_arrays(path)
    assert meta == {"note": "hi", "n": 3}
    assert list(loaded) == list(arrays)
    for name in arrays:
        assert loaded[name].dtype == arrays[name].dtype
        assert loaded[name].shape == arrays[name].shape
        np.testing.assert_array_equal(loaded[name], arrays[name])


def test_save_load_save_byte_identical(tmp_path):
    arrays = sample_arrays()
    p1, p2 = tmp_path / "one.ckpt", tmp_path / "two.ckpt"
    save_arrays(arrays, p1)
    loaded, _ = load_arrays(p1)
    save_arrays(loaded, p2)
    assert p1.read_bytes() == p2.read_bytes()


def test_rejects_unsupported_dtype(tmp_path):
    with pytest.raises(CheckpointError, match="dtype"):
        save_arrays({"x": np.arange(3, dtype=np.int64)}, tmp_path / "x.ckpt")


def test_missing_file(tmp_path):
    with pytest.raises(CheckpointError, match="no checkpoint"):
        load_arrays(tmp_path / "absent.ckpt")


def test_bad_magic(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"NOTDMRN!" + b"\x00" * 16)
    with pytest.raises(CheckpointError, match="magic"):
        load_arrays(path)


def test_truncated_blob_names_record(tmp_path):
    path = tmp_path / "t.ckpt"
    save_arrays(sample_arrays(), path)
    raw = path.read_bytes()
    path.write_bytes(raw[:-20])
    with pytest.raises(CheckpointError, match="scalar|spans"):
        load_arrays(path)


def test_truncated_manifest(tmp_path):
    path = tmp_path / "t.ckpt"
    save_arrays({"w": np.zeros(4, dtype=np.float32)}, path)
    raw = path.read_bytes()
    path.write_bytes(raw[:12])
    with pytest.raises(CheckpointError, match="truncated"):
        load_arrays(path)


def test_corrupt_manifest_json(tmp_path):
    path = tmp_path / "t.ckpt"
    save_arrays({"w": np.zeros(4, dtype=np.float32)}, path)
    raw = bytearray(path.read_bytes())
    raw[16] = ord("!")  # inside the JSON text
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError):
        load_arrays(path)


def test_model_roundtrip_forward_bitwise(tmp_path):
    model = DmrnModel(TINY, seed=4)
    path = tmp_path / "m.ckpt"
    save_model(model, path)
    restored = load_model(path)
    x = np.random.default_rng(1).normal(size=(3, 32, 32)).astype(np.float32)
    np.testing.assert_array_equal(model.embed(x), restored.embed(x))
    # running statistics and all weights match exactly
    for (na, a), (nb, b) in zip(model.named_state(), restored.named_state()):
        assert na == nb
        np.testing.assert_array_equal(a, b)


def test_model_checkpoint_rewrite_identical(tmp_path):
    model = DmrnModel(TINY, seed=4)
    p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    save_model(model, p1)
    save_model(load_model(p1), p2)
    assert p1.read_bytes() == p2.read_bytes()


def test_load_model_rejects_non_model(tmp_path):
    path = tmp_path / "x.ckpt"
    save_arrays({"w": np.zeros(2, dtype=np.float32)}, path, meta={"kind": "other"})
    with pytest.raises(CheckpointError, match="not a model checkpoint"):
        load_model(path)
