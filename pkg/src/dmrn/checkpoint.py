"""Binary checkpoint format: JSON manifest + flat little-endian records.

Layout: 8-byte magic, u64-le manifest length, UTF-8 JSON manifest, then
the raw record bytes back to back. The manifest lists name, shape,
dtype and byte offset (relative to the blob) per record in write
order, plus an optional ``meta`` dict for model reconstruction. Writing
the same arrays twice gives byte-identical files.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

__all__ = ["CheckpointError", "save_arrays", "load_arrays", "save_model", "load_model"]

MAGIC = b"DMRNCKP1"
_HEADER = struct.Struct("<Q")
_DTYPES = {"<f4": np.dtype("<f4"), "<f8": np.dtype("<f8")}


class CheckpointError(Exception):
    """Checkpoint file is missing, corrupt or inconsistent."""


def save_arrays(arrays: Mapping[str, np.ndarray], path: Path | str,
                meta: dict | None = None) -> None:
    """Write named arrays in iteration order. Only float32/float64."""
    records = []
    blobs = []
    offset = 0
    for name, array in arrays.items():
        # asarray, not ascontiguousarray: the latter promotes 0-d to 1-d,
        # and tobytes() already serializes any layout in C order.
        arr = np.asarray(array)
        if arr.dtype == np.float32:
            tag = "<f4"
        elif arr.dtype == np.float64:
            tag = "<f8"
        else:
            raise CheckpointError(f"record {name!r}: unsupported dtype {arr.dtype}")
        raw = arr.astype(np.dtype(tag), copy=False).tobytes()
        records.append({"name": name, "shape": list(arr.shape), "dtype": tag,
                        "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    manifest = {"records": records, "meta": meta or {}}
    manifest_bytes = json.dumps(manifest, sort_keys=True,
                                separators=(",", ":")).encode("utf-8")
    path = Path(path)
    with path.open("wb") as fh:
        fh.write(MAGIC)
        fh.write(_HEADER.pack(len(manifest_bytes)))
        fh.write(manifest_bytes)
        for raw in blobs:
            fh.write(raw)


def load_arrays(path: Path | str) -> tuple[dict[str, np.ndarray], dict]:
    """Read back (arrays in manifest order, meta). Validates sizes."""
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"no checkpoint at {path}")
    raw = path.read_bytes()
    if raw[:len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:len(MAGIC)]!r}")
    header_end = len(MAGIC) + _HEADER.size
    if len(raw) < header_end:
        raise CheckpointError(f"{path}: truncated header")
    (manifest_len,) = _HEADER.unpack(raw[len(MAGIC):header_end])
    manifest_bytes = raw[header_end:header_end + manifest_len]
    if len(manifest_bytes) != manifest_len:
        raise CheckpointError(f"{path}: truncated manifest")
    try:
        manifest = json.loads(manifest_bytes.decode("utf-8"))
        records = manifest["records"]
        meta = manifest.get("meta", {})
    except (json.JSONDecodeError, UnicodeDecodeError, KeyError, TypeError) as exc:
        raise CheckpointError(f"{path}: bad manifest ({exc})") from exc
    blob = raw[header_end + manifest_len:]
    arrays: dict[str, np.ndarray] = {}
    for rec in records:
        try:
            name = rec["name"]
            shape = tuple(int(v) for v in rec["shape"])
            dtype = _DTYPES[rec["dtype"]]
            offset = int(rec["offset"])
            nbytes = int(rec["nbytes"])
        except (KeyError, TypeError, ValueError) as exc:
            raise CheckpointError(f"{path}: malformed record ({exc})") from exc
        if offset < 0 or offset + nbytes > len(blob):
            raise CheckpointError(
                f"{path}: record {name!r} spans [{offset}, {offset + nbytes}) "
                f"outside blob of {len(blob)} bytes")
        expected = int(np.prod(shape)) * dtype.itemsize
        if nbytes != expected:
            raise CheckpointError(f"{path}: record {name!r} has {nbytes} bytes, "
                                  f"shape {shape} needs {expected}")
        if name in arrays:
            raise CheckpointError(f"{path}: duplicate record {name!r}")
        arrays[name] = np.frombuffer(blob, dtype=dtype, count=int(np.prod(shape)),
                                     offset=offset).reshape(shape).copy()
    return arrays, meta


def save_model(model, path: Path | str) -> None:
    """Persist a model's full state plus the config needed to rebuild it."""
    state = dict(model.named_state())
    meta = {"kind": "dmrn-model", "backbone": model.config.to_dict(), "seed": model.seed}
    save_arrays(state, path, meta=meta)


def load_model(path: Path | str):
    """Rebuild a model from a checkpoint written by save_model."""
    from .backbone import BackboneConfig
    from .model import DmrnModel

    arrays, meta = load_arrays(path)
    if meta.get("kind") != "dmrn-model":
        raise CheckpointError(f"{path}: not a model checkpoint (kind={meta.get('kind')!r})")
    try:
        config = BackboneConfig.from_dict(meta["backbone"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"{path}: bad backbone config in meta ({exc})") from exc
    model = DmrnModel(config, seed=int(meta.get("seed", 0)))
    try:
        model.load_state(arrays)
    except ValueError as exc:
        raise CheckpointError(f"{path}: {exc}") from exc
    return model
