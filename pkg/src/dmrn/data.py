"""Dataset model and on-disk format.

A dataset is a directory with a ``manifest.json`` plus one raw file per
slice. The manifest lists classes and studies; each study owns its
slices with class identity at the study level (every slice inherits the
study's class). Slice files are raw little-endian float32, C order,
shape recorded in the manifest.

PGM images (binary P5 or ascii P2) can be imported from a
class/study/slice directory tree and saved into this format.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

__all__ = [
    "DataError",
    "SliceRecord",
    "StudyRecord",
    "Dataset",
    "load_dataset",
    "save_dataset",
    "dataset_fingerprint",
    "read_pgm",
    "import_pgm_tree",
]

MANIFEST_NAME = "manifest.json"
FORMAT_NAME = "dmrn-dataset"
FORMAT_VERSION = 1


class DataError(Exception):
    """A dataset on disk is missing, malformed or inconsistent."""


@dataclass(eq=False)
class SliceRecord:
    slice_id: str
    study_id: str
    class_id: int
    pixels: np.ndarray  # (H, W) float32

    @property
    def shape(self) -> tuple[int, ...]:
        return self.pixels.shape


@dataclass(eq=False)
class StudyRecord:
    study_id: str
    class_id: int
    slices: list[SliceRecord] = field(default_factory=list)

    @property
    def num_slices(self) -> int:
        return len(self.slices)


@dataclass(eq=False)
class Dataset:
    class_names: list[str]
    studies: list[StudyRecord]
    image_size: int
    meta: dict = field(default_factory=dict)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def all_slices(self) -> list[SliceRecord]:
        return [sl for study in self.studies for sl in study.slices]

    @property
    def num_slices(self) -> int:
        return sum(s.num_slices for s in self.studies)

    def study_counts_per_class(self) -> list[int]:
        counts = [0] * self.num_classes
        for study in self.studies:
            counts[study.class_id] += 1
        return counts

    def slice_counts_per_class(self) -> list[int]:
        counts = [0] * self.num_classes
        for study in self.studies:
            counts[study.class_id] += study.num_slices
        return counts

    def validate(self) -> None:
        if not self.studies:
            raise DataError("dataset has no studies")
        seen_ids: set[str] = set()
        for study in self.studies:
            if study.study_id in seen_ids:
                raise DataError(f"duplicate study id {study.study_id!r}")
            seen_ids.add(study.study_id)
            if not 0 <= study.class_id < self.num_classes:
                raise DataError(f"study {study.study_id!r}: class {study.class_id} "
                                f"out of range for {self.num_classes} classes")
            if not study.slices:
                raise DataError(f"study {study.study_id!r} has no slices")
            for sl in study.slices:
                if sl.pixels.shape != (self.image_size, self.image_size):
                    raise DataError(
                        f"slice {sl.slice_id!r}: shape {sl.pixels.shape} != "
                        f"({self.image_size}, {self.image_size})")
                if sl.class_id != study.class_id:
                    raise DataError(f"slice {sl.slice_id!r} class differs from its study")


def _slice_relpath(study_id: str, slice_id: str) -> str:
    return f"{study_id}/{slice_id}.f32"


def save_dataset(dataset: Dataset, root: Path | str) -> Path:
    """Write manifest + raw slice files. Byte-deterministic for equal content."""
    dataset.validate()
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    studies_json = []
    for study in dataset.studies:
        slices_json = []
        for sl in study.slices:
            rel = _slice_relpath(study.study_id, sl.slice_id)
            path = root / rel
            path.parent.mkdir(parents=True, exist_ok=True)
            data = np.ascontiguousarray(sl.pixels, dtype="<f4")
            path.write_bytes(data.tobytes())
            slices_json.append({"id": sl.slice_id, "file": rel,
                                "shape": list(sl.pixels.shape)})
        studies_json.append({"id": study.study_id, "class": study.class_id,
                             "slices": slices_json})
    manifest = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "image_size": dataset.image_size,
        "classes": dataset.class_names,
        "meta": dataset.meta,
        "studies": studies_json,
    }
    # Write then rename so a crash cannot leave a truncated manifest
    # that parses as valid-but-short.
    tmp = root / (MANIFEST_NAME + ".tmp")
    tmp.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    os.replace(tmp, root / MANIFEST_NAME)
    return root


def load_dataset(root: Path | str) -> Dataset:
    root = Path(root)
    manifest_path = root / MANIFEST_NAME
    if not manifest_path.is_file():
        raise DataError(f"no {MANIFEST_NAME} in {root}")
    try:
        manifest = json.loads(manifest_path.read_text())
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise DataError(f"{manifest_path}: not valid JSON ({exc})") from exc
    if manifest.get("format") != FORMAT_NAME:
        raise DataError(f"{manifest_path}: unknown format {manifest.get('format')!r}")
    try:
        image_size = int(manifest["image_size"])
        class_names = list(manifest["classes"])
        studies_json = manifest["studies"]
    except (KeyError, TypeError) as exc:
        raise DataError(f"{manifest_path}: missing field ({exc})") from exc

    studies = []
    for sj in studies_json:
        try:
            study = StudyRecord(study_id=str(sj["id"]), class_id=int(sj["class"]))
            slices_json = sj["slices"]
        except (KeyError, TypeError) as exc:
            raise DataError(f"{manifest_path}: malformed study entry ({exc})") from exc
        for lj in slices_json:
            try:
                rel = str(lj["file"])
                shape = tuple(int(v) for v in lj["shape"])
                slice_id = str(lj["id"])
            except (KeyError, TypeError, ValueError) as exc:
                raise DataError(f"{manifest_path}: malformed slice entry ({exc})") from exc
            path = root / rel
            if not path.is_file():
                raise DataError(f"slice file missing: {path}")
            raw = path.read_bytes()
            expected = int(np.prod(shape)) * 4
            if len(raw) != expected:
                raise DataError(f"{path}: {len(raw)} bytes, expected {expected} "
                                f"for shape {shape}")
            pixels = np.frombuffer(raw, dtype="<f4").reshape(shape)
            study.slices.append(SliceRecord(slice_id=slice_id, study_id=study.study_id,
                                            class_id=study.class_id,
                                            pixels=pixels.astype(np.float32)))
        studies.append(study)
    dataset = Dataset(class_names=class_names, studies=studies,
                      image_size=image_size, meta=manifest.get("meta", {}))
    try:
        dataset.validate()
    except DataError as exc:
        raise DataError(f"{root}: {exc}") from exc
    return dataset


def dataset_fingerprint(root: Path | str) -> str:
    """SHA-256 over the manifest and every slice file, order-independent
    of filesystem listing (paths come from the manifest)."""
    root = Path(root)
    manifest_path = root / MANIFEST_NAME
    if not manifest_path.is_file():
        raise DataError(f"no {MANIFEST_NAME} in {root}")
    digest = hashlib.sha256()
    digest.update(manifest_path.read_bytes())
    try:
        manifest = json.loads(manifest_path.read_text())
        files = sorted(str(lj["file"]) for sj in manifest["studies"] for lj in sj["slices"])
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise DataError(f"{manifest_path}: cannot list slice files ({exc})") from exc
    for rel in files:
        path = root / rel
        if not path.is_file():
            raise DataError(f"slice file missing: {path}")
        digest.update(rel.encode())
        digest.update(path.read_bytes())
    return digest.hexdigest()


def _read_pgm_tokens(raw: bytes, count: int) -> tuple[list[int], int]:
    """First `count` whitespace-separated integer tokens in a PGM
    header, skipping # comments; returns tokens and the byte offset
    just past the final token's trailing whitespace byte."""
    tokens: list[int] = []
    i = 0
    current = b""
    while i < len(raw) and len(tokens) < count:
        ch = raw[i:i + 1]
        if ch == b"#":
            while i < len(raw) and raw[i:i + 1] not in (b"\n", b"\r"):
                i += 1
        elif ch.isspace():
            if current:
                tokens.append(int(current))
                current = b""
            i += 1
            if len(tokens) == count:
                return tokens, i
        else:
            if not ch.isdigit():
                raise DataError(f"unexpected byte {ch!r} in PGM header")
            current += ch
            i += 1
    if current and len(tokens) < count:
        tokens.append(int(current))
    if len(tokens) < count:
        raise DataError("truncated PGM header")
    return tokens, i


def read_pgm(path: Path | str) -> np.ndarray:
    """Read a PGM (P5 binary or P2 ascii) as float32 scaled to [0, 1]."""
    path = Path(path)
    raw = path.read_bytes()
    if raw[:2] not in (b"P5", b"P2"):
        raise DataError(f"{path}: not a PGM (magic {raw[:2]!r})")
    binary = raw[:2] == b"P5"
    try:
        (width, height, maxval), offset = _read_pgm_tokens(raw[2:], 3)
    except DataError as exc:
        raise DataError(f"{path}: {exc}") from exc
    offset += 2
    if width < 1 or height < 1 or not 0 < maxval < 65536:
        raise DataError(f"{path}: bad PGM dimensions {width}x{height} maxval {maxval}")
    if binary:
        dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
        need = width * height * dtype.itemsize
        body = raw[offset:offset + need]
        if len(body) < need:
            raise DataError(f"{path}: truncated PGM body ({len(body)} < {need} bytes)")
        values = np.frombuffer(body, dtype=dtype).astype(np.float32)
    else:
        try:
            flat = [int(t) for t in raw[offset:].split()]
        except ValueError as exc:
            raise DataError(f"{path}: bad ascii PGM body ({exc})") from exc
        if len(flat) < width * height:
            raise DataError(f"{path}: truncated ascii PGM body")
        values = np.asarray(flat[:width * height], dtype=np.float32)
    return (values / maxval).reshape(height, width)


def import_pgm_tree(src_root: Path | str) -> Dataset:
    """Build a dataset from ``<class>/<study>/<slice>.pgm`` directories.

    Class and study directories sort lexicographically to fix ids; all
    images must be square and share one size.
    """
    src_root = Path(src_root)
    if not src_root.is_dir():
        raise DataError(f"{src_root} is not a directory")
    class_dirs = sorted(p for p in src_root.iterdir() if p.is_dir())
    if not class_dirs:
        raise DataError(f"{src_root}: no class directories")
    class_names = [p.name for p in class_dirs]
    studies: list[StudyRecord] = []
    size: int | None = None
    for class_id, class_dir in enumerate(class_dirs):
        study_dirs = sorted(p for p in class_dir.iterdir() if p.is_dir())
        if not study_dirs:
            raise DataError(f"{class_dir}: no study directories")
        for study_dir in study_dirs:
            study_id = f"{class_dir.name}_{study_dir.name}"
            study = StudyRecord(study_id=study_id, class_id=class_id)
            for i, pgm in enumerate(sorted(study_dir.glob("*.pgm"))):
                pixels = read_pgm(pgm)
                if pixels.shape[0] != pixels.shape[1]:
                    raise DataError(f"{pgm}: image is {pixels.shape}, need square")
                if size is None:
                    size = pixels.shape[0]
                elif pixels.shape[0] != size:
                    raise DataError(f"{pgm}: size {pixels.shape[0]} != first seen {size}")
                study.slices.append(SliceRecord(
                    slice_id=f"{study_id}_{i:03d}", study_id=study_id,
                    class_id=class_id, pixels=pixels))
            if not study.slices:
                raise DataError(f"{study_dir}: no .pgm files")
            studies.append(study)
    dataset = Dataset(class_names=class_names, studies=studies, image_size=int(size),
                      meta={"source": "pgm-import"})
    dataset.validate()
    return dataset
