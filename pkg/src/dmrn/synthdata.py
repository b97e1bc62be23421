"""Synthetic 5-class slice-image generator with study-level imbalance.

Each class is a procedural texture family on a [0, 1] grayscale grid:

* ``grating``: oriented sinusoidal grating;
* ``blob``: one smooth Gaussian bump;
* ``mixed_blob``: a bump broken by a two-level speckle mask;
* ``ring``: a soft elliptical annulus;
* ``speckle``: a hard-edged disc filled with uniform texture noise.

A study draws one latent parameter vector; its slices re-render that
latent with small per-slice jitter, so slices within a study resemble
each other more than slices across studies. The ``difficulty`` knob in
[0, 1] scales additive pixel noise and cross-class blending: 0 is
cleanly separable (a raw-pixel nearest-centroid rule is perfect), 1 is
heavily contaminated. Blend partners and strengths are drawn even at
difficulty 0, so datasets generated at different difficulties from the
same seed share all their random draws and degrade monotonically.

Everything derives from SynthSpec.seed through fixed-shape seed
sequences, so generation is byte-deterministic.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import Dataset, SliceRecord, StudyRecord, save_dataset

__all__ = [
    "ClassRecipe",
    "SynthSpec",
    "DEFAULT_RECIPES",
    "PRESETS",
    "get_preset",
    "scale_spec",
    "build_dataset",
    "generate",
]

FAMILIES = ("grating", "blob", "mixed_blob", "ring", "speckle")

BASE_NOISE = 0.02
NOISE_SPAN = 0.30  # additive noise sigma at difficulty 1 is BASE_NOISE + NOISE_SPAN
JITTER = 0.04  # per-slice latent jitter, as a fraction of each parameter's range


@dataclass(frozen=True)
class ClassRecipe:
    """A texture family plus the latent parameter ranges a study draws from."""

    name: str
    family: str
    ranges: tuple[tuple[str, float, float], ...]

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown family {self.family!r}, expected one of {FAMILIES}")

    def sample_latents(self, rng: np.random.Generator) -> dict[str, float]:
        return {key: float(rng.uniform(lo, hi)) for key, lo, hi in self.ranges}

    def jitter_latents(self, latents: dict[str, float], rng: np.random.Generator) -> dict[str, float]:
        out = {}
        for key, lo, hi in self.ranges:
            span = hi - lo
            value = latents[key] + JITTER * span * float(rng.standard_normal())
            out[key] = float(np.clip(value, lo, hi))
        return out


DEFAULT_RECIPES: tuple[ClassRecipe, ...] = (
    ClassRecipe("grating", "grating", (
        ("angle", 0.1, 1.4), ("freq", 2.5, 4.5), ("contrast", 0.55, 0.9),
        ("phase", 0.0, 6.28))),
    ClassRecipe("blob", "blob", (
        ("cx", -0.08, 0.08), ("cy", -0.08, 0.08), ("radius", 0.16, 0.24),
        ("amplitude", 0.8, 0.95))),
    ClassRecipe("mixed_blob", "mixed_blob", (
        ("cx", -0.1, 0.1), ("cy", -0.1, 0.1), ("radius", 0.38, 0.52),
        ("amplitude", 0.8, 0.95), ("density", 0.35, 0.5), ("low", 0.05, 0.15))),
    ClassRecipe("ring", "ring", (
        ("cx", -0.1, 0.1), ("cy", -0.1, 0.1), ("a", 0.35, 0.6), ("b", 0.35, 0.6),
        ("tilt", 0.0, 1.5), ("width", 0.06, 0.12), ("amplitude", 0.65, 0.95))),
    ClassRecipe("speckle", "speckle", (
        ("cx", -0.1, 0.1), ("cy", -0.1, 0.1), ("radius", 0.5, 0.7),
        ("floor", 0.55, 0.7), ("span", 0.25, 0.35))),
)


def _grid(size: int) -> tuple[np.ndarray, np.ndarray]:
    axis = np.linspace(-1.0, 1.0, size, dtype=np.float64)
    return np.meshgrid(axis, axis, indexing="xy")


def _render(family: str, latents: dict[str, float], size: int,
            rng: np.random.Generator) -> np.ndarray:
    """Noise-free rendering of one family; rng drives per-slice texture
    (speckle and mask patterns), not the latent parameters."""
    u, v = _grid(size)
    if family == "grating":
        wave = np.sin(2.0 * math.pi * latents["freq"]
                      * (u * math.cos(latents["angle"]) + v * math.sin(latents["angle"]))
                      + latents["phase"])
        img = 0.5 + 0.5 * latents["contrast"] * wave
    elif family == "blob":
        r2 = (u - latents["cx"]) ** 2 + (v - latents["cy"]) ** 2
        img = latents["amplitude"] * np.exp(-r2 / (2.0 * latents["radius"] ** 2))
    elif family == "mixed_blob":
        r2 = (u - latents["cx"]) ** 2 + (v - latents["cy"]) ** 2
        bump = latents["amplitude"] * np.exp(-r2 / (2.0 * latents["radius"] ** 2))
        mask = np.where(rng.random((size, size)) < latents["density"], 1.0, latents["low"])
        img = bump * mask
    elif family == "ring":
        cu, cv = u - latents["cx"], v - latents["cy"]
        tilt = latents["tilt"]
        ru = cu * math.cos(tilt) + cv * math.sin(tilt)
        rv = -cu * math.sin(tilt) + cv * math.cos(tilt)
        d = np.sqrt((ru / latents["a"]) ** 2 + (rv / latents["b"]) ** 2)
        img = latents["amplitude"] * np.exp(-((d - 1.0) ** 2) / (2.0 * latents["width"] ** 2))
    elif family == "speckle":
        r2 = (u - latents["cx"]) ** 2 + (v - latents["cy"]) ** 2
        disc = r2 <= latents["radius"] ** 2
        texture = rng.uniform(latents["floor"], latents["floor"] + latents["span"],
                              (size, size))
        img = np.where(disc, texture, 0.0)
    else:  # pragma: no cover - recipes are validated at construction
        raise ValueError(f"unknown family {family!r}")
    return img


@dataclass(frozen=True)
class SynthSpec:
    """What to generate: per-class study counts, per-class slice totals,
    the slices-per-study range, and the difficulty knob."""

    image_size: int = 64
    studies_per_class: tuple[int, ...] = (54, 35, 58, 33, 49)
    slice_targets: tuple[int, ...] = (1707, 245, 1047, 350, 716)
    slices_per_study: tuple[int, int] = (3, 40)
    difficulty: float = 0.35
    seed: int = 0
    recipes: tuple[ClassRecipe, ...] = DEFAULT_RECIPES

    def __post_init__(self):
        if self.image_size < 32 or self.image_size % 32 != 0:
            raise ValueError(f"image_size must be a positive multiple of 32, got {self.image_size}")
        if len(self.studies_per_class) != len(self.recipes):
            raise ValueError(f"{len(self.studies_per_class)} study counts for "
                             f"{len(self.recipes)} classes")
        if len(self.slice_targets) != len(self.recipes):
            raise ValueError(f"{len(self.slice_targets)} slice targets for "
                             f"{len(self.recipes)} classes")
        if any(n < 1 for n in self.studies_per_class):
            raise ValueError(f"every class needs >= 1 study, got {self.studies_per_class}")
        lo, hi = self.slices_per_study
        if not 1 <= lo <= hi:
            raise ValueError(f"bad slices_per_study range {self.slices_per_study}")
        for n, target, recipe in zip(self.studies_per_class, self.slice_targets, self.recipes):
            if not n * lo <= target <= n * hi:
                raise ValueError(
                    f"class {recipe.name!r}: slice target {target} infeasible for "
                    f"{n} studies of {lo}..{hi} slices")
        if not 0.0 <= self.difficulty <= 1.0:
            raise ValueError(f"difficulty must be in [0, 1], got {self.difficulty}")
        object.__setattr__(self, "studies_per_class", tuple(int(n) for n in self.studies_per_class))
        object.__setattr__(self, "slice_targets", tuple(int(t) for t in self.slice_targets))
        object.__setattr__(self, "slices_per_study", (int(lo), int(hi)))

    @property
    def num_classes(self) -> int:
        return len(self.recipes)

    def class_names(self) -> list[str]:
        return [r.name for r in self.recipes]

    def to_dict(self) -> dict:
        return {
            "image_size": self.image_size,
            "studies_per_class": list(self.studies_per_class),
            "slice_targets": list(self.slice_targets),
            "slices_per_study": list(self.slices_per_study),
            "difficulty": self.difficulty,
            "seed": self.seed,
            "classes": self.class_names(),
        }


def _round_half_up(value: float) -> int:
    return int(math.floor(value + 0.5))


def scale_spec(spec: SynthSpec, factor: float) -> SynthSpec:
    """Shrink or grow per-class counts, rounding half up, keeping the
    class ratio shape. Slice targets are clipped into the feasible range
    implied by the scaled study counts."""
    if factor <= 0:
        raise ValueError(f"scale factor must be positive, got {factor}")
    lo, hi = spec.slices_per_study
    studies = tuple(max(1, _round_half_up(n * factor)) for n in spec.studies_per_class)
    targets = tuple(
        min(n * hi, max(n * lo, _round_half_up(t * factor)))
        for n, t in zip(studies, spec.slice_targets))
    return replace(spec, studies_per_class=studies, slice_targets=targets)


_TABLE1 = SynthSpec()

PRESETS: dict[str, SynthSpec] = {
    "table1": _TABLE1,
    "table1-small": scale_spec(_TABLE1, 0.2),
}


def get_preset(name: str) -> SynthSpec:
    try:
        return PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown preset {name!r}; known: {sorted(PRESETS)}") from None


def _slice_counts(n_studies: int, target: int, lo: int, hi: int,
                  rng: np.random.Generator) -> list[int]:
    """Per-study slice counts in [lo, hi] that sum exactly to target."""
    counts = [int(rng.integers(lo, hi + 1)) for _ in range(n_studies)]
    delta = target - sum(counts)
    while delta != 0:
        i = int(rng.integers(n_studies))
        if delta > 0 and counts[i] < hi:
            counts[i] += 1
            delta -= 1
        elif delta < 0 and counts[i] > lo:
            counts[i] -= 1
            delta += 1
    return counts


def build_dataset(spec: SynthSpec) -> Dataset:
    """Render the whole dataset in memory."""
    class_names = spec.class_names()
    studies: list[StudyRecord] = []
    for class_id, recipe in enumerate(spec.recipes):
        n_studies = spec.studies_per_class[class_id]
        lo, hi = spec.slices_per_study
        counts_rng = np.random.default_rng([spec.seed, 1, class_id])
        counts = _slice_counts(n_studies, spec.slice_targets[class_id], lo, hi, counts_rng)
        for study_idx in range(n_studies):
            study_rng = np.random.default_rng([spec.seed, 2, class_id, study_idx])
            latents = recipe.sample_latents(study_rng)
            # Contaminant choices are drawn unconditionally so the same
            # seed yields aligned draws at every difficulty.
            other_ids = [c for c in range(spec.num_classes) if c != class_id]
            contaminant_id = other_ids[int(study_rng.integers(len(other_ids)))]
            contaminant = spec.recipes[contaminant_id]
            contaminant_latents = contaminant.sample_latents(study_rng)
            blend_strength = float(study_rng.uniform(0.3, 0.7))

            study_id = f"c{class_id}s{study_idx:03d}"
            study = StudyRecord(study_id=study_id, class_id=class_id)
            for slice_idx in range(counts[study_idx]):
                slice_rng = np.random.default_rng(
                    [spec.seed, 3, class_id, study_idx, slice_idx])
                own = _render(recipe.family,
                              recipe.jitter_latents(latents, slice_rng),
                              spec.image_size, slice_rng)
                other = _render(contaminant.family,
                                contaminant.jitter_latents(contaminant_latents, slice_rng),
                                spec.image_size, slice_rng)
                weight = spec.difficulty * blend_strength
                img = (1.0 - weight) * own + weight * other
                sigma = BASE_NOISE + NOISE_SPAN * spec.difficulty
                img = img + sigma * slice_rng.standard_normal((spec.image_size, spec.image_size))
                pixels = np.clip(img, 0.0, 1.0).astype(np.float32)
                study.slices.append(SliceRecord(
                    slice_id=f"{study_id}x{slice_idx:02d}", study_id=study_id,
                    class_id=class_id, pixels=pixels))
            studies.append(study)
    dataset = Dataset(class_names=class_names, studies=studies,
                      image_size=spec.image_size, meta={"generator": spec.to_dict()})
    dataset.validate()
    return dataset


def generate(spec: SynthSpec, root: Path | str) -> Dataset:
    """Render and write a dataset directory; returns the in-memory copy."""
    dataset = build_dataset(spec)
    save_dataset(dataset, root)
    return dataset
