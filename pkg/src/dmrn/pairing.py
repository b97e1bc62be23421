"""Epoch-wise pair sampling for contrastive training.

Training never enumerates all f*(f-1)/2 slice pairs; each epoch draws a
fresh pseudo-random set of f pairs (one anchor pass over the slices).
Two partner policies:

* ``uniform``: the partner is any other slice, uniformly. Pair classes
  then mirror the slice imbalance.
* ``class_balanced`` (default): the partner's class is drawn uniformly
  over all classes first, then a slice within it, so rare classes
  contribute to pairs as often as common ones.

Sampling for (seed, epoch) is deterministic; successive epochs reseed
with the epoch index so they draw different pairs.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import SliceRecord

__all__ = [
    "SamplerConfig",
    "TrainingPair",
    "SAME_CLASS",
    "DIFFERENT_CLASS",
    "exhaustive_pair_count",
    "sample_pairs",
    "export_pairs_csv",
]

SAME_CLASS = 0
DIFFERENT_CLASS = 1

MODES = ("uniform", "class_balanced")


@dataclass(frozen=True)
class SamplerConfig:
    mode: str = "class_balanced"
    pairs_per_epoch: int | None = None  # None: one pair per slice
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"sampler mode must be one of {MODES}, got {self.mode!r}")
        if self.pairs_per_epoch is not None and self.pairs_per_epoch < 1:
            raise ValueError(f"pairs_per_epoch must be >= 1, got {self.pairs_per_epoch}")

    def to_dict(self) -> dict:
        return {"mode": self.mode, "pairs_per_epoch": self.pairs_per_epoch, "seed": self.seed}


@dataclass(eq=False)
class TrainingPair:
    a: SliceRecord
    b: SliceRecord
    label: int  # SAME_CLASS or DIFFERENT_CLASS

    def __post_init__(self):
        expected = SAME_CLASS if self.a.class_id == self.b.class_id else DIFFERENT_CLASS
        if self.label != expected:
            raise ValueError(f"pair label {self.label} contradicts classes "
                             f"{self.a.class_id} and {self.b.class_id}")


def exhaustive_pair_count(num_slices: int) -> int:
    """f*(f-1)/2: the unordered pair count an epoch deliberately avoids."""
    if num_slices < 0:
        raise ValueError(f"num_slices must be >= 0, got {num_slices}")
    return num_slices * (num_slices - 1) // 2


def _make_pair(a: SliceRecord, b: SliceRecord) -> TrainingPair:
    label = SAME_CLASS if a.class_id == b.class_id else DIFFERENT_CLASS
    return TrainingPair(a=a, b=b, label=label)


def sample_pairs(slices: Sequence[SliceRecord], config: SamplerConfig,
                 epoch: int = 0) -> list[TrainingPair]:
    """One epoch's worth of pairs; every anchor is distinct from its partner.

    With pairs_per_epoch unset the anchors are exactly the slices in a
    shuffled order; otherwise a shuffled order is cycled or truncated.
    """
    if len(slices) < 2:
        raise ValueError(f"need at least 2 slices to form pairs, got {len(slices)}")
    rng = np.random.default_rng([config.seed, epoch])
    count = config.pairs_per_epoch if config.pairs_per_epoch is not None else len(slices)
    order = rng.permutation(len(slices))
    anchors = [int(order[i % len(slices)]) for i in range(count)]

    by_class: dict[int, list[int]] = {}
    for i, sl in enumerate(slices):
        by_class.setdefault(sl.class_id, []).append(i)
    class_ids = sorted(by_class)

    pairs = []
    for anchor in anchors:
        if config.mode == "uniform":
            partner = int(rng.integers(len(slices) - 1))
            if partner >= anchor:
                partner += 1
        else:
            anchor_class = slices[anchor].class_id
            while True:
                cls = class_ids[int(rng.integers(len(class_ids)))]
                pool = by_class[cls]
                # The anchor cannot partner itself; a singleton class
                # containing only the anchor has no eligible slice.
                if cls == anchor_class and len(pool) == 1:
                    continue
                break
            if cls == anchor_class:
                partner = anchor
                while partner == anchor:
                    partner = pool[int(rng.integers(len(pool)))]
            else:
                partner = pool[int(rng.integers(len(pool)))]
        pairs.append(_make_pair(slices[anchor], slices[partner]))
    return pairs


def export_pairs_csv(pairs: Sequence[TrainingPair], path: Path | str) -> None:
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["anchor_id", "partner_id", "anchor_class", "partner_class", "label"])
        for pair in pairs:
            writer.writerow([pair.a.slice_id, pair.b.slice_id,
                             pair.a.class_id, pair.b.class_id, pair.label])
