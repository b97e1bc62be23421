"""Multi-scale contrastive loss over pairs of stage embeddings.

For a pair with embeddings x1, x2 at one stage, distance
D = ||x1 - x2||_2 and label y (0 = same class, 1 = different class):

    loss = (1 - y) * D^2 / 2  +  y * max(0, margin - D)^2 / 2

The total objective sums this over every configured stage and every
pair in the batch (a raw sum, not a mean; logging may divide by the
pair count for readability, the optimizer sees the sum). Restricting
``stages_used`` to (4,) gives the single-scale ablation.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .tensor import ShapeError, Tensor, l2_distance, relu

__all__ = ["LossConfig", "stage_distance", "pair_loss", "total_loss", "term_count"]

ALL_STAGES = (1, 2, 3, 4)


@dataclass(frozen=True)
class LossConfig:
    margin: float = 1.0
    stages_used: tuple[int, ...] = ALL_STAGES
    stage_weights: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.margin <= 0:
            raise ValueError(f"margin must be positive, got {self.margin}")
        stages = tuple(int(s) for s in self.stages_used)
        if not stages:
            raise ValueError("stages_used must not be empty")
        if sorted(set(stages)) != list(stages):
            raise ValueError(f"stages_used must be strictly increasing, got {stages}")
        if any(s not in ALL_STAGES for s in stages):
            raise ValueError(f"stages_used must be a subset of {ALL_STAGES}, got {stages}")
        object.__setattr__(self, "stages_used", stages)
        if self.stage_weights is not None:
            weights = tuple(float(w) for w in self.stage_weights)
            if len(weights) != len(stages):
                raise ValueError(
                    f"{len(weights)} stage weights for {len(stages)} stages")
            if any(w <= 0 for w in weights):
                raise ValueError(f"stage weights must be positive, got {weights}")
            object.__setattr__(self, "stage_weights", weights)

    def weights(self) -> tuple[float, ...]:
        if self.stage_weights is None:
            return tuple(1.0 for _ in self.stages_used)
        return self.stage_weights

    def to_dict(self) -> dict:
        return {
            "margin": self.margin,
            "stages_used": list(self.stages_used),
            "stage_weights": None if self.stage_weights is None else list(self.stage_weights),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LossConfig":
        return cls(
            margin=float(d.get("margin", 1.0)),
            stages_used=tuple(d.get("stages_used", ALL_STAGES)),
            stage_weights=None if d.get("stage_weights") is None else tuple(d["stage_weights"]),
        )


def stage_distance(x1: Tensor, x2: Tensor) -> Tensor:
    """Per-pair Euclidean distance between two embedding batches (N, D) -> (N,)."""
    return l2_distance(x1, x2)


def pair_loss(distance: Tensor, labels: np.ndarray, margin: float = 1.0) -> Tensor:
    """Contrastive loss per pair given distances (N,) and 0/1 labels (N,).

    Label 0 (same class) pulls: D^2 / 2. Label 1 (different class)
    pushes until the margin: max(0, margin - D)^2 / 2, zero beyond it.
    """
    if margin <= 0:
        raise ValueError(f"margin must be positive, got {margin}")
    y = np.asarray(labels, dtype=distance.dtype)
    if y.shape != distance.shape:
        raise ShapeError(f"pair_loss: labels shape {y.shape} != distances shape {distance.shape}")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("pair labels must be 0 (same class) or 1 (different class)")
    pull = distance * distance * (0.5 * (1.0 - y))
    gap = relu(margin - distance)
    push = gap * gap * (0.5 * y)
    return pull + push


def total_loss(embeddings_a: Sequence[Tensor], embeddings_b: Sequence[Tensor],
               labels: np.ndarray, config: LossConfig) -> Tensor:
    """Scalar training objective: weighted sum of per-stage pair losses.

    embeddings_a/b are the per-stage batches from the two branches,
    shallowest first, indexed by stage number via config.stages_used.
    """
    needed = max(config.stages_used)
    if len(embeddings_a) < needed or len(embeddings_b) < needed:
        raise ValueError(
            f"total_loss: need embeddings for stage {needed}, "
            f"got {len(embeddings_a)} and {len(embeddings_b)} stages")
    total: Tensor | None = None
    for stage, weight in zip(config.stages_used, config.weights()):
        a, b = embeddings_a[stage - 1], embeddings_b[stage - 1]
        if a is None or b is None:
            raise ValueError(f"total_loss: stage {stage} embedding missing")
        stage_sum = pair_loss(stage_distance(a, b), labels, config.margin).sum()
        weighted = stage_sum * weight if weight != 1.0 else stage_sum
        total = weighted if total is None else total + weighted
    return total


def term_count(config: LossConfig, num_pairs: int) -> int:
    """Number of additive loss terms: one per (configured stage, pair)."""
    if num_pairs < 0:
        raise ValueError(f"num_pairs must be >= 0, got {num_pairs}")
    return len(config.stages_used) * num_pairs
