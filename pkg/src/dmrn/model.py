"""The full twin-branch model: shared backbone plus one pooling unit
per stage.

Weight sharing is structural, not copied: both branches of a pair run
through this single object, so there is exactly one parameter set and
gradients from the two branches accumulate into it.
"""

from __future__ import annotations

from typing import Iterator, Sequence

import numpy as np

from .backbone import Backbone, BackboneConfig, NUM_STAGES
from .layers import ParamItem, StateItem
from .rpu import ResidualPoolingUnit, embedding_dim
from .tensor import Tensor, no_grad

__all__ = ["DmrnModel"]


class DmrnModel:

    def __init__(self, config: BackboneConfig | None = None, seed: int = 0):
        self.config = config if config is not None else BackboneConfig()
        self.seed = seed
        rng = np.random.default_rng(seed)
        self.backbone = Backbone(self.config, rng)
        self.pooling_units = [ResidualPoolingUnit(c, rng) for c in self.config.stage_channels]

    @property
    def embedding_dim(self) -> int:
        """Width of the final-stage embedding, the one the classifier uses."""
        return embedding_dim(self.config.stage_channels[-1])

    @property
    def stage_dims(self) -> tuple[int, ...]:
        return tuple(embedding_dim(c) for c in self.config.stage_channels)

    def stage_embeddings(self, x: Tensor, training: bool = False) -> list[Tensor]:
        """Per-stage embeddings for a batch (N, C, S, S), shallowest first."""
        features = self.backbone.forward_stages(x, training)
        return [unit(f) for unit, f in zip(self.pooling_units, features)]

    def embed(self, pixels: np.ndarray) -> np.ndarray:
        """Final-stage embeddings for raw pixel data, eval mode, no graph.

        Accepts (N, C, S, S), (N, S, S) or a single (S, S) slice; returns
        (N, embedding_dim) or (embedding_dim,) to match.
        """
        arr = np.asarray(pixels)
        single = arr.ndim == 2
        if single:
            arr = arr[None]
        if arr.ndim == 3:
            arr = arr[:, None]
        with no_grad():
            batch = Tensor(arr)
            out = self.stage_embeddings(batch, training=False)[-1].data
        return out[0] if single else out

    def trainable(self) -> Iterator[ParamItem]:
        yield from self.backbone.trainable("backbone")
        for i, unit in enumerate(self.pooling_units, start=1):
            yield from unit.trainable(f"rpu{i}")

    def named_state(self) -> Iterator[StateItem]:
        yield from self.backbone.named_state("backbone")
        for i, unit in enumerate(self.pooling_units, start=1):
            yield from unit.named_state(f"rpu{i}")

    def zero_grads(self) -> None:
        for _, tensor in self.trainable():
            tensor.zero_grad()

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        """Copy saved arrays into this model's tensors and buffers in place."""
        own = dict(self.named_state())
        missing = sorted(set(own) - set(arrays))
        extra = sorted(set(arrays) - set(own))
        if missing or extra:
            raise ValueError(f"state mismatch: missing {missing[:3]}, unexpected {extra[:3]}")
        for name, target in own.items():
            value = arrays[name]
            if value.shape != target.shape:
                raise ValueError(f"state entry {name}: shape {value.shape} != {target.shape}")
            target[...] = value

    def num_parameters(self) -> int:
        return sum(t.size for _, t in self.trainable())
