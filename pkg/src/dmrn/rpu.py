"""Residual pooling unit: one per backbone stage.

Two 3x3 convolutions (relu between them) refine the stage features, the
input is added back, a global average pool collapses the map to one
value per channel, and a fully connected layer compresses channels to a
quarter (floor, at least 1). No batch norm inside, and no activation
after the fully connected layer, so the embedding is unbounded.
"""

from __future__ import annotations

from typing import Iterator

import numpy as np

from .layers import Conv2d, Linear, ParamItem, StateItem
from .tensor import Tensor, adaptive_avg_pool, relu

__all__ = ["ResidualPoolingUnit", "embedding_dim"]


def embedding_dim(channels: int) -> int:
    """Output width for a stage with the given channel count."""
    return max(1, channels // 4)


class ResidualPoolingUnit:

    def __init__(self, channels: int, rng: np.random.Generator):
        self.channels = channels
        self.conv1 = Conv2d(channels, channels, rng, bias=True)
        self.conv2 = Conv2d(channels, channels, rng, bias=True)
        self.fc = Linear(channels, embedding_dim(channels), rng)

    @property
    def output_dim(self) -> int:
        return embedding_dim(self.channels)

    def forward(self, x: Tensor) -> Tensor:
        """(N, C, H, W) feature map -> (N, floor(C/4)) embedding."""
        h = self.conv2(relu(self.conv1(x)))
        pooled = adaptive_avg_pool(h + x)
        return self.fc(pooled.reshape(x.shape[0], self.channels))

    __call__ = forward

    def trainable(self, prefix: str) -> Iterator[ParamItem]:
        for name, child in (("conv1", self.conv1), ("conv2", self.conv2), ("fc", self.fc)):
            yield from child.trainable(f"{prefix}.{name}")

    def named_state(self, prefix: str) -> Iterator[StateItem]:
        for name, child in (("conv1", self.conv1), ("conv2", self.conv2), ("fc", self.fc)):
            yield from child.named_state(f"{prefix}.{name}")
