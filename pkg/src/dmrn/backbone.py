"""Miniature residual backbone producing four spatial scales.

The stem is a 3x3 conv at stride 1 followed by a 3x3 downsampling conv
at stride 2; four residual stages then run at input_size/4, /8, /16 and
/32 (the first block of every stage strides by 2). Convolutions are
bias-free since every one is followed by batch norm. Skip connections
that change shape go through a 1x1 projection conv plus batch norm.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .layers import BatchNorm2d, Conv2d, ParamItem, StateItem
from .tensor import ShapeError, Tensor, relu

__all__ = ["BackboneConfig", "ResidualBlock", "Backbone"]

NUM_STAGES = 4


@dataclass(frozen=True)
class BackboneConfig:
    """Architecture knobs; input_size must be a positive multiple of 32
    so every stage keeps an integral spatial size."""

    input_size: int = 64
    in_channels: int = 1
    stage_channels: tuple[int, int, int, int] = (16, 32, 64, 128)
    blocks_per_stage: int = 2

    def __post_init__(self):
        if self.input_size <= 0 or self.input_size % 32 != 0:
            raise ValueError(f"input_size must be a positive multiple of 32, got {self.input_size}")
        if self.in_channels < 1:
            raise ValueError(f"in_channels must be >= 1, got {self.in_channels}")
        if len(self.stage_channels) != NUM_STAGES:
            raise ValueError(f"need {NUM_STAGES} stage channel counts, got {self.stage_channels}")
        if any(c < 1 for c in self.stage_channels):
            raise ValueError(f"stage channels must be >= 1, got {self.stage_channels}")
        if self.blocks_per_stage < 1:
            raise ValueError(f"blocks_per_stage must be >= 1, got {self.blocks_per_stage}")
        object.__setattr__(self, "stage_channels", tuple(int(c) for c in self.stage_channels))

    def stage_sizes(self) -> tuple[int, int, int, int]:
        s = self.input_size
        return (s // 4, s // 8, s // 16, s // 32)

    def to_dict(self) -> dict:
        return {
            "input_size": self.input_size,
            "in_channels": self.in_channels,
            "stage_channels": list(self.stage_channels),
            "blocks_per_stage": self.blocks_per_stage,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BackboneConfig":
        return cls(
            input_size=int(d["input_size"]),
            in_channels=int(d["in_channels"]),
            stage_channels=tuple(int(c) for c in d["stage_channels"]),
            blocks_per_stage=int(d["blocks_per_stage"]),
        )


class ResidualBlock:
    """conv-bn-relu-conv-bn plus skip, relu after the sum. The skip is
    the identity when shapes match, else 1x1 conv + bn."""

    def __init__(self, in_channels: int, out_channels: int, stride: int, rng: np.random.Generator):
        self.conv1 = Conv2d(in_channels, out_channels, rng, stride=stride)
        self.bn1 = BatchNorm2d(out_channels)
        self.conv2 = Conv2d(out_channels, out_channels, rng)
        self.bn2 = BatchNorm2d(out_channels)
        self.projection: Conv2d | None = None
        self.projection_bn: BatchNorm2d | None = None
        if stride != 1 or in_channels != out_channels:
            self.projection = Conv2d(in_channels, out_channels, rng,
                                     kernel_size=1, stride=stride, padding=0)
            self.projection_bn = BatchNorm2d(out_channels)

    def forward(self, x: Tensor, training: bool) -> Tensor:
        h = relu(self.bn1(self.conv1(x), training))
        h = self.bn2(self.conv2(h), training)
        skip = x
        if self.projection is not None:
            skip = self.projection_bn(self.projection(x), training)
        return relu(h + skip)

    __call__ = forward

    def _children(self):
        items = [("conv1", self.conv1), ("bn1", self.bn1),
                 ("conv2", self.conv2), ("bn2", self.bn2)]
        if self.projection is not None:
            items += [("proj", self.projection), ("proj_bn", self.projection_bn)]
        return items

    def trainable(self, prefix: str) -> Iterator[ParamItem]:
        for name, child in self._children():
            yield from child.trainable(f"{prefix}.{name}")

    def named_state(self, prefix: str) -> Iterator[StateItem]:
        for name, child in self._children():
            yield from child.named_state(f"{prefix}.{name}")


class Backbone:
    """Stem plus four residual stages; forward_stages returns the four
    per-stage feature maps shallowest first."""

    def __init__(self, config: BackboneConfig, rng: np.random.Generator):
        self.config = config
        c0 = config.stage_channels[0]
        self.stem_conv1 = Conv2d(config.in_channels, c0, rng)
        self.stem_bn1 = BatchNorm2d(c0)
        self.stem_conv2 = Conv2d(c0, c0, rng, stride=2)
        self.stem_bn2 = BatchNorm2d(c0)
        self.stages: list[list[ResidualBlock]] = []
        in_ch = c0
        for out_ch in config.stage_channels:
            blocks = [ResidualBlock(in_ch, out_ch, stride=2, rng=rng)]
            for _ in range(config.blocks_per_stage - 1):
                blocks.append(ResidualBlock(out_ch, out_ch, stride=1, rng=rng))
            self.stages.append(blocks)
            in_ch = out_ch

    def forward_stages(self, x: Tensor, training: bool) -> list[Tensor]:
        if x.ndim != 4 or x.shape[1] != self.config.in_channels:
            raise ShapeError(f"backbone: expected (N, {self.config.in_channels}, S, S), got {x.shape}")
        if x.shape[2] != self.config.input_size or x.shape[3] != self.config.input_size:
            raise ShapeError(
                f"backbone: configured for {self.config.input_size}x{self.config.input_size} "
                f"input, got {x.shape[2]}x{x.shape[3]}")
        h = relu(self.stem_bn1(self.stem_conv1(x), training))
        h = relu(self.stem_bn2(self.stem_conv2(h), training))
        features = []
        for blocks in self.stages:
            for block in blocks:
                h = block(h, training)
            features.append(h)
        return features

    __call__ = forward_stages

    def _children(self):
        items = [("stem.conv1", self.stem_conv1), ("stem.bn1", self.stem_bn1),
                 ("stem.conv2", self.stem_conv2), ("stem.bn2", self.stem_bn2)]
        for s, blocks in enumerate(self.stages, start=1):
            for b, block in enumerate(blocks):
                items.append((f"stage{s}.block{b}", block))
        return items

    def trainable(self, prefix: str = "backbone") -> Iterator[ParamItem]:
        for name, child in self._children():
            yield from child.trainable(f"{prefix}.{name}")

    def named_state(self, prefix: str = "backbone") -> Iterator[StateItem]:
        for name, child in self._children():
            yield from child.named_state(f"{prefix}.{name}")
