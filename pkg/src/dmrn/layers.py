"""Parameterized layers on top of the autodiff ops.

Each layer owns its tensors and exposes two flat views used by the
optimizer and the checkpoint writer:

* ``trainable(prefix)``: (name, Tensor) pairs that receive gradients;
* ``named_state(prefix)``: (name, ndarray) pairs covering trainable
  parameters and buffers (batch-norm running statistics), in a fixed
  deterministic order.
"""

from __future__ import annotations

import math
from typing import Iterator, Optional

import numpy as np

from .tensor import Tensor, batch_norm, conv2d, default_dtype, fully_connected

__all__ = ["he_normal", "Conv2d", "BatchNorm2d", "Linear"]

StateItem = tuple[str, np.ndarray]
ParamItem = tuple[str, Tensor]


def he_normal(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    """Zero-mean normal with std sqrt(2 / fan_in), in the default dtype."""
    std = math.sqrt(2.0 / fan_in)
    return (rng.standard_normal(shape) * std).astype(default_dtype())


class Conv2d:
    """3x3-style convolution layer; bias-free by default (a following
    batch norm provides the shift)."""

    def __init__(self, in_channels: int, out_channels: int, rng: np.random.Generator,
                 kernel_size: int = 3, stride: int = 1, padding: int = 1, bias: bool = False):
        self.stride = stride
        self.padding = padding
        fan_in = in_channels * kernel_size * kernel_size
        self.weight = Tensor(
            he_normal(rng, (out_channels, in_channels, kernel_size, kernel_size), fan_in),
            requires_grad=True,
        )
        self.bias: Optional[Tensor] = None
        if bias:
            self.bias = Tensor(np.zeros(out_channels, dtype=default_dtype()), requires_grad=True)

    def forward(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)

    __call__ = forward

    def trainable(self, prefix: str) -> Iterator[ParamItem]:
        yield f"{prefix}.weight", self.weight
        if self.bias is not None:
            yield f"{prefix}.bias", self.bias

    def named_state(self, prefix: str) -> Iterator[StateItem]:
        for name, tensor in self.trainable(prefix):
            yield name, tensor.data


class BatchNorm2d:
    """Per-channel batch norm with learnable scale/shift and running
    statistics buffers (momentum 0.1, eps 1e-5)."""

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        dt = default_dtype()
        self.gamma = Tensor(np.ones(channels, dtype=dt), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=dt), requires_grad=True)
        self.running_mean = np.zeros(channels, dtype=dt)
        self.running_var = np.ones(channels, dtype=dt)
        self.momentum = momentum
        self.eps = eps

    def forward(self, x: Tensor, training: bool) -> Tensor:
        return batch_norm(x, self.gamma, self.beta, self.running_mean, self.running_var,
                          training=training, momentum=self.momentum, eps=self.eps)

    __call__ = forward

    def trainable(self, prefix: str) -> Iterator[ParamItem]:
        yield f"{prefix}.gamma", self.gamma
        yield f"{prefix}.beta", self.beta

    def named_state(self, prefix: str) -> Iterator[StateItem]:
        yield f"{prefix}.gamma", self.gamma.data
        yield f"{prefix}.beta", self.beta.data
        yield f"{prefix}.running_mean", self.running_mean
        yield f"{prefix}.running_var", self.running_var


class Linear:
    """Affine layer (out_features, in_features), He-initialized weight,
    zero bias."""

    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator):
        self.weight = Tensor(he_normal(rng, (out_features, in_features), in_features),
                             requires_grad=True)
        self.bias = Tensor(np.zeros(out_features, dtype=default_dtype()), requires_grad=True)

    def forward(self, x: Tensor) -> Tensor:
        return fully_connected(x, self.weight, self.bias)

    __call__ = forward

    def trainable(self, prefix: str) -> Iterator[ParamItem]:
        yield f"{prefix}.weight", self.weight
        yield f"{prefix}.bias", self.bias

    def named_state(self, prefix: str) -> Iterator[StateItem]:
        for name, tensor in self.trainable(prefix):
            yield name, tensor.data
