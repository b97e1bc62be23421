"""Pair-based contrastive training loop.

Each epoch resamples its pair set, batches it, and runs both members
of every pair through the one shared model: the two branch batches are
concatenated into a single forward pass (so batch-norm statistics are
computed symmetrically over both branches) and the per-stage embedding
batches are split back apart for the loss. SGD with classic momentum
and L2 weight decay; the optimizer steps on the per-pair mean of the
loss so the step size does not scale with batch size, while the log
records both the raw sum and the mean plus a per-stage and
same/different decomposition.

A non-finite loss aborts immediately with the epoch, batch and
per-stage distance means attached rather than continuing to train on
garbage.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .backbone import BackboneConfig
from .contrastive import LossConfig, pair_loss, stage_distance
from .data import SliceRecord
from .model import DmrnModel
from .pairing import SamplerConfig, sample_pairs
from .tensor import Tensor, narrow

__all__ = ["TrainConfig", "TrainingDiverged", "EpochStats", "TrainingLog", "train"]


class TrainingDiverged(RuntimeError):
    """Loss became NaN/inf during optimization."""

    def __init__(self, message: str, epoch: int, batch: int):
        super().__init__(message)
        self.epoch = epoch
        self.batch = batch


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    batch_size: int = 10  # pairs per step
    learning_rate: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    margin: float = 1.0
    stages_used: tuple[int, ...] = (1, 2, 3, 4)
    stage_weights: tuple[float, ...] | None = None
    sampler_mode: str = "class_balanced"
    pairs_per_epoch: int | None = None
    lr_step_every: int | None = None  # optional step decay, off by default
    lr_step_factor: float = 0.5
    seed: int = 0
    backbone: BackboneConfig = field(default_factory=BackboneConfig)

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ValueError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.lr_step_every is not None and self.lr_step_every < 1:
            raise ValueError(f"lr_step_every must be >= 1, got {self.lr_step_every}")
        if not 0.0 < self.lr_step_factor <= 1.0:
            raise ValueError(f"lr_step_factor must be in (0, 1], got {self.lr_step_factor}")
        # Delegate range checks to the component configs.
        self.loss_config()
        self.sampler_config()

    def loss_config(self) -> LossConfig:
        return LossConfig(margin=self.margin, stages_used=self.stages_used,
                          stage_weights=self.stage_weights)

    def sampler_config(self) -> SamplerConfig:
        return SamplerConfig(mode=self.sampler_mode, pairs_per_epoch=self.pairs_per_epoch,
                             seed=self.seed)

    def to_dict(self) -> dict:
        return {
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "learning_rate": self.learning_rate,
            "momentum": self.momentum,
            "weight_decay": self.weight_decay,
            "margin": self.margin,
            "stages_used": list(self.stages_used),
            "stage_weights": None if self.stage_weights is None else list(self.stage_weights),
            "sampler_mode": self.sampler_mode,
            "pairs_per_epoch": self.pairs_per_epoch,
            "lr_step_every": self.lr_step_every,
            "lr_step_factor": self.lr_step_factor,
            "seed": self.seed,
            "backbone": self.backbone.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown training config keys: {sorted(unknown)}")
        kwargs = dict(d)
        if "backbone" in kwargs and isinstance(kwargs["backbone"], dict):
            kwargs["backbone"] = BackboneConfig.from_dict(kwargs["backbone"])
        for key in ("stages_used", "stage_weights"):
            if kwargs.get(key) is not None:
                kwargs[key] = tuple(kwargs[key])
        return cls(**kwargs)


@dataclass
class EpochStats:
    epoch: int
    num_pairs: int
    total_loss: float  # raw sum over pairs and stages (Eq-style)
    mean_pair_loss: float  # total_loss / num_pairs, the optimized scale
    same_loss: float  # per-pair mean over same-class pairs, all stages
    diff_loss: float  # per-pair mean over different-class pairs
    stage_losses: dict[int, float]  # stage -> per-pair mean contribution
    mean_same_distance: float  # deepest configured stage, same-class pairs
    mean_diff_distance: float  # deepest configured stage, different-class pairs
    seconds: float


@dataclass
class TrainingLog:
    epochs: list[EpochStats] = field(default_factory=list)

    @property
    def final(self) -> EpochStats:
        return self.epochs[-1]

    def to_csv(self, path: Path | str) -> None:
        stages = sorted(self.epochs[0].stage_losses) if self.epochs else []
        stage_cols = "".join(f",stage{t}_loss" for t in stages)
        lines = ["epoch,num_pairs,total_loss,mean_pair_loss,same_loss,diff_loss"
                 f"{stage_cols},mean_same_distance,mean_diff_distance"]
        for e in self.epochs:
            stage_cells = "".join(f",{e.stage_losses[t]:.6f}" for t in stages)
            lines.append(f"{e.epoch},{e.num_pairs},{e.total_loss:.6f},"
                         f"{e.mean_pair_loss:.6f},{e.same_loss:.6f},{e.diff_loss:.6f}"
                         f"{stage_cells},{e.mean_same_distance:.6f},"
                         f"{e.mean_diff_distance:.6f}")
        Path(path).write_text("\n".join(lines) + "\n")


def _sgd_step(params: list[tuple[str, Tensor]], velocities: dict[str, np.ndarray],
              lr: float, momentum: float, weight_decay: float) -> None:
    for name, p in params:
        grad = p.grad
        if weight_decay:
            grad = grad + weight_decay * p.data
        v = velocities[name]
        v *= momentum
        v += grad
        p.data -= lr * v


def train(slices: Sequence[SliceRecord], config: TrainConfig,
          model: Optional[DmrnModel] = None,
          progress: Optional[Callable[[EpochStats], None]] = None,
          ) -> tuple[DmrnModel, TrainingLog]:
    """Train on a flat slice list; returns the shared-weight model and the log."""
    if len(slices) < 2:
        raise ValueError(f"need at least 2 training slices, got {len(slices)}")
    classes = {sl.class_id for sl in slices}
    if len(classes) < 2:
        raise ValueError(f"training set has {len(classes)} class(es); pair labels "
                         "need at least 2")
    size = config.backbone.input_size
    for sl in slices:
        if sl.pixels.shape != (size, size):
            raise ValueError(f"slice {sl.slice_id!r} is {sl.pixels.shape}, "
                             f"backbone expects ({size}, {size})")

    if model is None:
        model = DmrnModel(config.backbone, seed=config.seed)
    loss_cfg = config.loss_config()
    sampler_cfg = config.sampler_config()
    params = list(model.trainable())
    velocities = {name: np.zeros_like(p.data) for name, p in params}

    log = TrainingLog()
    for epoch in range(config.epochs):
        started = time.perf_counter()
        lr = config.learning_rate
        if config.lr_step_every is not None:
            lr *= config.lr_step_factor ** (epoch // config.lr_step_every)
        pairs = sample_pairs(slices, sampler_cfg, epoch=epoch)
        epoch_loss = 0.0
        same_loss_sum = 0.0
        diff_loss_sum = 0.0
        num_same = 0
        num_diff = 0
        stage_loss_sums = {t: 0.0 for t in loss_cfg.stages_used}
        same_dist: list[np.ndarray] = []
        diff_dist: list[np.ndarray] = []
        for start in range(0, len(pairs), config.batch_size):
            batch = pairs[start:start + config.batch_size]
            n = len(batch)
            stacked = np.stack([p.a.pixels for p in batch]
                               + [p.b.pixels for p in batch])[:, None, :, :]
            labels = np.array([p.label for p in batch], dtype=np.float64)
            same_mask = labels == 0

            stages = model.stage_embeddings(Tensor(stacked), training=True)
            total: Tensor | None = None
            final_distance: np.ndarray | None = None
            stage_dist_means: dict[int, float] = {}
            for stage_no, weight in zip(loss_cfg.stages_used, loss_cfg.weights()):
                emb = stages[stage_no - 1]
                dist = stage_distance(narrow(emb, 0, n), narrow(emb, n, 2 * n))
                stage_dist_means[stage_no] = float(dist.data.mean())
                if stage_no == loss_cfg.stages_used[-1]:
                    final_distance = dist.data.copy()
                per_pair = pair_loss(dist, labels, loss_cfg.margin)
                stage_sum = per_pair.sum()
                term = stage_sum * weight if weight != 1.0 else stage_sum
                total = term if total is None else total + term
                contrib = weight * per_pair.data
                stage_loss_sums[stage_no] += float(contrib.sum())
                same_loss_sum += float(contrib[same_mask].sum())
                diff_loss_sum += float(contrib[~same_mask].sum())

            value = total.item()
            if not np.isfinite(value):
                raise TrainingDiverged(
                    f"non-finite loss {value} at epoch {epoch}, "
                    f"batch {start // config.batch_size}; per-stage mean "
                    f"distances {stage_dist_means}",
                    epoch=epoch, batch=start // config.batch_size)
            epoch_loss += value
            num_same += int(same_mask.sum())
            num_diff += n - int(same_mask.sum())
            same_dist.append(final_distance[same_mask])
            diff_dist.append(final_distance[~same_mask])

            # Per-pair mean objective: step size independent of batch size.
            objective = total * (1.0 / n)
            model.zero_grads()
            objective.backward()
            _sgd_step(params, velocities, lr, config.momentum,
                      config.weight_decay)

        same_all = np.concatenate(same_dist) if same_dist else np.array([])
        diff_all = np.concatenate(diff_dist) if diff_dist else np.array([])
        stats = EpochStats(
            epoch=epoch,
            num_pairs=len(pairs),
            total_loss=epoch_loss,
            mean_pair_loss=epoch_loss / len(pairs),
            same_loss=same_loss_sum / num_same if num_same else 0.0,
            diff_loss=diff_loss_sum / num_diff if num_diff else 0.0,
            stage_losses={t: s / len(pairs) for t, s in stage_loss_sums.items()},
            mean_same_distance=float(same_all.mean()) if same_all.size else 0.0,
            mean_diff_distance=float(diff_all.mean()) if diff_all.size else 0.0,
            seconds=time.perf_counter() - started,
        )
        log.epochs.append(stats)
        if progress is not None:
            progress(stats)
    return model, log


def fold_train_config(config: TrainConfig, fold_index: int) -> TrainConfig:
    """Per-fold seed derivation so folds do not share randomness."""
    return replace(config, seed=config.seed + fold_index)
