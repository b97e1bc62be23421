"""Linear SVM head over embeddings, with study-level aggregation.

One-vs-rest linear SVMs trained by deterministic full-batch subgradient
descent on the standard hinge objective; no randomness, so identical
inputs give identical models. Decision values turn into probabilities
through a softmax, and a study's prediction is the arithmetic mean of
its slice probability vectors, argmax with lowest-index tie-break.

Features are standardized (per-dimension mean/scale from the training
set) inside the head; the stored model carries the transform.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .data import StudyRecord
from .model import DmrnModel

__all__ = [
    "SvmConfig",
    "SvmModel",
    "train_svm",
    "decision_function",
    "predict_proba",
    "predict",
    "hinge_objective",
    "embed_slices",
    "average_probabilities",
    "classify_study",
]

EMBED_CHUNK = 256


@dataclass(frozen=True)
class SvmConfig:
    c: float = 1.0
    iterations: int = 2000

    def __post_init__(self):
        if self.c <= 0:
            raise ValueError(f"C must be positive, got {self.c}")
        if self.iterations < 1:
            raise ValueError(f"iterations must be >= 1, got {self.iterations}")


@dataclass(eq=False)
class SvmModel:
    class_ids: np.ndarray  # (K,) int64, ascending
    weights: np.ndarray  # (K, D) float64
    biases: np.ndarray  # (K,) float64
    feature_mean: np.ndarray  # (D,) float64
    feature_scale: np.ndarray  # (D,) float64
    c: float

    @property
    def num_classes(self) -> int:
        return len(self.class_ids)


def _standardize(x: np.ndarray, mean: np.ndarray, scale: np.ndarray) -> np.ndarray:
    return (x - mean) / scale


def train_svm(features: np.ndarray, labels: np.ndarray,
              config: SvmConfig = SvmConfig()) -> SvmModel:
    """Fit one-vs-rest linear SVMs.

    Full-batch projected subgradient on
    0.5*lambda*||w||^2 + mean(hinge), lambda = 1/(C*n), with the
    1/(lambda*t) step schedule; the iterate with the best objective is
    kept, so more iterations never return a worse model.
    """
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels)
    if x.ndim != 2 or y.ndim != 1 or len(x) != len(y):
        raise ValueError(f"bad shapes: features {x.shape}, labels {y.shape}")
    class_ids = np.unique(y)
    if len(class_ids) < 2:
        raise ValueError(f"need at least 2 classes to train, got {class_ids}")
    n, dim = x.shape
    k = len(class_ids)

    mean = x.mean(axis=0)
    scale = x.std(axis=0)
    scale = np.where(scale < 1e-8, 1.0, scale)
    xs = _standardize(x, mean, scale)

    # (n, K) matrix of +-1 targets, all classes fit simultaneously.
    targets = np.where(y[:, None] == class_ids[None, :], 1.0, -1.0)
    lam = 1.0 / (config.c * n)
    w = np.zeros((k, dim))
    b = np.zeros(k)
    best_w, best_b = w.copy(), b.copy()
    best_obj = np.inf
    for t in range(1, config.iterations + 1):
        margins = targets * (xs @ w.T + b)
        hinge = np.maximum(0.0, 1.0 - margins)
        objective = float(0.5 * lam * (w * w).sum() + hinge.mean(axis=0).sum())
        if objective < best_obj:
            best_obj = objective
            best_w, best_b = w.copy(), b.copy()
        active = (margins < 1.0).astype(np.float64) * targets  # (n, K)
        step = 1.0 / (lam * (t + 1.0 / lam))
        grad_w = lam * w - (active.T @ xs) / n
        grad_b = -active.mean(axis=0)
        w = w - step * grad_w
        b = b - step * grad_b
    return SvmModel(class_ids=class_ids.astype(np.int64), weights=best_w, biases=best_b,
                    feature_mean=mean, feature_scale=scale, c=config.c)


def decision_function(model: SvmModel, features: np.ndarray) -> np.ndarray:
    x = np.asarray(features, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None]
    if x.shape[1] != model.weights.shape[1]:
        raise ValueError(f"features have {x.shape[1]} dims, model expects "
                         f"{model.weights.shape[1]}")
    scores = _standardize(x, model.feature_mean, model.feature_scale) @ model.weights.T \
        + model.biases
    return scores[0] if single else scores


def predict_proba(model: SvmModel, features: np.ndarray) -> np.ndarray:
    """Softmax over per-class decision values; rows sum to 1 and argmax
    matches the raw decision argmax."""
    scores = np.atleast_2d(decision_function(model, features))
    shifted = scores - scores.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    probs = e / e.sum(axis=1, keepdims=True)
    return probs[0] if np.asarray(features).ndim == 1 else probs


def predict(model: SvmModel, features: np.ndarray) -> np.ndarray:
    scores = np.atleast_2d(decision_function(model, features))
    return model.class_ids[np.argmax(scores, axis=1)]


def hinge_objective(model: SvmModel, features: np.ndarray, labels: np.ndarray) -> dict:
    """Training-objective pieces for diagnostics: mean hinge and the
    regularized objective it was optimized under."""
    scores = decision_function(model, features)
    targets = np.where(np.asarray(labels)[:, None] == model.class_ids[None, :], 1.0, -1.0)
    hinge = np.maximum(0.0, 1.0 - targets * scores)
    lam = 1.0 / (model.c * len(features))
    return {
        "mean_hinge": float(hinge.mean(axis=0).sum()),
        "objective": float(0.5 * lam * (model.weights ** 2).sum()
                           + hinge.mean(axis=0).sum()),
    }


def embed_slices(model: DmrnModel, slices: Sequence) -> np.ndarray:
    """Final-stage embeddings for a slice list, chunked to bound memory."""
    out = []
    for start in range(0, len(slices), EMBED_CHUNK):
        chunk = slices[start:start + EMBED_CHUNK]
        out.append(model.embed(np.stack([sl.pixels for sl in chunk])))
    return np.concatenate(out, axis=0)


def average_probabilities(probabilities: np.ndarray) -> np.ndarray:
    """Arithmetic mean of slice probability rows -> one study vector."""
    probs = np.atleast_2d(np.asarray(probabilities, dtype=np.float64))
    if probs.size == 0:
        raise ValueError("no probabilities to average")
    return probs.mean(axis=0)


def classify_study(study: StudyRecord, model: DmrnModel, svm: SvmModel) -> tuple[int, np.ndarray]:
    """Embed every slice, average the probability vectors, argmax.

    Ties break to the lowest class index (np.argmax convention).
    """
    features = embed_slices(model, study.slices)
    study_probs = average_probabilities(predict_proba(svm, features))
    winner = int(svm.class_ids[int(np.argmax(study_probs))])
    return winner, study_probs
