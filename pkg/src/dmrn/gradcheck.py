"""Finite-difference verification of analytic gradients.

Central differences in float64 with step 1e-5, compared by the
relative error ||a - n||_2 / max(||a||_2, ||n||_2, tiny). Loss builders
passed in must be deterministic functions of the parameter data (fixed
inputs, no RNG), because each parameter coordinate is perturbed in
place and the loss re-evaluated.
"""

from __future__ import annotations

from typing import Callable, Mapping

import numpy as np

from .tensor import Tensor

__all__ = ["numerical_gradient", "relative_error", "check_gradients"]

DEFAULT_STEP = 1e-5
_TINY = 1e-12
# Below this norm, analytic and numeric gradients are both treated as
# zero: central differences with step 1e-5 in float64 bottom out around
# 1e-11, and structurally zero gradients exist (a bias after the last
# nonlinearity shifts both shared-weight branches equally, so the pair
# distance ignores it).
ZERO_FLOOR = 1e-8


def numerical_gradient(loss_fn: Callable[[], float], param_data: np.ndarray,
                       step: float = DEFAULT_STEP) -> np.ndarray:
    """Central differences of loss_fn w.r.t. every coordinate of param_data.

    param_data is perturbed in place and restored, so it must be the
    very array loss_fn reads.
    """
    grad = np.zeros_like(param_data)
    flat = param_data.reshape(-1)
    grad_flat = grad.reshape(-1)
    for i in range(flat.size):
        original = flat[i]
        flat[i] = original + step
        plus = loss_fn()
        flat[i] = original - step
        minus = loss_fn()
        flat[i] = original
        grad_flat[i] = (plus - minus) / (2.0 * step)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    norm_a = np.linalg.norm(a)
    norm_n = np.linalg.norm(n)
    if norm_a <= ZERO_FLOOR and norm_n <= ZERO_FLOOR:
        return 0.0
    return float(np.linalg.norm(a - n) / max(norm_a, norm_n, _TINY))


def check_gradients(build_loss: Callable[[], Tensor], params: Mapping[str, Tensor],
                    step: float = DEFAULT_STEP) -> dict[str, float]:
    """Relative error between backprop and finite differences, per parameter.

    build_loss() must rebuild the scalar loss from scratch each call so
    that in-place parameter perturbations are picked up.
    """
    for tensor in params.values():
        tensor.zero_grad()
    loss = build_loss()
    loss.backward()
    analytic = {name: tensor.grad.copy() for name, tensor in params.items()}
    errors = {}
    for name, tensor in params.items():
        numeric = numerical_gradient(lambda: build_loss().item(), tensor.data, step=step)
        errors[name] = relative_error(analytic[name], numeric)
    return errors
