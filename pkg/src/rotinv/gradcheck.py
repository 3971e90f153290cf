"""Central finite-difference oracles for verifying analytic gradients."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad


def finite_difference_gradient(f: Callable[[np.ndarray], float], x: np.ndarray,
                               step: float = 1e-4) -> np.ndarray:
    """Elementwise central difference of a scalar function of an array."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.ravel()
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + step
        f_plus = float(f(x))
        flat[i] = keep - step
        f_minus = float(f(x))
        flat[i] = keep
        grad.ravel()[i] = (f_plus - f_minus) / (2.0 * step)
    return grad


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray,
                       floor: float = 1e-6) -> float:
    """Max |a-n| scaled by the numeric gradient's magnitude (floored)."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = max(float(np.max(np.abs(numeric))), floor)
    return float(np.max(np.abs(analytic - numeric)) / scale)


def check_tensor_gradient(f: Callable[[ad.Tensor], ad.Tensor], x: np.ndarray,
                          step: float = 1e-4) -> float:
    """Max relative error between autodiff and central differences for f."""
    leaf = ad.Tensor(x, requires_grad=True)
    loss = f(leaf)
    ad.backward(loss)
    analytic = leaf.grad if leaf.grad is not None else np.zeros(leaf.shape)

    def forward(values: np.ndarray) -> float:
        with ad.no_grad():
            return f(ad.Tensor(values)).item()

    numeric = finite_difference_gradient(forward, x, step=step)
    return max_relative_error(analytic, numeric)


def directional_derivative_error(build_loss: Callable[[], ad.Tensor],
                                 params: Sequence[ad.Parameter],
                                 rng: np.random.Generator,
                                 step: float = 1e-4) -> float:
    """Compare <grad, d> against a central difference along a random direction.

    This is a Jacobian-vector product check over all parameters at once;
    it exercises every parameter of a model with two extra forward passes.
    """
    loss = build_loss()
    ad.zero_grad(params)
    store = ad.backward(loss, params)
    directions = [rng.normal(size=p.shape) for p in params]
    norm = np.sqrt(sum(float((d * d).sum()) for d in directions))
    directions = [d / norm for d in directions]
    analytic = sum(float((store[p.name] * d).sum())
                   for p, d in zip(params, directions))

    originals = [p.data.copy() for p in params]

    def eval_at(offset: float) -> float:
        for p, base, d in zip(params, originals, directions):
            p.data = base + offset * d
        with ad.no_grad():
            value = build_loss().item()
        return value

    try:
        f_plus = eval_at(step)
        f_minus = eval_at(-step)
    finally:
        for p, base in zip(params, originals):
            p.data = base
    numeric = (f_plus - f_minus) / (2.0 * step)
    scale = max(abs(numeric), 1e-6)
    return abs(analytic - numeric) / scale
