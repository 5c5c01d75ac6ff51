"""Cosine corruption schedule, v-parameterization and loss weighting.

The corruption process is x_t = alpha_t * x + sigma_t * eps with
alpha_t = cos(a*t + b*(1-t)), a = arctan(e^10), b = arctan(e^-10) and
sigma_t^2 = 1 - alpha_t^2.  Networks predict v = alpha_t * eps - sigma_t * x;
plain v-space MSE equals the x-space MSE weighted by w_t = sigma_t^-2,
which is how the training losses are computed (see the weighting identity
test in tests/test_schedule.py).

All functions here operate on plain numpy arrays (scalar or batched t);
they are used both inside differentiable losses (on constant draws) and
inside the gradient-free sampling loop.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .rng import PrngState

ANGLE_AT_1 = math.atan(math.exp(10.0))   # schedule angle at t=1
ANGLE_AT_0 = math.atan(math.exp(-10.0))  # schedule angle at t=0
SIGMA_SQ_FLOOR = 1e-8  # clamp before inverting sigma^2 for the loss weight


@dataclass(frozen=True)
class ScheduleSample:
    """One point of the corruption process: (t, alpha_t, sigma_t, w_t)."""
    t: float
    alpha: float
    sigma: float
    weight: float


@dataclass(frozen=True)
class CorruptionDraw:
    """A corrupted input x_t = alpha_t x + sigma_t eps and its noise."""
    t: np.ndarray  # per-example, shape (N,)
    eps: np.ndarray
    x_t: np.ndarray


def _check_t(t) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64)
    if np.any(t < 0.0) or np.any(t > 1.0):
        raise ValueError(f"t must lie in [0, 1], got {t}")
    return t


def alpha_sigma(t):
    """(alpha_t, sigma_t) for scalar or array t in [0, 1]."""
    t = _check_t(t)
    angle = ANGLE_AT_1 * t + ANGLE_AT_0 * (1.0 - t)
    alpha = np.cos(angle)
    sigma = np.sqrt(1.0 - alpha * alpha)
    return alpha, sigma


def schedule_sample(t: float) -> ScheduleSample:
    alpha, sigma = alpha_sigma(t)
    return ScheduleSample(float(t), float(alpha), float(sigma), loss_weight(t))


def loss_weight(t):
    """w_t = sigma_t^-2 with sigma^2 clamped below at SIGMA_SQ_FLOOR."""
    alpha, _ = alpha_sigma(t)
    sigma_sq = np.maximum(1.0 - alpha * alpha, SIGMA_SQ_FLOOR)
    w = 1.0 / sigma_sq
    return float(w) if np.isscalar(t) or np.ndim(t) == 0 else w


def _bcast(values: np.ndarray, like: np.ndarray) -> np.ndarray:
    """Reshape per-example scalars (N,) to broadcast against (N, ...)."""
    values = np.asarray(values)
    if values.ndim == 0:
        return values
    return values.reshape(values.shape + (1,) * (like.ndim - values.ndim))


def corrupt(x: np.ndarray, t, prng: PrngState) -> CorruptionDraw:
    """Draw eps ~ N(0, I) and form x_t = alpha_t x + sigma_t eps."""
    x = np.asarray(x)
    t = np.atleast_1d(_check_t(t))
    alpha, sigma = alpha_sigma(t)
    eps = prng.normal(x.shape, dtype=x.dtype)
    x_t = _bcast(alpha, x).astype(x.dtype) * x + _bcast(sigma, x).astype(x.dtype) * eps
    return CorruptionDraw(t=t, eps=eps, x_t=x_t)


def v_target(x: np.ndarray, eps: np.ndarray, t) -> np.ndarray:
    """v = alpha_t * eps - sigma_t * x."""
    x, eps = np.asarray(x), np.asarray(eps)
    if x.shape != eps.shape:
        raise ValueError(f"v_target shape mismatch: {x.shape} vs {eps.shape}")
    alpha, sigma = alpha_sigma(t)
    return (_bcast(alpha, eps).astype(x.dtype) * eps
            - _bcast(sigma, x).astype(x.dtype) * x)


def x_and_eps_from_v(x_t: np.ndarray, v: np.ndarray, t):
    """Invert the v-parameterization: x_hat = a*x_t - s*v, eps_hat = a*v + s*x_t.

    The pair always satisfies the reconstruction identity
    x_t = alpha_t * x_hat + sigma_t * eps_hat.
    """
    x_t, v = np.asarray(x_t), np.asarray(v)
    if x_t.shape != v.shape:
        raise ValueError(f"x_and_eps_from_v shape mismatch: {x_t.shape} vs {v.shape}")
    alpha, sigma = alpha_sigma(t)
    a = _bcast(alpha, x_t).astype(x_t.dtype)
    s = _bcast(sigma, x_t).astype(x_t.dtype)
    return a * x_t - s * v, a * v + s * x_t
