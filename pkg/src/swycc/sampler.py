"""Iterative stochastic decoding with classifier-free guidance.

The refiner is run in a loop over a uniform time grid from t=1 (pure
noise) down to t=0.  Two update rules are provided: deterministic DDIM
(random only through the t=1 initialization) and a DDPM-style ancestral
step (eta=1 posterior noise).  Guidance convention, fixed here because
conventions differ across the literature:

    v_guided = v_cond + g * (v_cond - v_uncond)

so g=0 is the conditional model (and the unconditional pass is skipped),
g=0.5 the default mild boost.

``sample_loop`` is the single source of truth for the update recursion;
both image refinement and the latent prior sampler drive it with their
own v-prediction callables.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .models import ModelBundle
from .rng import PrngState
from .schedule import alpha_sigma, x_and_eps_from_v
from .tensor import NonFiniteError, Tensor, no_grad

SAMPLER_MODES = ("ddim", "ancestral")
STEP_MENU = (2, 5, 10, 50, 150)


@dataclass(frozen=True)
class SamplerConfig:
    steps: int = 50
    guidance: float = 0.5
    mode: str = "ddim"
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.mode not in SAMPLER_MODES:
            raise ValueError(f"mode must be one of {SAMPLER_MODES}")


def time_grid(steps: int) -> np.ndarray:
    """Strictly decreasing grid 1 = t_0 > t_1 > ... > t_steps = 0."""
    return np.linspace(1.0, 0.0, steps + 1)


def cfg_combine(v_cond: np.ndarray, v_uncond: np.ndarray, g: float) -> np.ndarray:
    """v_cond + g * (v_cond - v_uncond)."""
    if np.shape(v_cond) != np.shape(v_uncond):
        raise ValueError("cfg_combine: shape mismatch")
    if g == 0.0:
        return v_cond
    return v_cond + g * (v_cond - v_uncond)


def ddim_step(x_t: np.ndarray, v_hat: np.ndarray, t: float, s: float) -> np.ndarray:
    """Deterministic update t -> s: re-noise the implied (x_hat, eps_hat)."""
    if not 0.0 <= s <= t <= 1.0:
        raise ValueError(f"ddim_step requires 0 <= s <= t <= 1, got s={s}, t={t}")
    x_hat, eps_hat = x_and_eps_from_v(x_t, v_hat, t)
    alpha_s, sigma_s = alpha_sigma(s)
    return (alpha_s * x_hat + sigma_s * eps_hat).astype(x_t.dtype, copy=False)


def ancestral_step(x_t: np.ndarray, v_hat: np.ndarray, t: float, s: float,
                   prng: PrngState, eta: float = 1.0) -> np.ndarray:
    """Stochastic update: DDIM mean with posterior-variance noise (eta=1)."""
    if not 0.0 <= s <= t <= 1.0:
        raise ValueError(f"ancestral_step requires 0 <= s <= t <= 1, got s={s}, t={t}")
    x_hat, eps_hat = x_and_eps_from_v(x_t, v_hat, t)
    alpha_t, sigma_t = alpha_sigma(t)
    alpha_s, sigma_s = alpha_sigma(s)
    var_ratio = max(1.0 - (alpha_t / alpha_s) ** 2, 0.0)
    sigma_inject = eta * (sigma_s / max(sigma_t, 1e-12)) * np.sqrt(var_ratio)
    sigma_dir = np.sqrt(max(sigma_s * sigma_s - sigma_inject * sigma_inject, 0.0))
    out = alpha_s * x_hat + sigma_dir * eps_hat
    if sigma_inject > 0.0:
        out = out + sigma_inject * prng.normal(x_t.shape, dtype=x_t.dtype)
    return out.astype(x_t.dtype, copy=False)


def sample_loop(predict_v: Callable[[np.ndarray, float], np.ndarray],
                shape: tuple[int, ...], cfg: SamplerConfig,
                prng: PrngState | None = None,
                dtype=np.float32) -> np.ndarray:
    """Run the reverse process from pure noise at t=1 down to t=0."""
    prng = prng if prng is not None else PrngState(cfg.seed)
    grid = time_grid(cfg.steps)
    x = prng.normal(shape, dtype=dtype)
    for i in range(cfg.steps):
        t, s = float(grid[i]), float(grid[i + 1])
        v_hat = predict_v(x, t)
        if cfg.mode == "ancestral":
            x = ancestral_step(x, v_hat, t, s, prng)
        else:
            x = ddim_step(x, v_hat, t, s)
        if not np.isfinite(x.sum()):
            raise NonFiniteError(f"sampling diverged (non-finite state) at step {i}")
    return x


def _refine_predictor(bundle: ModelBundle, cond: np.ndarray,
                      guidance: float) -> Callable[[np.ndarray, float], np.ndarray]:
    cond_t = Tensor(cond)

    def predict(x_t: np.ndarray, t: float) -> np.ndarray:
        v_c = bundle.refine_predict(Tensor(x_t), t, cond_t).data
        if guidance == 0.0:
            return v_c  # skip the unconditional pass entirely
        v_u = bundle.refine_predict(Tensor(x_t), t, cond_t, drop=True).data
        return cfg_combine(v_c, v_u, guidance)

    return predict


def sample_reconstruction(z, bundle: ModelBundle, cfg: SamplerConfig) -> np.ndarray:
    """Decode latents: condition on decode_initial(z), refine from noise.

    Returns pixels clamped to [-1, 1]; a pure function of
    (z, parameters, cfg.seed, cfg).
    """
    z_arr = z.data if isinstance(z, Tensor) else np.asarray(z)
    with no_grad():
        cond = bundle.decode_initial(Tensor(z_arr)).data
        predict = _refine_predictor(bundle, cond, cfg.guidance)
        x = sample_loop(predict, cond.shape, cfg, PrngState(cfg.seed),
                        dtype=cond.dtype)
    return np.clip(x, -1.0, 1.0)


def variance_map(z, bundle: ModelBundle, cfg: SamplerConfig, n: int = 10,
                 seeds: list[int] | None = None) -> np.ndarray:
    """Per-pixel variance over n reconstructions, averaged over channels.

    Seeds default to cfg.seed + i; pass an explicit list (e.g. a repeated
    seed) to probe the degenerate deterministic case.
    """
    if n < 2:
        raise ValueError("variance_map needs n >= 2 samples")
    if seeds is None:
        seeds = [cfg.seed + i for i in range(n)]
    if len(seeds) != n:
        raise ValueError("len(seeds) must equal n")
    recons = [sample_reconstruction(
        z, bundle, SamplerConfig(steps=cfg.steps, guidance=cfg.guidance,
                                 mode=cfg.mode, seed=si))
        for si in seeds]
    stack = np.stack(recons)               # (n, N, H, W, 3)
    var = stack.var(axis=0).mean(axis=-1)  # (N, H, W)
    return var[0] if var.shape[0] == 1 else var


# ----------------------------------------------------------------------
# closed-form Gaussian oracle
# ----------------------------------------------------------------------

@dataclass(frozen=True)
class OracleReport:
    mu: float
    s: float
    steps: int
    n_samples: int
    sample_mean: float
    sample_std: float

    @property
    def mean_err(self) -> float:
        return abs(self.sample_mean - self.mu)

    @property
    def std_err(self) -> float:
        return abs(self.sample_std - self.s)

    def __str__(self) -> str:
        return (f"gaussian oracle mu={self.mu} s={self.s} steps={self.steps}: "
                f"mean={self.sample_mean:.4f} (err {self.mean_err:.4f}), "
                f"std={self.sample_std:.4f} (err {self.std_err:.4f})")


def gaussian_oracle_v(x_t: np.ndarray, t: float, mu: float, s: float) -> np.ndarray:
    """Optimal v-prediction for scalar data x ~ Normal(mu, s^2).

    E[x | x_t] = mu + alpha s^2 (x_t - alpha mu) / (alpha^2 s^2 + sigma^2);
    the matching eps posterior mean gives v = alpha E[eps|x_t] - sigma E[x|x_t].
    """
    alpha, sigma = alpha_sigma(t)
    x_bar = mu + alpha * s * s * (x_t - alpha * mu) / (alpha * alpha * s * s + sigma * sigma)
    eps_bar = (x_t - alpha * x_bar) / max(sigma, 1e-300)
    return alpha * eps_bar - sigma * x_bar


def gaussian_oracle_check(mu: float, s: float, steps: int, n_samples: int,
                          seed: int = 0, mode: str = "ddim") -> OracleReport:
    """Sample scalar Normal(mu, s^2) data through the full sampler loop."""
    if s <= 0:
        raise ValueError("s must be positive")
    cfg = SamplerConfig(steps=steps, guidance=0.0, mode=mode, seed=seed)
    samples = sample_loop(lambda x_t, t: gaussian_oracle_v(x_t, t, mu, s),
                          (n_samples,), cfg, PrngState(seed), dtype=np.float64)
    return OracleReport(mu=mu, s=s, steps=steps, n_samples=n_samples,
                        sample_mean=float(samples.mean()),
                        sample_std=float(samples.std()))
