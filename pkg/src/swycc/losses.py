"""Training objectives: diffusion autoencoding loss, direct MSE and
perceptual penalties on the pseudo-reconstruction, the composite total,
and the hinge losses of the adversarial baseline.

The diffusion term is computed in v-space: with w_t = sigma_t^-2 the
weighted x-space MSE equals plain v-space MSE (see the weighting identity
in tests/test_schedule.py), which avoids the sigma -> 0 blow-up.  Each
call is a single-sample Monte Carlo estimate: one (t, eps) draw per batch
element per step.

Gradient routing: the MSE/perceptual terms penalize the initial decoder's
output only, reaching E and D_Initial; the diffusion term additionally
reaches D_Refine through the prediction and through the conditioning.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .models import ModelBundle
from .rng import PrngState
from .schedule import corrupt, v_target
from .tensor import NonFiniteError, Tensor


@dataclass(frozen=True)
class LossConfig:
    lambda_p: float = 0.1
    lambda_m: float = 1.0
    cond_dropout_rate: float = 0.1
    adversarial_weight: float = 0.1   # baseline only
    adversarial_delay: int = 500      # steps before the generator sees the adv term
    perceptual_kind: str = "perceptual"  # or "dists"

    def __post_init__(self):
        if self.lambda_p < 0 or self.lambda_m < 0 or self.adversarial_weight < 0:
            raise ValueError("loss weights must be >= 0")
        if not 0.0 <= self.cond_dropout_rate < 1.0:
            raise ValueError("cond_dropout_rate must be in [0, 1)")
        if self.perceptual_kind not in ("perceptual", "dists"):
            raise ValueError("perceptual_kind must be 'perceptual' or 'dists'")


@dataclass
class LossBreakdown:
    ae: float = 0.0
    mse: float = 0.0
    perceptual: float = 0.0
    total: float = 0.0
    gen_adv: float = 0.0
    disc: float = 0.0
    grad_norm: float = 0.0  # instrumentation, not a loss term

    def as_dict(self) -> dict[str, float]:
        return {"ae": self.ae, "mse": self.mse, "perceptual": self.perceptual,
                "total": self.total, "gen_adv": self.gen_adv, "disc": self.disc}


def mse_loss(x, y) -> Tensor:
    """Mean squared error over all elements."""
    x, y = T.as_tensor(x), T.as_tensor(y)
    if x.shape != y.shape:
        raise T.ShapeError(f"mse_loss shape mismatch: {x.shape} vs {y.shape}")
    return T.mean(T.square(T.sub(x, y)))


def perceptual_loss(x, x_init, bundle: ModelBundle) -> Tensor:
    """MSE between final-stage frozen features of x and x_init."""
    fx, _ = bundle.frozen_features(x)
    fy, _ = bundle.frozen_features(x_init)
    return T.mean(T.square(T.sub(fx, fy)))


_SSIM_C1 = 0.01
_SSIM_C2 = 0.03


def dists_like_loss(x, x_init, bundle: ModelBundle) -> Tensor:
    """1 - mean SSIM-style similarity across all frozen feature stages.

    Per stage and channel, global means/variances/covariance over the
    spatial grid feed the standard stabilized similarity product; the
    result lies in [0, 2].
    """
    _, stages_x = bundle.frozen_features(x)
    _, stages_y = bundle.frozen_features(x_init)
    sims = []
    for fx, fy in zip(stages_x, stages_y):
        mx = T.mean(fx, axis=(1, 2), keepdims=True)
        my = T.mean(fy, axis=(1, 2), keepdims=True)
        dx = T.sub(fx, mx)
        dy = T.sub(fy, my)
        vx = T.mean(T.square(dx), axis=(1, 2), keepdims=True)
        vy = T.mean(T.square(dy), axis=(1, 2), keepdims=True)
        cov = T.mean(T.mul(dx, dy), axis=(1, 2), keepdims=True)
        lum = T.div(T.add(T.mul(T.mul(mx, my), 2.0), _SSIM_C1),
                    T.add(T.add(T.square(mx), T.square(my)), _SSIM_C1))
        struct = T.div(T.add(T.mul(cov, 2.0), _SSIM_C2),
                       T.add(T.add(vx, vy), _SSIM_C2))
        sims.append(T.mean(T.mul(lum, struct)))
    total = sims[0]
    for s in sims[1:]:
        total = T.add(total, s)
    return T.sub(1.0, T.mul(total, 1.0 / len(sims)))


def aux_perceptual_loss(x, x_init, bundle: ModelBundle, cfg: LossConfig) -> Tensor:
    if cfg.perceptual_kind == "dists":
        return dists_like_loss(x, x_init, bundle)
    return perceptual_loss(x, x_init, bundle)


def diffusion_ae_loss(x: np.ndarray, bundle: ModelBundle, cfg: LossConfig,
                      prng: PrngState, x_init: Tensor | None = None,
                      cond_mask: np.ndarray | None = None) -> Tensor:
    """Single-draw estimate of the conditional denoising loss, in v-space.

    Draw order is fixed (t, then eps, then the conditioning-dropout mask)
    so a caller-supplied ``cond_mask`` leaves the (t, eps) draw unchanged.
    ``x_init`` lets the caller reuse an already computed pseudo-
    reconstruction; otherwise it is computed here.
    """
    x = np.asarray(x)
    n = x.shape[0]
    if x_init is None:
        x_init = bundle.decode_initial(bundle.encode(Tensor(x)))
    t = prng.uniform((n,))
    draw = corrupt(x, t, prng)
    v = v_target(x, draw.eps, t)
    if cond_mask is None:
        cond_mask = (prng.uniform((n,)) >= cfg.cond_dropout_rate)
    keep = cond_mask.reshape(n, 1, 1, 1).astype(x.dtype)
    cond = T.mul(x_init, Tensor(keep))
    v_hat = bundle.refine_predict(Tensor(draw.x_t), t, cond, prng=prng)
    return T.mean(T.square(T.sub(v_hat, Tensor(v))))


def total_loss(x: np.ndarray, bundle: ModelBundle, cfg: LossConfig,
               prng: PrngState) -> tuple[Tensor, LossBreakdown]:
    """Composite objective: ae + lambda_p * perceptual + lambda_m * mse.

    Returns the differentiable total and a float breakdown for logging.
    """
    x = np.asarray(x)
    x_init = bundle.decode_initial(bundle.encode(Tensor(x)))
    ae = diffusion_ae_loss(x, bundle, cfg, prng, x_init=x_init)
    total = ae
    bd = LossBreakdown(ae=float(ae.data))
    if cfg.lambda_m > 0:
        m = mse_loss(Tensor(x), x_init)
        bd.mse = float(m.data)
        total = T.add(total, T.mul(m, cfg.lambda_m))
    else:
        bd.mse = float(mse_loss(Tensor(x), x_init.detach()).data)
    if cfg.lambda_p > 0:
        p = aux_perceptual_loss(Tensor(x), x_init, bundle, cfg)
        bd.perceptual = float(p.data)
        total = T.add(total, T.mul(p, cfg.lambda_p))
    bd.total = float(total.data)
    if not np.isfinite(bd.total):
        raise NonFiniteError("total_loss: non-finite loss value")
    return total, bd


def adversarial_losses(x_real, x_fake, bundle: ModelBundle) -> tuple[Tensor, Tensor]:
    """Hinge losses for the patch discriminator baseline.

    disc = mean(relu(1 - D(real))) + mean(relu(1 + D(fake)))
    gen  = -mean(D(fake))
    """
    x_real, x_fake = T.as_tensor(x_real), T.as_tensor(x_fake)
    if x_real.shape != x_fake.shape:
        raise T.ShapeError(f"adversarial_losses shape mismatch: "
                           f"{x_real.shape} vs {x_fake.shape}")
    logits_real = bundle.discriminate(x_real)
    logits_fake = bundle.discriminate(x_fake)
    disc = T.add(T.mean(T.relu(T.sub(1.0, logits_real))),
                 T.mean(T.relu(T.add(1.0, logits_fake))))
    gen = T.mul(T.mean(logits_fake), -1.0)
    return gen, disc
