"""Joint optimization loops and training-state persistence.

Two modes share one recipe (linear warmup -> cosine decay, global-norm
gradient clipping, Adam):

  - ``swycc``: one optimizer over encoder + initial decoder + refiner,
    driven by the composite diffusion/MSE/perceptual objective.
  - ``gan``: alternating 1:1 updates -- discriminator (hinge) first, then
    the generator (MSE + perceptual + hinge gen term after a warm-start
    delay).  No refiner is involved.

The frozen feature net is never part of any ParamStore, so no step can
touch it.  All randomness (batch choice, corruption draws, dropout)
flows through the single PRNG stream carried in TrainState; checkpoints
persist it, so a resumed run continues bit-identically.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointError, read_container, write_container
from .losses import (LossBreakdown, LossConfig, adversarial_losses,
                     aux_perceptual_loss, mse_loss, total_loss)
from .models import (EncoderConfig, GAN_DISCRIMINATOR, GAN_GENERATOR,
                     ModelBundle, SWYCC_TRAINABLE, UNetConfig, build_bundle)
from .optim import ParamStore
from .rng import PrngState
from .tensor import NonFiniteError, Tensor, no_grad

log = logging.getLogger("swycc.trainer")

TRAIN_MODES = ("swycc", "gan")


@dataclass(frozen=True)
class TrainConfig:
    total_steps: int = 20_000
    batch_size: int = 16
    peak_lr: float = 3e-4
    warmup_steps: int = 200
    clip_norm: float = 1.0
    loss: LossConfig = field(default_factory=LossConfig)
    mode: str = "swycc"
    seed: int = 0
    checkpoint_every: int = 5_000
    metrics_every: int = 50
    ema_beta: float = 0.99

    def __post_init__(self):
        if self.mode not in TRAIN_MODES:
            raise ValueError(f"mode must be one of {TRAIN_MODES}")
        if not 0 <= self.warmup_steps < self.total_steps:
            raise ValueError("need 0 <= warmup_steps < total_steps")
        if self.clip_norm <= 0 or self.peak_lr <= 0 or self.batch_size < 1:
            raise ValueError("invalid optimizer hyperparameters")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["loss"] = LossConfig(**d["loss"])
        return cls(**d)


@dataclass
class TrainState:
    step: int
    stores: dict[str, ParamStore]
    prng: PrngState
    ema: dict[str, float] = field(default_factory=dict)
    incidents: int = 0

    def update_ema(self, bd: LossBreakdown, beta: float) -> None:
        for key, val in bd.as_dict().items():
            if key in self.ema:
                self.ema[key] = beta * self.ema[key] + (1.0 - beta) * val
            else:
                self.ema[key] = val


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup 0 -> peak over warmup_steps, then cosine decay to 0."""
    if not 0 <= step <= cfg.total_steps:
        raise ValueError(f"step {step} outside [0, {cfg.total_steps}]")
    if step < cfg.warmup_steps:
        return cfg.peak_lr * step / cfg.warmup_steps
    frac = (step - cfg.warmup_steps) / (cfg.total_steps - cfg.warmup_steps)
    return cfg.peak_lr * 0.5 * (1.0 + math.cos(math.pi * frac))


def make_stores(bundle: ModelBundle, mode: str) -> dict[str, ParamStore]:
    if mode == "swycc":
        return {"main": ParamStore(bundle.subset(SWYCC_TRAINABLE))}
    return {"gen": ParamStore(bundle.subset(GAN_GENERATOR)),
            "disc": ParamStore(bundle.subset(GAN_DISCRIMINATOR))}


def _apply_update(store: ParamStore, lr: float, clip_norm: float) -> float:
    flat = store.flatten_grads(store.grads())
    # accumulate the norm in f64: f32 dot over millions of entries drifts
    # past the +-1e-6 contract
    f64 = flat.astype(np.float64)
    norm = float(np.sqrt(np.dot(f64, f64)))
    if norm > clip_norm:
        flat *= clip_norm / norm
        f64 = flat.astype(np.float64)
    post = float(np.sqrt(np.dot(f64, f64)))
    if post > clip_norm + 1e-6:
        raise AssertionError(f"clip postcondition violated: {post} > {clip_norm}")
    store.adam_flat(flat, lr, beta1=0.9, beta2=0.999, eps=1e-8)
    store.zero_grads()
    return post


def train_step_swycc(batch: np.ndarray, state: TrainState, bundle: ModelBundle,
                     cfg: TrainConfig) -> LossBreakdown:
    """One composite-loss step; rejected (parameters untouched) if the
    loss turns non-finite."""
    lr = lr_at(state.step + 1, cfg)  # this update completes step+1
    store = state.stores["main"]
    store.zero_grads()
    try:
        total, bd = total_loss(batch, bundle, cfg.loss, state.prng)
        total.backward()
    except NonFiniteError as exc:
        state.incidents += 1
        state.step += 1
        store.zero_grads()
        log.warning("step %d rejected: %s", state.step, exc)
        return LossBreakdown(total=float("nan"))
    bd.grad_norm = _apply_update(store, lr, cfg.clip_norm)
    state.step += 1
    state.update_ema(bd, cfg.ema_beta)
    return bd


def train_step_gan(batch: np.ndarray, state: TrainState, bundle: ModelBundle,
                   cfg: TrainConfig) -> LossBreakdown:
    """Alternating update: discriminator hinge step, then generator step."""
    lr = lr_at(state.step + 1, cfg)  # this update completes step+1
    gen_store, disc_store = state.stores["gen"], state.stores["disc"]
    lcfg = cfg.loss
    try:
        # discriminator sub-step on a detached fake
        with no_grad():
            fake_const = bundle.decode_initial(bundle.encode(Tensor(batch))).data
        gen_store.zero_grads()
        disc_store.zero_grads()
        _, disc_loss = adversarial_losses(batch, fake_const, bundle)
        disc_loss.backward()
        _apply_update(disc_store, lr, cfg.clip_norm)

        # generator sub-step; discriminator params receive grads through the
        # hinge term but are not updated here
        x_init = bundle.decode_initial(bundle.encode(Tensor(batch)))
        bd = LossBreakdown(disc=float(disc_loss.data))
        m = mse_loss(Tensor(batch), x_init)
        bd.mse = float(m.data)
        gen_total = m * lcfg.lambda_m if lcfg.lambda_m > 0 else m * 0.0
        if lcfg.lambda_p > 0:
            p = aux_perceptual_loss(Tensor(batch), x_init, bundle, lcfg)
            bd.perceptual = float(p.data)
            gen_total = gen_total + p * lcfg.lambda_p
        adv_active = lcfg.adversarial_weight > 0 and state.step >= lcfg.adversarial_delay
        if adv_active:
            gen_adv, _ = adversarial_losses(batch, x_init, bundle)
            bd.gen_adv = float(gen_adv.data)
            gen_total = gen_total + gen_adv * lcfg.adversarial_weight
        bd.total = float(gen_total.data)
        if not np.isfinite(bd.total) or not np.isfinite(bd.disc):
            raise NonFiniteError("gan step: non-finite loss")
        gen_total.backward()
    except NonFiniteError as exc:
        state.incidents += 1
        state.step += 1
        gen_store.zero_grads()
        disc_store.zero_grads()
        log.warning("step %d rejected: %s", state.step, exc)
        return LossBreakdown(total=float("nan"))
    bd.grad_norm = _apply_update(gen_store, lr, cfg.clip_norm)
    disc_store.zero_grads()
    state.step += 1
    state.update_ema(bd, cfg.ema_beta)
    return bd


# ----------------------------------------------------------------------
# checkpoint persistence (model parameters + full training state)
# ----------------------------------------------------------------------

def save_checkpoint(path, bundle: ModelBundle, state: TrainState | None = None,
                    train_cfg: TrainConfig | None = None,
                    extra_meta: dict | None = None) -> None:
    tensors = {f"param/{k}": t.data for k, t in bundle.params.items()}
    meta: dict = {"kind": "model", "configs": bundle.config_dict(),
                  "dtype": np.dtype(bundle.dtype).name,
                  "latent_stats": bundle.latent_stats}
    if state is not None:
        for sname, store in state.stores.items():
            for k in store.names():
                tensors[f"moment_m/{sname}/{k}"] = store.m[k]
                tensors[f"moment_v/{sname}/{k}"] = store.v[k]
        meta["train_state"] = {
            "step": state.step,
            "prng": state.prng.state,
            "incidents": state.incidents,
            "ema": state.ema,
            "adam_steps": {sname: store.step for sname, store in state.stores.items()},
            "store_names": {sname: store.names() for sname, store in state.stores.items()},
        }
    if train_cfg is not None:
        meta["train_config"] = train_cfg.to_dict()
    if extra_meta:
        meta["extra"] = extra_meta
    write_container(path, meta, tensors)


def _configs_from_meta(meta: dict) -> tuple[EncoderConfig, UNetConfig]:
    c = meta["configs"]
    enc = dict(c["encoder"])
    enc["channel_multipliers"] = tuple(enc["channel_multipliers"])
    unet = dict(c["unet"])
    for k in ("channel_multiplier", "num_res_blocks", "downsampling_factor",
              "attn_resolutions"):
        unet[k] = tuple(unet[k])
    return EncoderConfig(**enc), UNetConfig(**unet)


def load_checkpoint(path, expected_config: dict | None = None
                    ) -> tuple[ModelBundle, TrainState | None, dict]:
    """Rebuild a bundle (and training state, if saved) from a container.

    ``expected_config`` (a ``ModelBundle.config_dict()``) is compared
    against the stored one before any tensor data is read.
    """
    def check(meta):
        if meta.get("kind") != "model":
            raise CheckpointError(f"{path}: not a model checkpoint")
        if expected_config is not None and meta["configs"] != _roundtrip_json(expected_config):
            raise CheckpointError(
                f"{path}: architecture config mismatch\n"
                f"  stored:   {meta['configs']}\n"
                f"  expected: {expected_config}")

    meta, tensors = read_container(path, validate_meta=check)
    enc_cfg, unet_cfg = _configs_from_meta(meta)
    c = meta["configs"]
    bundle = build_bundle(enc_cfg, unet_cfg, seed=c["init_seed"],
                          with_discriminator=c["has_discriminator"],
                          frozen_seed=c["frozen_seed"],
                          dtype=np.dtype(meta.get("dtype", "float32")))
    bundle.latent_stats = meta.get("latent_stats")
    for k, t in bundle.params.items():
        key = f"param/{k}"
        if key not in tensors:
            raise CheckpointError(f"{path}: missing parameter {k!r}")
        if tensors[key].shape != t.data.shape:
            raise CheckpointError(f"{path}: shape mismatch for {k!r}")
        t.data = tensors[key]

    state = None
    if "train_state" in meta:
        ts = meta["train_state"]
        stores = {}
        for sname, names in ts["store_names"].items():
            store = ParamStore({k: bundle.params[k] for k in names})
            store.step = ts["adam_steps"][sname]
            for k in names:
                # m/v are views into the store's flat buffers; write through
                store.m[k][...] = tensors[f"moment_m/{sname}/{k}"]
                store.v[k][...] = tensors[f"moment_v/{sname}/{k}"]
            stores[sname] = store
        state = TrainState(step=ts["step"], stores=stores,
                           prng=PrngState(ts["prng"]), ema=dict(ts["ema"]),
                           incidents=ts["incidents"])
    return bundle, state, meta


def _roundtrip_json(d: dict) -> dict:
    # JSON turns tuples into lists; normalize for comparison
    return json.loads(json.dumps(d))


# ----------------------------------------------------------------------
# fit loop
# ----------------------------------------------------------------------

_CSV_COLUMNS = ["step", "lr", "ae", "mse", "perceptual", "gen_adv", "disc",
                "total", "ema_total", "grad_norm"]


def fit(images: np.ndarray, cfg: TrainConfig,
        encoder_cfg: EncoderConfig | None = None,
        unet_cfg: UNetConfig | None = None,
        out_dir=None, resume=None,
        progress_every: int = 0) -> tuple[ModelBundle, TrainState, Path | None]:
    """Run the training loop with periodic checkpoint/metric emission.

    Returns (bundle, state, final_checkpoint_path).  ``resume`` continues
    a saved run bit-identically in deterministic mode.
    """
    if len(images) == 0:
        raise ValueError("fit: dataset is empty")
    if resume is not None:
        bundle, state, meta = load_checkpoint(resume)
        if state is None:
            raise CheckpointError(f"{resume}: checkpoint has no training state")
        cfg = TrainConfig.from_dict(meta["train_config"])
    else:
        encoder_cfg = encoder_cfg or EncoderConfig()
        unet_cfg = unet_cfg or UNetConfig()
        root = PrngState(cfg.seed)
        init_seed = root.next_u64()
        train_seed = root.next_u64()
        bundle = build_bundle(encoder_cfg, unet_cfg, seed=init_seed,
                              with_discriminator=(cfg.mode == "gan"))
        state = TrainState(step=0, stores=make_stores(bundle, cfg.mode),
                           prng=PrngState(train_seed))

    out_dir = Path(out_dir) if out_dir is not None else None
    csv_fh = csv_writer = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        mode_flag = "a" if resume is not None and (out_dir / "metrics.csv").exists() else "w"
        csv_fh = open(out_dir / "metrics.csv", mode_flag, newline="")
        csv_writer = csv.writer(csv_fh)
        if mode_flag == "w":
            csv_writer.writerow(_CSV_COLUMNS)

    step_fn = train_step_swycc if cfg.mode == "swycc" else train_step_gan
    n = len(images)
    final_path = None
    try:
        while state.step < cfg.total_steps:
            lr = lr_at(state.step + 1, cfg)
            idx = state.prng.integers(n, (cfg.batch_size,))
            bd = step_fn(images[idx], state, bundle, cfg)
            if progress_every and state.step % progress_every == 0:
                log.info("step %d/%d lr %.2e total %.4f ema %.4f",
                         state.step, cfg.total_steps, lr, bd.total,
                         state.ema.get("total", float("nan")))
            if csv_writer is not None and (state.step % cfg.metrics_every == 0
                                           or state.step == cfg.total_steps):
                csv_writer.writerow([
                    state.step, f"{lr:.8g}", f"{bd.ae:.8g}", f"{bd.mse:.8g}",
                    f"{bd.perceptual:.8g}", f"{bd.gen_adv:.8g}", f"{bd.disc:.8g}",
                    f"{bd.total:.8g}", f"{state.ema.get('total', 0.0):.8g}",
                    f"{getattr(bd, 'grad_norm', 0.0):.8g}"])
                csv_fh.flush()
            if out_dir is not None and (state.step % cfg.checkpoint_every == 0
                                        or state.step == cfg.total_steps):
                ckpt = out_dir / f"ckpt_{state.step}.swyc"
                save_checkpoint(ckpt, bundle, state, cfg)
                final_path = ckpt
    finally:
        if csv_fh is not None:
            csv_fh.close()
    if out_dir is not None and final_path != out_dir / f"ckpt_{state.step}.swyc":
        final_path = out_dir / f"ckpt_{state.step}.swyc"
        save_checkpoint(final_path, bundle, state, cfg)
    return bundle, state, final_path
