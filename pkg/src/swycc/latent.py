"""Second-stage generation: a class-conditional denoising prior over
frozen encoder latents.

Stage 1 (the autoencoder) is frozen; every training image is encoded
once, latents are standardized per channel, and a small convolutional
denoiser learns the same v-parameterized objective on the latent grid --
the schedule and sampler code paths are reused verbatim.  Class identity
conditions the prior through a learned embedding added alongside the
time embedding; the embedding is dropped (zeroed) on ~10% of training
examples so classifier-free guidance works at generation time.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from . import tensor as T
from .checkpoint import CheckpointError, read_container, write_container
from .models import (ModelBundle, ParamSet, _conv_block, _norm, _res_block,
                     param_fingerprint, sinusoidal_embedding)
from .optim import ParamStore, adam_step, clip_global_norm
from .rng import PrngState
from .sampler import SamplerConfig, cfg_combine, sample_loop, sample_reconstruction
from .schedule import corrupt, v_target
from .tensor import Tensor, no_grad

LATENT_STD_FLOOR = 1e-6


@dataclass(frozen=True)
class PriorConfig:
    num_classes: int = 3
    hidden: int = 64
    num_blocks: int = 3
    time_dim: int = 32
    class_drop_rate: float = 0.1
    latent_shape: tuple[int, int, int] = (2, 2, 4)  # (h, w, C)


@dataclass(frozen=True)
class PriorTrainConfig:
    total_steps: int = 2_000
    batch_size: int = 32
    lr: float = 1e-3  # constant; the prior is tiny
    clip_norm: float = 1.0
    seed: int = 0
    ema_beta: float = 0.99


@dataclass
class LatentDataset:
    latents: np.ndarray  # (N, h, w, C), standardized per channel
    labels: np.ndarray   # (N,) int64
    mean: np.ndarray     # (C,)
    std: np.ndarray      # (C,)
    encoder_fingerprint: str

    def destandardize(self, z: np.ndarray) -> np.ndarray:
        return z * self.std.astype(z.dtype) + self.mean.astype(z.dtype)


def build_latent_dataset(images: np.ndarray, labels: np.ndarray,
                         bundle: ModelBundle, batch: int = 64) -> LatentDataset:
    """Encode every image with the frozen encoder; record channel stats."""
    outs = []
    with no_grad():
        for i in range(0, len(images), batch):
            outs.append(bundle.encode(Tensor(images[i:i + batch])).data)
    raw = np.concatenate(outs, axis=0)
    mean = raw.mean(axis=(0, 1, 2)).astype(np.float64)
    std = raw.std(axis=(0, 1, 2)).astype(np.float64)
    std = np.maximum(std, LATENT_STD_FLOOR)
    latents = ((raw - mean) / std).astype(np.float32)
    fp = param_fingerprint(bundle.params, ("encoder/",))
    return LatentDataset(latents=latents, labels=np.asarray(labels, dtype=np.int64),
                         mean=mean, std=std, encoder_fingerprint=fp)


def save_latent_dataset(path, ds: LatentDataset) -> None:
    meta = {"kind": "latent_dataset", "encoder_fingerprint": ds.encoder_fingerprint}
    write_container(path, meta, {
        "latent_dataset/latents": ds.latents,
        "latent_dataset/labels": ds.labels,
        "latent_dataset/mean": ds.mean,
        "latent_dataset/std": ds.std,
    })


def load_latent_dataset(path) -> LatentDataset:
    def check(meta):
        if meta.get("kind") != "latent_dataset":
            raise CheckpointError(f"{path}: not a latent dataset container")
    meta, tensors = read_container(path, validate_meta=check)
    return LatentDataset(latents=tensors["latent_dataset/latents"],
                         labels=tensors["latent_dataset/labels"],
                         mean=tensors["latent_dataset/mean"],
                         std=tensors["latent_dataset/std"],
                         encoder_fingerprint=meta["encoder_fingerprint"])


# ----------------------------------------------------------------------
# the prior net
# ----------------------------------------------------------------------

class LatentPrior:
    """Small conv denoiser over the latent grid, time+class conditioned."""

    def __init__(self, cfg: PriorConfig, params: dict[str, Tensor] | None = None):
        self.cfg = cfg
        self.params: dict[str, Tensor] = params if params is not None else {}

    def _ps(self, prng: PrngState | None = None) -> ParamSet:
        return ParamSet(self.params, prng=prng, dtype=np.float32)

    def forward(self, z_t, t, class_onehot: np.ndarray,
                ps: ParamSet | None = None) -> Tensor:
        """v-prediction; a zero one-hot row means 'class dropped'."""
        z_t = T.as_tensor(z_t)
        cfg = self.cfg
        n = z_t.shape[0]
        c = cfg.latent_shape[2]
        if z_t.shape[1:] != cfg.latent_shape:
            raise T.ShapeError(f"prior: latent shape {z_t.shape[1:]} != {cfg.latent_shape}")
        if class_onehot.shape != (n, cfg.num_classes):
            raise T.ShapeError("prior: class one-hot shape mismatch")
        ps = ps or self._ps()

        emb_dim = 2 * cfg.time_dim
        temb_np = sinusoidal_embedding(
            np.broadcast_to(np.asarray(t, dtype=np.float64), (n,)),
            cfg.time_dim).astype(z_t.dtype)
        temb = T.matmul(Tensor(temb_np), ps.dense("prior/temb/w", cfg.time_dim, emb_dim))
        cemb = T.matmul(Tensor(class_onehot.astype(z_t.data.dtype)),
                        ps.dense("prior/cemb/w", cfg.num_classes, emb_dim))
        emb = T.gelu(T.add(T.add(temb, cemb), ps.zeros("prior/emb/b", (emb_dim,))))

        h = _conv_block(ps, "prior/stem", z_t, c, cfg.hidden)
        for i in range(cfg.num_blocks):
            h = _res_block(ps, f"prior/res{i}", h, cfg.hidden, temb=emb)
        h = T.gelu(_norm(ps, "prior/out_gn", h, cfg.hidden))
        return _conv_block(ps, "prior/out", h, cfg.hidden, c, scale=0.05)

    def build(self, seed: int) -> "LatentPrior":
        h, w, c = self.cfg.latent_shape
        dummy = np.zeros((1, h, w, c), dtype=np.float32)
        onehot = np.zeros((1, self.cfg.num_classes), dtype=np.float32)
        self.forward(dummy, 0.5, onehot, ps=self._ps(prng=PrngState(seed)))
        return self


def one_hot(labels: np.ndarray, num_classes: int,
            drop_mask: np.ndarray | None = None) -> np.ndarray:
    out = np.zeros((len(labels), num_classes), dtype=np.float32)
    out[np.arange(len(labels)), np.asarray(labels, dtype=np.int64)] = 1.0
    if drop_mask is not None:
        out[np.asarray(drop_mask, dtype=bool)] = 0.0
    return out


@dataclass
class PriorTrainResult:
    prior: LatentPrior
    ema: list[float]          # EMA of the loss, one entry per step
    drop_fraction: float      # fraction of examples with class dropped


def train_prior(ds: LatentDataset, cfg: PriorConfig,
                tcfg: PriorTrainConfig) -> PriorTrainResult:
    """v-parameterized denoising on standardized latents with class dropout."""
    classes = np.unique(ds.labels)
    if len(classes) < 2:
        raise ValueError("train_prior needs >= 2 classes for conditional mode")
    root = PrngState(tcfg.seed)
    prior = LatentPrior(cfg).build(root.next_u64())
    prng = PrngState(root.next_u64())
    store = ParamStore(prior.params)
    n = len(ds.latents)
    ema = []
    ema_val = None
    dropped = 0
    total_examples = 0
    for _ in range(tcfg.total_steps):
        idx = prng.integers(n, (tcfg.batch_size,))
        z = ds.latents[idx]
        labels = ds.labels[idx]
        t = prng.uniform((tcfg.batch_size,))
        draw = corrupt(z, t, prng)
        v = v_target(z, draw.eps, t)
        drop = prng.bernoulli(cfg.class_drop_rate, (tcfg.batch_size,))
        dropped += int(drop.sum())
        total_examples += tcfg.batch_size
        onehot = one_hot(labels, cfg.num_classes, drop_mask=drop)
        store.zero_grads()
        v_hat = prior.forward(draw.x_t, t, onehot)
        loss = T.mean(T.square(T.sub(v_hat, Tensor(v))))
        loss.backward()
        grads = store.grads()
        clip_global_norm(grads, tcfg.clip_norm)
        adam_step(store, grads, tcfg.lr)
        store.zero_grads()
        val = float(loss.data)
        ema_val = val if ema_val is None else tcfg.ema_beta * ema_val + (1 - tcfg.ema_beta) * val
        ema.append(ema_val)
    return PriorTrainResult(prior=prior, ema=ema,
                            drop_fraction=dropped / max(total_examples, 1))


def save_prior(path, prior: LatentPrior, ds: LatentDataset,
               extra_meta: dict | None = None) -> None:
    meta = {"kind": "prior", "config": asdict(prior.cfg),
            "stats": {"mean": ds.mean.tolist(), "std": ds.std.tolist()},
            "encoder_fingerprint": ds.encoder_fingerprint}
    if extra_meta:
        meta["extra"] = extra_meta
    write_container(path, meta, {f"param/{k}": t.data
                                 for k, t in prior.params.items()})


def load_prior(path) -> tuple[LatentPrior, dict]:
    def check(meta):
        if meta.get("kind") != "prior":
            raise CheckpointError(f"{path}: not a prior checkpoint")
    meta, tensors = read_container(path, validate_meta=check)
    c = dict(meta["config"])
    c["latent_shape"] = tuple(c["latent_shape"])
    cfg = PriorConfig(**c)
    prior = LatentPrior(cfg).build(seed=0)
    for k, t in prior.params.items():
        key = f"param/{k}"
        if key not in tensors or tensors[key].shape != t.data.shape:
            raise CheckpointError(f"{path}: missing or mismatched parameter {k!r}")
        t.data = tensors[key]
    return prior, meta


# ----------------------------------------------------------------------
# two-stage generation
# ----------------------------------------------------------------------

def sample_latents(prior: LatentPrior, class_id: int, n: int,
                   cfg: SamplerConfig) -> np.ndarray:
    """Sample standardized latents via the shared sampling loop."""
    k = prior.cfg.num_classes
    if not 0 <= class_id < k:
        raise ValueError(f"class_id {class_id} outside [0, {k})")
    h, w, c = prior.cfg.latent_shape
    cond = one_hot(np.full(n, class_id), k)
    uncond = np.zeros((n, k), dtype=np.float32)

    def predict(z_t: np.ndarray, t: float) -> np.ndarray:
        v_c = prior.forward(z_t, t, cond).data
        if cfg.guidance == 0.0:
            return v_c
        v_u = prior.forward(z_t, t, uncond).data
        return cfg_combine(v_c, v_u, cfg.guidance)

    with no_grad():
        return sample_loop(predict, (n, h, w, c), cfg, PrngState(cfg.seed))


def generate(class_id: int, prior: LatentPrior, ds_stats: LatentDataset | dict,
             bundle: ModelBundle, n: int = 1,
             latent_cfg: SamplerConfig | None = None,
             refine_cfg: SamplerConfig | None = None) -> np.ndarray:
    """noise -> latent -> image: sample a latent with CFG, de-standardize,
    then decode through the initial decoder + refinement sampler."""
    latent_cfg = latent_cfg or SamplerConfig(steps=50, guidance=0.5, seed=0)
    refine_cfg = refine_cfg or SamplerConfig(steps=50, guidance=0.5, seed=1)
    if isinstance(ds_stats, dict):
        mean = np.asarray(ds_stats["mean"], dtype=np.float64)
        std = np.asarray(ds_stats["std"], dtype=np.float64)
    else:
        mean, std = ds_stats.mean, ds_stats.std
    expected = (bundle.encoder_cfg.latent_size, bundle.encoder_cfg.latent_size,
                bundle.encoder_cfg.latent_channels)
    if tuple(prior.cfg.latent_shape) != expected:
        raise ValueError(f"prior latent shape {prior.cfg.latent_shape} does not match "
                         f"autoencoder latent shape {expected}")
    z_std = sample_latents(prior, class_id, n, latent_cfg)
    z = (z_std * std + mean).astype(np.float32)
    return sample_reconstruction(z, bundle, refine_cfg)
