"""The networks: encoder E, initial decoder, denoising refiner U-Net,
frozen feature net, and the baseline patch discriminator.

Parameters for every net live in one flat ``name -> Tensor`` map inside a
:class:`ModelBundle`, namespaced by net ("encoder/...", "d_initial/...",
"d_refine/...", "f_frozen/...", "disc/...").  Nets are defined once as
forward functions; a :class:`ParamSet` either materializes parameters on
first use (at build time, with seeded init) or fetches them afterwards,
so the registry can never drift from the forward pass.

Architecture notes (fixed choices where the literature leaves room):
  - ResNet blocks are pre-norm: GN -> GeLU -> conv, twice, with the
    second conv zero-initialized so blocks start as identities.
  - Downsampling is a stride-2 conv; upsampling is conv + depth-to-space.
  - Time conditioning: sinusoidal embedding of t through a 2-layer MLP,
    projected per res block and added channelwise.
  - The refiner conditions on the pseudo-reconstruction purely by channel
    concatenation at the input.
  - Decoder outputs are clamped to [-2, 2] in normalized pixel space.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field, asdict

import numpy as np

from .rng import PrngState
from .tensor import (Tensor, add, as_tensor, clamp, concat, conv2d,
                     depth_to_space, gelu, group_norm, leaky_relu, matmul,
                     mul, reshape, self_attention, ShapeError)

GN_EPS = 1e-5


def default_groups(channels: int) -> int:
    """GroupNorm group count: min(8, C), degrading gracefully for tiny C."""
    g = min(8, channels)
    if channels % g:
        raise ShapeError(f"channel count {channels} not divisible by {g} groups")
    return g


# ----------------------------------------------------------------------
# configs
# ----------------------------------------------------------------------

@dataclass(frozen=True)
class EncoderConfig:
    """Fully convolutional encoder; mirrored by the initial decoder."""
    base_channels: int = 32
    num_res_blocks: int = 4
    num_downsamples: int = 3
    latent_channels: int = 8
    channel_multipliers: tuple[int, ...] = (1, 2, 2, 4)
    image_size: int = 16

    def __post_init__(self):
        if len(self.channel_multipliers) != self.num_downsamples + 1:
            raise ValueError("channel_multipliers must have num_downsamples+1 entries")
        if self.latent_channels < 1:
            raise ValueError("latent_channels must be >= 1")
        if self.image_size % (1 << self.num_downsamples):
            raise ValueError("image_size must be divisible by 2^num_downsamples")

    @property
    def stage_channels(self) -> tuple[int, ...]:
        return tuple(self.base_channels * m for m in self.channel_multipliers)

    @property
    def latent_size(self) -> int:
        return self.image_size >> self.num_downsamples


def latent_channels_for_ratio(k: int) -> int:
    """Relative compression ratio K -> latent channel count C = 8/K."""
    if k not in (1, 2, 4, 8):
        raise ValueError(f"compression ratio must divide 8, got {k}")
    return 8 // k


@dataclass(frozen=True)
class UNetConfig:
    """Denoising refiner; stage lists must share one length."""
    base_channels: int = 32
    channel_multiplier: tuple[int, ...] = (1, 2, 4)
    num_res_blocks: tuple[int, ...] = (1, 2, 2)
    downsampling_factor: tuple[int, ...] = (1, 2, 2)
    attn_resolutions: tuple[int, ...] = (4,)
    dropout: float = 0.0
    time_dim: int = 64

    def __post_init__(self):
        ls = {len(self.channel_multiplier), len(self.num_res_blocks),
              len(self.downsampling_factor)}
        if len(ls) != 1:
            raise ValueError("stage lists must have equal lengths")
        if any(d not in (1, 2) for d in self.downsampling_factor):
            raise ValueError("downsampling factors must be 1 or 2")
        if self.downsampling_factor[0] != 1:
            raise ValueError("first stage must not downsample")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")

    @classmethod
    def paper_scale(cls, base_channels: int = 128) -> "UNetConfig":
        return cls(base_channels=base_channels,
                   channel_multiplier=(1, 2, 4, 8),
                   num_res_blocks=(2, 4, 8, 8),
                   downsampling_factor=(1, 2, 2, 2),
                   attn_resolutions=(16,),
                   dropout=0.0)

    @property
    def stage_channels(self) -> tuple[int, ...]:
        return tuple(self.base_channels * m for m in self.channel_multiplier)


FROZEN_CHANNELS = (16, 32, 64, 64)
FROZEN_STRIDES = (2, 2, 2, 1)  # final stage keeps spatial structure
DISC_CHANNELS = (32, 64, 128)

SWYCC_TRAINABLE = ("encoder/", "d_initial/", "d_refine/")
GAN_GENERATOR = ("encoder/", "d_initial/")
GAN_DISCRIMINATOR = ("disc/",)


# ----------------------------------------------------------------------
# parameter registry
# ----------------------------------------------------------------------

class ParamSet:
    """Flat parameter registry; creates on first use while building."""

    def __init__(self, params: dict[str, Tensor], prng: PrngState | None = None,
                 dtype=np.float32, trainable: bool = True):
        self.params = params
        self.prng = prng
        self.dtype = dtype
        self.trainable = trainable

    @property
    def building(self) -> bool:
        return self.prng is not None

    def _get(self, name: str, shape: tuple[int, ...], std: float | None = None,
             fill: float | None = None) -> Tensor:
        if name in self.params:
            t = self.params[name]
            if t.shape != tuple(shape):
                raise ShapeError(f"parameter {name!r}: stored shape {t.shape} != {shape}")
            return t
        if not self.building:
            raise KeyError(f"unknown parameter {name!r} (model not built for this path)")
        if std is not None:
            data = (self.prng.normal(shape) * std).astype(self.dtype)
        else:
            data = np.full(shape, fill, dtype=self.dtype)
        t = Tensor(data, requires_grad=self.trainable)
        self.params[name] = t
        return t

    def conv(self, name: str, kh: int, kw: int, cin: int, cout: int,
             scale: float = 1.0) -> Tensor:
        return self._get(name, (kh, kw, cin, cout),
                         std=scale * math.sqrt(2.0 / (kh * kw * cin)))

    def dense(self, name: str, din: int, dout: int, scale: float = 1.0) -> Tensor:
        return self._get(name, (din, dout), std=scale * math.sqrt(2.0 / din))

    def zeros(self, name: str, shape) -> Tensor:
        return self._get(name, tuple(shape), fill=0.0)

    def ones(self, name: str, shape) -> Tensor:
        return self._get(name, tuple(shape), fill=1.0)


def _spread(total: int, levels: int) -> list[int]:
    base, rem = divmod(total, levels)
    return [base + (1 if i < rem else 0) for i in range(levels)]


def _conv_block(ps: ParamSet, name: str, x, cin: int, cout: int,
                stride: int = 1, k: int = 3, scale: float = 1.0):
    w = ps.conv(f"{name}/w", k, k, cin, cout, scale=scale)
    b = ps.zeros(f"{name}/b", (cout,))
    return conv2d(x, w, stride=stride, bias=b)


def _zero_conv_block(ps: ParamSet, name: str, x, cin: int, cout: int):
    w = ps.zeros(f"{name}/w", (3, 3, cin, cout))
    b = ps.zeros(f"{name}/b", (cout,))
    return conv2d(x, w, bias=b)


def _norm(ps: ParamSet, name: str, x, c: int):
    return group_norm(x, default_groups(c), GN_EPS,
                      ps.ones(f"{name}/g", (c,)), ps.zeros(f"{name}/b", (c,)))


def _res_block(ps: ParamSet, name: str, x, cout: int, temb=None,
               drop_rate: float = 0.0, prng: PrngState | None = None):
    cin = x.shape[-1]
    h = gelu(_norm(ps, f"{name}/gn1", x, cin))
    h = _conv_block(ps, f"{name}/conv1", h, cin, cout)
    if temb is not None:
        proj = add(matmul(temb, ps.dense(f"{name}/temb/w", temb.shape[-1], cout)),
                   ps.zeros(f"{name}/temb/b", (cout,)))
        h = add(h, reshape(proj, (x.shape[0], 1, 1, cout)))
    h = gelu(_norm(ps, f"{name}/gn2", h, cout))
    if drop_rate > 0.0 and prng is not None:
        keep = (prng.uniform(h.shape) >= drop_rate).astype(h.dtype) / (1.0 - drop_rate)
        h = mul(h, Tensor(keep))
    h = _zero_conv_block(ps, f"{name}/conv2", h, cout, cout)
    if cin != cout:
        x = conv2d(x, ps.conv(f"{name}/skip/w", 1, 1, cin, cout),
                   bias=ps.zeros(f"{name}/skip/b", (cout,)))
    return add(x, h)


def _attn_block(ps: ParamSet, name: str, x, heads: int = 4):
    c = x.shape[-1]
    heads = min(heads, c)
    params = {
        "wq": ps.dense(f"{name}/wq", c, c, scale=0.5),
        "wk": ps.dense(f"{name}/wk", c, c, scale=0.5),
        "wv": ps.dense(f"{name}/wv", c, c, scale=0.5),
        "wo": ps.dense(f"{name}/wo", c, c, scale=0.1),
    }
    return self_attention(x, heads, params)


def sinusoidal_embedding(t: np.ndarray, dim: int) -> np.ndarray:
    """Embed continuous t in [0,1] with geometrically spaced frequencies."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(np.linspace(0.0, math.log(1e4), half))
    ang = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)


# ----------------------------------------------------------------------
# model bundle
# ----------------------------------------------------------------------

@dataclass
class ModelBundle:
    encoder_cfg: EncoderConfig
    unet_cfg: UNetConfig
    params: dict[str, Tensor]
    frozen_seed: int
    init_seed: int
    has_discriminator: bool
    dtype: object = np.float32
    gelu_variant: str = "tanh"
    latent_stats: dict | None = None
    counters: dict[str, int] = field(default_factory=dict)

    # -- helpers -------------------------------------------------------
    def _ps(self, trainable: bool = True, prng: PrngState | None = None) -> ParamSet:
        return ParamSet(self.params, prng=prng, dtype=self.dtype, trainable=trainable)

    def subset(self, prefixes: tuple[str, ...]) -> dict[str, Tensor]:
        return {k: v for k, v in self.params.items()
                if any(k.startswith(p) for p in prefixes)}

    def config_dict(self) -> dict:
        return {
            "encoder": asdict(self.encoder_cfg),
            "unet": asdict(self.unet_cfg),
            "frozen_seed": self.frozen_seed,
            "init_seed": self.init_seed,
            "has_discriminator": self.has_discriminator,
            "gelu_variant": self.gelu_variant,
        }

    # -- encoder ---------------------------------------------------------
    def encode(self, x, ps: ParamSet | None = None) -> Tensor:
        """Deterministic encoding, (N,H,W,3) -> (N,H/2^d,W/2^d,C)."""
        x = as_tensor(x)
        cfg = self.encoder_cfg
        div = 1 << cfg.num_downsamples
        if x.ndim != 4 or x.shape[1] % div or x.shape[2] % div:
            raise ShapeError(f"encode: spatial dims of {x.shape} must divide {div}")
        ps = ps or self._ps()
        chs = cfg.stage_channels
        blocks = _spread(cfg.num_res_blocks, cfg.num_downsamples + 1)
        h = _conv_block(ps, "encoder/stem", x, x.shape[-1], chs[0])
        for lvl in range(cfg.num_downsamples + 1):
            if lvl > 0:
                h = _conv_block(ps, f"encoder/down{lvl}", h, chs[lvl - 1], chs[lvl],
                                stride=2)
            for j in range(blocks[lvl]):
                h = _res_block(ps, f"encoder/l{lvl}/res{j}", h, chs[lvl])
        h = gelu(_norm(ps, "encoder/out_gn", h, chs[-1]))
        return _conv_block(ps, "encoder/out", h, chs[-1], cfg.latent_channels)

    # -- initial decoder -------------------------------------------------
    def decode_initial(self, z, ps: ParamSet | None = None) -> Tensor:
        """Pseudo-reconstruction: mirror of the encoder, depth-to-space ups."""
        z = as_tensor(z)
        cfg = self.encoder_cfg
        if z.ndim != 4 or z.shape[-1] != cfg.latent_channels:
            raise ShapeError(f"decode_initial: latent shape {z.shape} does not match "
                             f"C={cfg.latent_channels}")
        ps = ps or self._ps()
        chs = cfg.stage_channels
        blocks = _spread(cfg.num_res_blocks, cfg.num_downsamples + 1)
        h = _conv_block(ps, "d_initial/stem", z, cfg.latent_channels, chs[-1])
        for lvl in range(cfg.num_downsamples, -1, -1):
            for j in range(blocks[lvl]):
                h = _res_block(ps, f"d_initial/l{lvl}/res{j}", h, chs[lvl])
            if lvl > 0:
                h = _conv_block(ps, f"d_initial/up{lvl}", h, chs[lvl], chs[lvl - 1] * 4)
                h = depth_to_space(h, 2)
        h = gelu(_norm(ps, "d_initial/out_gn", h, chs[0]))
        h = _conv_block(ps, "d_initial/out", h, chs[0], 3, scale=0.05)
        return clamp(h, -2.0, 2.0)

    # -- refiner ----------------------------------------------------------
    def refine_predict(self, x_t, t, cond, drop: bool = False,
                       prng: PrngState | None = None,
                       ps: ParamSet | None = None) -> Tensor:
        """U-Net v-prediction on [x_t || cond] with sinusoidal time embedding.

        ``drop=True`` replaces the conditioning with zeros (the dropped /
        unconditional branch used for classifier-free guidance).
        """
        x_t = as_tensor(x_t)
        cond = as_tensor(cond)
        if cond.shape != x_t.shape:
            raise ShapeError(f"refine_predict: cond shape {cond.shape} != x_t {x_t.shape}")
        if drop:
            cond = Tensor(np.zeros_like(cond.data))
        cfg = self.unet_cfg
        ps = ps or self._ps()
        self.counters["refine_evals"] = self.counters.get("refine_evals", 0) + 1

        temb_np = sinusoidal_embedding(
            np.broadcast_to(np.asarray(t, dtype=np.float64), (x_t.shape[0],)),
            cfg.time_dim).astype(x_t.dtype)
        temb = matmul(Tensor(temb_np),
                      ps.dense("d_refine/temb/w1", cfg.time_dim, 2 * cfg.time_dim))
        temb = add(temb, ps.zeros("d_refine/temb/b1", (2 * cfg.time_dim,)))
        temb = matmul(gelu(temb),
                      ps.dense("d_refine/temb/w2", 2 * cfg.time_dim, 2 * cfg.time_dim))
        temb = add(temb, ps.zeros("d_refine/temb/b2", (2 * cfg.time_dim,)))

        chs = cfg.stage_channels
        h = concat([x_t, cond], axis=-1)
        h = _conv_block(ps, "d_refine/stem", h, h.shape[-1], chs[0])
        res = h.shape[1]
        drop_rate = cfg.dropout

        skips = []
        for i in range(len(chs)):
            if cfg.downsampling_factor[i] == 2:
                h = _conv_block(ps, f"d_refine/down{i}", h, chs[i - 1], chs[i], stride=2)
                res //= 2
            for j in range(cfg.num_res_blocks[i]):
                h = _res_block(ps, f"d_refine/d{i}/res{j}", h, chs[i], temb,
                               drop_rate, prng)
                if res in cfg.attn_resolutions:
                    h = _attn_block(ps, f"d_refine/d{i}/attn{j}", h)
                skips.append(h)

        h = _res_block(ps, "d_refine/mid/res0", h, chs[-1], temb, drop_rate, prng)
        if res in cfg.attn_resolutions:
            h = _attn_block(ps, "d_refine/mid/attn", h)
        h = _res_block(ps, "d_refine/mid/res1", h, chs[-1], temb, drop_rate, prng)

        for i in range(len(chs) - 1, -1, -1):
            for j in range(cfg.num_res_blocks[i]):
                # residual (additive) connection from the same-resolution block
                h = _res_block(ps, f"d_refine/u{i}/res{j}",
                               add(h, skips.pop()), chs[i], temb,
                               drop_rate, prng)
                if res in cfg.attn_resolutions:
                    h = _attn_block(ps, f"d_refine/u{i}/attn{j}", h)
            if cfg.downsampling_factor[i] == 2:
                h = _conv_block(ps, f"d_refine/up{i}", h, chs[i], chs[i - 1] * 4)
                h = depth_to_space(h, 2)
                res *= 2

        h = gelu(_norm(ps, "d_refine/out_gn", h, chs[0]))
        return _conv_block(ps, "d_refine/out", h, chs[0], 3, scale=0.05)

    # -- frozen feature net ------------------------------------------------
    def frozen_features(self, x, ps: ParamSet | None = None):
        """Fixed seeded conv features: returns (final_stage, all_stages)."""
        x = as_tensor(x)
        ps = ps or self._ps(trainable=False)
        h = x
        stages = []
        cin = x.shape[-1]
        for i, (c, stride) in enumerate(zip(FROZEN_CHANNELS, FROZEN_STRIDES)):
            h = gelu(_conv_block(ps, f"f_frozen/conv{i}", h, cin, c, stride=stride))
            stages.append(h)
            cin = c
        return stages[-1], stages

    # -- discriminator -------------------------------------------------------
    def discriminate(self, x, ps: ParamSet | None = None) -> Tensor:
        """Patch logits from a 3-stage stride-2 conv net, (N,h/8,w/8,1)."""
        if not self.has_discriminator:
            raise ValueError("bundle was built without a discriminator")
        x = as_tensor(x)
        ps = ps or self._ps()
        h = x
        cin = x.shape[-1]
        for i, c in enumerate(DISC_CHANNELS):
            h = leaky_relu(_conv_block(ps, f"disc/conv{i}", h, cin, c, stride=2), 0.2)
            cin = c
        return _conv_block(ps, "disc/out", h, cin, 1, k=1)


def build_bundle(encoder_cfg: EncoderConfig, unet_cfg: UNetConfig, seed: int,
                 with_discriminator: bool = False, frozen_seed: int = 7700,
                 dtype=np.float32) -> ModelBundle:
    """Materialize all parameters by tracing each net once on dummy input."""
    bundle = ModelBundle(encoder_cfg=encoder_cfg, unet_cfg=unet_cfg, params={},
                         frozen_seed=frozen_seed, init_seed=seed,
                         has_discriminator=with_discriminator, dtype=dtype)
    size = encoder_cfg.image_size
    dummy = np.zeros((1, size, size, 3), dtype=dtype)
    prng = PrngState(seed)
    # frozen net init comes from its own seed so every run shares one net
    bundle.frozen_features(dummy, ps=bundle._ps(trainable=False,
                                                prng=PrngState(frozen_seed)))
    build_ps = bundle._ps(prng=prng)
    z = bundle.encode(dummy, ps=build_ps)
    cond = bundle.decode_initial(z, ps=build_ps)
    bundle.refine_predict(dummy, 0.5, cond, ps=build_ps)
    if with_discriminator:
        bundle.discriminate(dummy, ps=build_ps)
    bundle.counters["refine_evals"] = 0
    return bundle


def param_fingerprint(params: dict[str, Tensor], prefixes: tuple[str, ...] | None = None) -> str:
    """SHA-256 over sorted (name, bytes) pairs; stable across runs."""
    h = hashlib.sha256()
    for name in sorted(params):
        if prefixes is not None and not any(name.startswith(p) for p in prefixes):
            continue
        h.update(name.encode())
        h.update(np.ascontiguousarray(params[name].data).tobytes())
    return h.hexdigest()


def param_count(params: dict[str, Tensor], prefixes: tuple[str, ...] | None = None) -> int:
    total = 0
    for name, t in params.items():
        if prefixes is None or any(name.startswith(p) for p in prefixes):
            total += t.size
    return total
