"""Command-line interface tying the pieces together.

Subcommands: gen-data, train, reconstruct, variance-map,
sweep-compression, sweep-steps, sweep-cfg, latents {build,train,generate},
grad-check, oracle-check.  Every source of randomness is controlled by
--seed flags; runs are deterministic by construction (single stream,
fixed accumulation order).
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import tensor as T
from .config import apply_overrides, build_configs, parse_config_file
from .data import DatasetSpec, ToyDataset, generate_dataset, load_dataset, save_dataset
from .gradcheck import gradient_check
from .latent import (PriorConfig, PriorTrainConfig,
                     build_latent_dataset, generate, load_latent_dataset,
                     load_prior, save_latent_dataset, save_prior, train_prior)
from .losses import total_loss
from .metrics import psnr
from .models import (EncoderConfig, UNetConfig, build_bundle,
                     latent_channels_for_ratio)
from .ppm import montage, write_ppm
from .rng import PrngState
from .sampler import (SamplerConfig, gaussian_oracle_check,
                      sample_reconstruction, variance_map)
from .sweeps import sweep_cfg_scale, sweep_compression, sweep_steps
from .trainer import fit, load_checkpoint

log = logging.getLogger("swycc")


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(x) for x in text.split(",") if x)


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(x) for x in text.split(",") if x)


def _load_or_generate(args) -> ToyDataset:
    if getattr(args, "data", None):
        return load_dataset(args.data)
    spec = DatasetSpec(size=args.size)
    return generate_dataset(spec, args.data_seed, args.data_n)


def _add_data_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", help="dataset container (.swyc); generated on the fly if omitted")
    p.add_argument("--data-n", type=int, default=300)
    p.add_argument("--data-seed", type=int, default=0)
    p.add_argument("--size", type=int, default=16)


def _sampler_cfg(args) -> SamplerConfig:
    return SamplerConfig(steps=args.steps, guidance=args.cfg_scale,
                         mode=args.sampler, seed=args.seed)


# ----------------------------------------------------------------------
# subcommand implementations
# ----------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    spec = DatasetSpec(size=args.size)
    ds = generate_dataset(spec, args.seed, args.n)
    save_dataset(args.out, ds)
    print(f"wrote {len(ds)} images ({spec.size}x{spec.size}) to {args.out}")
    if args.ppm_dir:
        out = Path(args.ppm_dir)
        out.mkdir(parents=True, exist_ok=True)
        for i in range(min(len(ds), args.ppm_limit)):
            write_ppm(out / f"img_{i:04d}_c{ds.labels[i]}.ppm", ds.images[i])
        print(f"dumped {min(len(ds), args.ppm_limit)} PPM previews to {out}")
    return 0


def cmd_train(args) -> int:
    doc = parse_config_file(args.config) if args.config else {}
    enc_cfg, unet_cfg, train_cfg = build_configs(doc)
    if args.k is not None:
        enc_cfg = replace(enc_cfg, latent_channels=latent_channels_for_ratio(args.k))
    if args.latent_channels is not None:
        enc_cfg = replace(enc_cfg, latent_channels=args.latent_channels)
    train_cfg = apply_overrides(
        train_cfg, mode=args.mode, seed=args.seed, total_steps=args.steps,
        batch_size=args.batch, peak_lr=args.peak_lr, warmup_steps=args.warmup,
        clip_norm=args.clip_norm, checkpoint_every=args.ckpt_every,
        lambda_p=args.lambda_p, lambda_m=args.lambda_m,
        cond_dropout_rate=args.cond_dropout, adversarial_weight=args.adv_weight,
        perceptual_kind=args.loss)
    ds = _load_or_generate(args)
    if args.size != enc_cfg.image_size and not args.data:
        enc_cfg = replace(enc_cfg, image_size=args.size)
    train_ds, _ = ds.split()
    if ds.images.shape[1] != enc_cfg.image_size:
        enc_cfg = replace(enc_cfg, image_size=ds.images.shape[1])
    bundle, state, ckpt = fit(train_ds.images, train_cfg, encoder_cfg=enc_cfg,
                              unet_cfg=unet_cfg, out_dir=args.out,
                              resume=args.resume,
                              progress_every=0 if args.quiet else 200)
    print(f"trained {train_cfg.mode} for {state.step} steps "
          f"(ema total {state.ema.get('total', float('nan')):.4f}, "
          f"{state.incidents} rejected steps)")
    print(f"final checkpoint: {ckpt}")
    return 0


def cmd_reconstruct(args) -> int:
    bundle, _, _ = load_checkpoint(args.ckpt)
    ds = load_dataset(args.data)
    _, holdout = ds.split()
    images = holdout.images[:args.num_samples]
    scfg = _sampler_cfg(args)
    recons = sample_reconstruction(bundle.encode(T.Tensor(images)).data, bundle, scfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, (orig, rec) in enumerate(zip(images, recons)):
        write_ppm(out / f"pair_{i:03d}.ppm", montage([orig, rec]))
        print(f"image {i}: psnr {psnr(orig, rec):.2f} dB")
    print(f"wrote {len(images)} original/reconstruction pairs to {out}")
    return 0


def cmd_variance_map(args) -> int:
    bundle, _, _ = load_checkpoint(args.ckpt)
    ds = load_dataset(args.data)
    img = ds.images[args.index:args.index + 1]
    z = bundle.encode(T.Tensor(img)).data
    vmap = variance_map(z, bundle, _sampler_cfg(args), n=args.n)
    # normalize the variance heat-map into [-1, 1] grayscale for PPM
    peak = max(float(vmap.max()), 1e-12)
    gray = (vmap / peak) * 2.0 - 1.0
    write_ppm(args.out, np.repeat(gray[:, :, None], 3, axis=2))
    print(f"variance map (max {peak:.3e}) written to {args.out}")
    return 0


def cmd_sweep_compression(args) -> int:
    doc = parse_config_file(args.config) if args.config else {}
    enc_cfg, unet_cfg, train_cfg = build_configs(doc)
    train_cfg = apply_overrides(train_cfg, total_steps=args.steps)
    ds = _load_or_generate(args)
    rows = sweep_compression(ds, tuple(args.modes.split(",")), _ints(args.k_list),
                             _ints(args.seeds), train_cfg, enc_cfg, unet_cfg,
                             out_dir=args.out)
    ok = sum(1 for r in rows if r["status"] == "ok")
    print(f"sweep-compression: {ok}/{len(rows)} cells ok -> {args.out}/metrics.csv")
    return 0 if ok == len(rows) else 1


def cmd_sweep_steps(args) -> int:
    bundle, _, _ = load_checkpoint(args.ckpt)
    ds = load_dataset(args.data)
    rows = sweep_steps(bundle, ds, _ints(args.steps_list), guidance=args.cfg_scale,
                       seed=args.seed, out_dir=args.out)
    for row in rows:
        print(f"steps={row['steps']}: mse={row.get('mse', 'n/a')} "
              f"feature_mmd={row.get('feature_mmd', 'n/a')} [{row['status']}]")
    return 0 if all(r["status"] == "ok" for r in rows) else 1


def cmd_sweep_cfg(args) -> int:
    bundle, _, _ = load_checkpoint(args.ckpt)
    ds = load_dataset(args.data)
    rows = sweep_cfg_scale(bundle, ds, _floats(args.scales), steps=args.steps,
                           seed=args.seed, out_dir=args.out)
    for row in rows:
        print(f"g={row['cfg_scale']}: mse={row.get('mse', 'n/a')} "
              f"feature_mmd={row.get('feature_mmd', 'n/a')} [{row['status']}]")
    return 0 if all(r["status"] == "ok" for r in rows) else 1


def cmd_latents_build(args) -> int:
    bundle, _, _ = load_checkpoint(args.ae_ckpt)
    ds = load_dataset(args.data)
    lds = build_latent_dataset(ds.images, ds.labels, bundle)
    save_latent_dataset(args.out, lds)
    print(f"encoded {len(lds.latents)} latents {lds.latents.shape[1:]} to {args.out}")
    return 0


def cmd_latents_train(args) -> int:
    lds = load_latent_dataset(args.latents)
    shape = tuple(lds.latents.shape[1:])
    cfg = PriorConfig(num_classes=int(lds.labels.max()) + 1, hidden=args.hidden,
                      num_blocks=args.blocks, latent_shape=shape)
    tcfg = PriorTrainConfig(total_steps=args.steps, batch_size=args.batch,
                            lr=args.lr, seed=args.seed)
    result = train_prior(lds, cfg, tcfg)
    save_prior(args.out, result.prior, lds,
               extra_meta={"final_ema": result.ema[-1],
                           "drop_fraction": result.drop_fraction})
    print(f"prior trained {args.steps} steps: loss ema {result.ema[0]:.4f} -> "
          f"{result.ema[-1]:.4f}, class-drop fraction {result.drop_fraction:.3f}")
    print(f"wrote {args.out}")
    return 0


def cmd_latents_generate(args) -> int:
    prior, meta = load_prior(args.prior_ckpt)
    bundle, _, _ = load_checkpoint(args.ae_ckpt)
    images = generate(args.class_id, prior, meta["stats"], bundle, n=args.n,
                      latent_cfg=SamplerConfig(steps=args.steps, guidance=args.cfg_scale,
                                               seed=args.seed),
                      refine_cfg=SamplerConfig(steps=args.refine_steps,
                                               guidance=args.cfg_scale,
                                               seed=args.seed + 1))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, img in enumerate(images):
        write_ppm(out / f"gen_c{args.class_id}_{i:03d}.ppm", img)
    print(f"generated {len(images)} class-{args.class_id} images in {out}")
    return 0


def cmd_grad_check(args) -> int:
    enc_cfg = EncoderConfig(base_channels=8, num_res_blocks=2, num_downsamples=2,
                            latent_channels=2, channel_multipliers=(1, 1, 2),
                            image_size=args.size)
    unet_cfg = UNetConfig(base_channels=8, channel_multiplier=(1, 2),
                          num_res_blocks=(1, 1), downsampling_factor=(1, 2),
                          attn_resolutions=(args.size // 2,), time_dim=16)
    bundle = build_bundle(enc_cfg, unet_cfg, seed=args.seed, dtype=np.float64)
    x = PrngState(args.seed + 1).normal((2, args.size, args.size, 3),
                                        dtype=np.float64) * 0.5
    from .losses import LossConfig
    lcfg = LossConfig()

    def loss():
        return total_loss(x, bundle, lcfg, PrngState(args.seed + 2))[0]

    params = {k: v for k, v in bundle.params.items()
              if not k.startswith(("f_frozen/", "disc/"))}
    report = gradient_check(loss, params, samples=args.samples,
                            prng=PrngState(args.seed + 3), tolerance=args.tolerance)
    print(report)
    ok = report.frac_within >= 0.99
    print("PASS" if ok else "FAIL")
    return 0 if ok else 1


def cmd_oracle_check(args) -> int:
    report = gaussian_oracle_check(args.mu, args.std, steps=args.steps,
                                   n_samples=args.n, seed=args.seed, mode=args.mode)
    print(report)
    ok = report.mean_err <= 0.05 and report.std_err <= 0.05
    print("PASS" if ok else "FAIL")
    return 0 if ok else 1


# ----------------------------------------------------------------------
# parser
# ----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="swycc",
        description="Diffusion-loss autoencoder lab: train, sample, sweep.")
    parser.add_argument("--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a toy texture dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=300)
    p.add_argument("--size", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--ppm-dir")
    p.add_argument("--ppm-limit", type=int, default=24)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train", help="train the autoencoder (swycc or gan mode)")
    p.add_argument("--mode", choices=("swycc", "gan"), default=None)
    p.add_argument("--config", help="JSON or key=value config file")
    p.add_argument("--out", required=True)
    _add_data_args(p)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--batch", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--peak-lr", type=float, default=None)
    p.add_argument("--warmup", type=int, default=None)
    p.add_argument("--clip-norm", type=float, default=None)
    p.add_argument("--ckpt-every", type=int, default=None)
    p.add_argument("--lambda-p", type=float, default=None)
    p.add_argument("--lambda-m", type=float, default=None)
    p.add_argument("--cond-dropout", type=float, default=None)
    p.add_argument("--adv-weight", type=float, default=None)
    p.add_argument("--loss", choices=("perceptual", "dists"), default=None)
    p.add_argument("--k", type=int, default=None,
                   help="relative compression ratio (sets latent channels 8/K)")
    p.add_argument("--latent-channels", type=int, default=None)
    p.add_argument("--resume")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("reconstruct", help="sample reconstructions from a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=50)
    p.add_argument("--cfg-scale", type=float, default=0.5)
    p.add_argument("--sampler", choices=("ddim", "ancestral"), default="ddim")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--num-samples", type=int, default=8)
    p.set_defaults(fn=cmd_reconstruct)

    p = sub.add_parser("variance-map", help="per-pixel variance across samples")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=10)
    p.add_argument("--steps", type=int, default=50)
    p.add_argument("--cfg-scale", type=float, default=0.5)
    p.add_argument("--sampler", choices=("ddim", "ancestral"), default="ddim")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_variance_map)

    p = sub.add_parser("sweep-compression", help="rate-distortion sweep over K")
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    _add_data_args(p)
    p.add_argument("--modes", default="swycc,gan")
    p.add_argument("--k-list", default="1,2,4,8")
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--steps", type=int, default=None, help="training budget per cell")
    p.set_defaults(fn=cmd_sweep_compression)

    p = sub.add_parser("sweep-steps", help="metrics vs sampling step count")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps-list", default="2,5,10,50,150")
    p.add_argument("--cfg-scale", type=float, default=0.5)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_sweep_steps)

    p = sub.add_parser("sweep-cfg", help="metrics vs guidance scale")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--scales", default="0,0.25,0.5,1,2")
    p.add_argument("--steps", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_sweep_cfg)

    lat = sub.add_parser("latents", help="two-stage latent modeling")
    lsub = lat.add_subparsers(dest="latents_command", required=True)

    p = lsub.add_parser("build", help="encode a dataset with a frozen checkpoint")
    p.add_argument("--ae-ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_latents_build)

    p = lsub.add_parser("train", help="train the class-conditional latent prior")
    p.add_argument("--latents", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--batch", type=int, default=32)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--hidden", type=int, default=64)
    p.add_argument("--blocks", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_latents_train)

    p = lsub.add_parser("generate", help="sample latents and decode them")
    p.add_argument("--prior-ckpt", required=True)
    p.add_argument("--ae-ckpt", required=True)
    p.add_argument("--class-id", type=int, required=True)
    p.add_argument("--n", type=int, default=4)
    p.add_argument("--steps", type=int, default=50)
    p.add_argument("--refine-steps", type=int, default=50)
    p.add_argument("--cfg-scale", type=float, default=0.5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_latents_generate)

    p = sub.add_parser("grad-check", help="finite-difference check of the full loss graph")
    p.add_argument("--size", type=int, default=8)
    p.add_argument("--samples", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tolerance", type=float, default=1e-3)
    p.set_defaults(fn=cmd_grad_check)

    p = sub.add_parser("oracle-check", help="Gaussian closed-form sampler oracle")
    p.add_argument("--mu", type=float, default=0.0)
    p.add_argument("--std", type=float, default=1.0)
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--n", type=int, default=10000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--mode", choices=("ddim", "ancestral"), default="ddim")
    p.set_defaults(fn=cmd_oracle_check)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    if os.environ.get("SWYCC_DETERMINISTIC", "1") == "0":
        log.warning("SWYCC_DETERMINISTIC=0 requested; execution is still "
                    "single-threaded and seed-driven, so results remain "
                    "reproducible")
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
