"""Comparative runs: compression (rate-distortion), sampling-step count,
and guidance-scale sweeps, with CSV emission.

Every sweep cell is independent; failures are recorded as error-tagged
rows rather than dropped, so a partial sweep is still auditable.  All
metrics are computed on the held-out split (last 20% by index) against
the reconstruction path that the mode actually uses at inference time:
the refinement sampler for swycc, the plain initial decoder for the GAN
baseline.
"""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .data import ToyDataset
from .metrics import feature_mmd, psnr
from .models import EncoderConfig, ModelBundle, UNetConfig, latent_channels_for_ratio
from .ppm import montage, write_ppm
from .sampler import SamplerConfig, sample_reconstruction
from .tensor import Tensor, no_grad
from .trainer import TrainConfig, fit

log = logging.getLogger("swycc.sweeps")

METRIC_COLUMNS = ["run_id", "mode", "k", "c", "steps", "cfg_scale", "seed",
                  "mse", "psnr", "feature_mmd", "status", "error"]


def write_metrics_csv(path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=METRIC_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row.get(k, "") for k in METRIC_COLUMNS})


def read_metrics_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def reconstruct_set(bundle: ModelBundle, images: np.ndarray,
                    scfg: SamplerConfig, mode: str = "swycc") -> np.ndarray:
    """Model reconstructions for a batch of images, clamped to [-1, 1]."""
    with no_grad():
        z = bundle.encode(Tensor(images)).data
        if mode == "gan":
            recon = bundle.decode_initial(Tensor(z)).data
            return np.clip(recon, -1.0, 1.0)
    return sample_reconstruction(z, bundle, scfg)


@dataclass
class EvalResult:
    mse: float
    psnr: float
    feature_mmd: float
    recons: np.ndarray


def evaluate_model(bundle: ModelBundle, images: np.ndarray, scfg: SamplerConfig,
                   mode: str = "swycc") -> EvalResult:
    recons = reconstruct_set(bundle, images, scfg, mode)
    mse = float(np.mean((images.astype(np.float64) - recons.astype(np.float64)) ** 2))
    return EvalResult(mse=mse, psnr=psnr(images, recons),
                      feature_mmd=feature_mmd(images, recons, bundle),
                      recons=recons)


def sweep_compression(dataset: ToyDataset, modes: tuple[str, ...],
                      k_list: tuple[int, ...], seeds: tuple[int, ...],
                      train_cfg: TrainConfig,
                      encoder_template: EncoderConfig,
                      unet_template: UNetConfig,
                      eval_cfg: SamplerConfig | None = None,
                      out_dir=None) -> list[dict]:
    """Train one model per (mode, K, seed) cell at equal budgets and
    evaluate distortion + feature-MMD on the held-out split."""
    eval_cfg = eval_cfg or SamplerConfig(steps=10, guidance=0.5, seed=1234)
    train_ds, holdout = dataset.split()
    rows = []
    for mode in modes:
        for k in k_list:
            c = latent_channels_for_ratio(k)
            enc_cfg = replace(encoder_template, latent_channels=c)
            for seed in seeds:
                run_id = f"{mode}-K{k}-s{seed}"
                row = {"run_id": run_id, "mode": mode, "k": k, "c": c,
                       "steps": eval_cfg.steps, "cfg_scale": eval_cfg.guidance,
                       "seed": seed, "status": "ok", "error": ""}
                t0 = time.time()
                try:
                    cell_cfg = replace(train_cfg, mode=mode, seed=seed)
                    bundle, _, _ = fit(train_ds.images, cell_cfg,
                                       encoder_cfg=enc_cfg, unet_cfg=unet_template)
                    res = evaluate_model(bundle, holdout.images, eval_cfg, mode)
                    row.update(mse=f"{res.mse:.8g}", psnr=f"{res.psnr:.6g}",
                               feature_mmd=f"{res.feature_mmd:.8g}")
                except Exception as exc:  # cell failure must not kill the sweep
                    row.update(status="error", error=f"{type(exc).__name__}: {exc}")
                    log.exception("sweep cell %s failed", run_id)
                log.info("cell %s done in %.1fs (%s)", run_id,
                         time.time() - t0, row["status"])
                rows.append(row)
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        write_metrics_csv(Path(out_dir) / "metrics.csv", rows)
    return rows


def sweep_steps(bundle: ModelBundle, dataset: ToyDataset,
                steps_list: tuple[int, ...] = (2, 5, 10, 50, 150),
                guidance: float = 0.5, seed: int = 0,
                out_dir=None, n_save: int = 4) -> list[dict]:
    """Metrics vs sampling-step count; saves reconstruction montages."""
    _, holdout = dataset.split()
    images = holdout.images
    rows = []
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        write_ppm(out_dir / "originals.ppm", montage(list(images[:n_save])))
    for steps in steps_list:
        scfg = SamplerConfig(steps=steps, guidance=guidance, seed=seed)
        row = {"run_id": f"steps-{steps}", "mode": "swycc",
               "k": "", "c": bundle.encoder_cfg.latent_channels,
               "steps": steps, "cfg_scale": guidance, "seed": seed,
               "status": "ok", "error": ""}
        try:
            res = evaluate_model(bundle, images, scfg, "swycc")
            row.update(mse=f"{res.mse:.8g}", psnr=f"{res.psnr:.6g}",
                       feature_mmd=f"{res.feature_mmd:.8g}")
            if out_dir is not None:
                write_ppm(out_dir / f"recon_steps{steps}.ppm",
                          montage(list(res.recons[:n_save])))
        except Exception as exc:
            row.update(status="error", error=f"{type(exc).__name__}: {exc}")
            log.exception("sweep-steps cell %d failed", steps)
        rows.append(row)
    if out_dir is not None:
        write_metrics_csv(out_dir / "metrics.csv", rows)
    return rows


def sweep_cfg_scale(bundle: ModelBundle, dataset: ToyDataset,
                    scales: tuple[float, ...] = (0.0, 0.25, 0.5, 1.0, 2.0),
                    steps: int = 50, seed: int = 0, out_dir=None) -> list[dict]:
    """Reconstruction quality across guidance scales (reported, not asserted)."""
    _, holdout = dataset.split()
    rows = []
    for g in scales:
        scfg = SamplerConfig(steps=steps, guidance=g, seed=seed)
        row = {"run_id": f"cfg-{g}", "mode": "swycc",
               "k": "", "c": bundle.encoder_cfg.latent_channels,
               "steps": steps, "cfg_scale": g, "seed": seed,
               "status": "ok", "error": ""}
        try:
            res = evaluate_model(bundle, holdout.images, scfg, "swycc")
            row.update(mse=f"{res.mse:.8g}", psnr=f"{res.psnr:.6g}",
                       feature_mmd=f"{res.feature_mmd:.8g}")
        except Exception as exc:
            row.update(status="error", error=f"{type(exc).__name__}: {exc}")
            log.exception("sweep-cfg cell %s failed", g)
        rows.append(row)
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        write_metrics_csv(Path(out_dir) / "metrics.csv", rows)
    return rows
