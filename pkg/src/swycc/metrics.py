"""Distortion and distribution metrics.

PSNR uses peak 2.0 (data lives in [-1, 1]).  The distribution metric is
an unbiased squared-MMD estimator with a Gaussian kernel over frozen-net
final-stage features; the bandwidth is the median pairwise distance of
the pooled sets.  Comparisons are only meaningful within this artifact
(same frozen net on both sides), which is all the sweeps need.
"""

from __future__ import annotations

import math

import numpy as np

from .models import ModelBundle
from .tensor import Tensor, no_grad

PSNR_PEAK = 2.0


def psnr(x: np.ndarray, y: np.ndarray, peak: float = PSNR_PEAK) -> float:
    """10 * log10(peak^2 / mse); +inf sentinel when the images match."""
    x, y = np.asarray(x), np.asarray(y)
    if x.shape != y.shape:
        raise ValueError(f"psnr shape mismatch: {x.shape} vs {y.shape}")
    mse = float(np.mean((x.astype(np.float64) - y.astype(np.float64)) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def frozen_feature_matrix(images: np.ndarray, bundle: ModelBundle) -> np.ndarray:
    """Final-stage frozen features, flattened to one row per image."""
    with no_grad():
        feats, _ = bundle.frozen_features(Tensor(np.asarray(images)))
    return feats.data.reshape(images.shape[0], -1).astype(np.float64)


def _pairwise_sq_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    an = (a * a).sum(axis=1)
    bn = (b * b).sum(axis=1)
    d2 = an[:, None] + bn[None, :] - 2.0 * (a @ b.T)
    return np.maximum(d2, 0.0)


def median_bandwidth(a: np.ndarray, b: np.ndarray) -> float:
    """Median pairwise distance over the pooled set (the usual heuristic)."""
    z = np.concatenate([a, b], axis=0)
    d2 = _pairwise_sq_dists(z, z)
    upper = d2[np.triu_indices(len(z), k=1)]
    med = float(np.median(np.sqrt(upper)))
    return med


def mmd_unbiased(a: np.ndarray, b: np.ndarray, bandwidth: float | None = None) -> float:
    """Unbiased squared-MMD with Gaussian kernel exp(-d^2 / (2 bw^2)).

    May be slightly negative by construction.  Raises on degenerate
    (all-identical) inputs where the bandwidth heuristic collapses.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    m, n = len(a), len(b)
    if m < 2 or n < 2:
        raise ValueError("mmd_unbiased needs at least 2 samples per set")
    if bandwidth is None:
        bandwidth = median_bandwidth(a, b)
    if not np.isfinite(bandwidth) or bandwidth <= 0.0:
        raise ValueError("degenerate feature sets: zero median pairwise distance")
    gamma = 1.0 / (2.0 * bandwidth * bandwidth)
    kaa = np.exp(-gamma * _pairwise_sq_dists(a, a))
    kbb = np.exp(-gamma * _pairwise_sq_dists(b, b))
    kab = np.exp(-gamma * _pairwise_sq_dists(a, b))
    term_a = (kaa.sum() - np.trace(kaa)) / (m * (m - 1))
    term_b = (kbb.sum() - np.trace(kbb)) / (n * (n - 1))
    return float(term_a + term_b - 2.0 * kab.mean())


def feature_mmd(set_a: np.ndarray, set_b: np.ndarray, bundle: ModelBundle,
                bandwidth: float | None = None) -> float:
    """Squared MMD between two image sets in frozen feature space."""
    if len(set_a) < 10 or len(set_b) < 10:
        raise ValueError("feature_mmd needs at least 10 images per set")
    fa = frozen_feature_matrix(set_a, bundle)
    fb = frozen_feature_matrix(set_b, bundle)
    return mmd_unbiased(fa, fb, bandwidth=bandwidth)
