"""Procedural toy texture datasets, reproducible from (spec, seed).

Three families, one per class, each mixing low-frequency color with
high-frequency texture: sinusoidal gratings (random frequency, phase,
orientation), Voronoi color cells (hard edges), and Gaussian-blob
fields.  Classes are assigned round-robin so any n divisible by the
family count is exactly balanced.  Every image comes from its own child
PRNG stream, so the k-th image is the same no matter how many are drawn.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from .checkpoint import read_container, write_container, CheckpointError
from .rng import PrngState

FAMILIES = ("gratings", "voronoi", "blobs")


@dataclass(frozen=True)
class DatasetSpec:
    size: int = 16
    families: tuple[str, ...] = FAMILIES

    def __post_init__(self):
        unknown = set(self.families) - set(FAMILIES)
        if unknown:
            raise ValueError(f"unknown families: {sorted(unknown)}")
        if self.size < 8:
            raise ValueError("size must be >= 8")


@dataclass
class ToyDataset:
    images: np.ndarray  # (N, H, W, 3) float32 in [-1, 1]
    labels: np.ndarray  # (N,) int64 class ids
    spec: DatasetSpec
    seed: int

    def __len__(self) -> int:
        return self.images.shape[0]

    def split(self, holdout_frac: float = 0.2) -> tuple["ToyDataset", "ToyDataset"]:
        """Train/held-out split: the held-out part is the last fraction by index."""
        n_hold = max(1, int(round(len(self) * holdout_frac)))
        n_train = len(self) - n_hold
        train = ToyDataset(self.images[:n_train], self.labels[:n_train], self.spec, self.seed)
        hold = ToyDataset(self.images[n_train:], self.labels[n_train:], self.spec, self.seed)
        return train, hold


def _coords(size: int) -> tuple[np.ndarray, np.ndarray]:
    ys, xs = np.meshgrid(np.arange(size, dtype=np.float64),
                         np.arange(size, dtype=np.float64), indexing="ij")
    return ys, xs


def _gratings(prng: PrngState, size: int) -> np.ndarray:
    theta = prng.uniform() * np.pi
    freq = 1.5 + 3.0 * prng.uniform()
    phase = prng.uniform() * 2.0 * np.pi
    c0 = prng.uniform((3,)) * 2.0 - 1.0
    c1 = prng.uniform((3,)) * 2.0 - 1.0
    ys, xs = _coords(size)
    wave = np.sin(2.0 * np.pi * freq * (xs * np.cos(theta) + ys * np.sin(theta)) / size + phase)
    mix = (wave + 1.0) * 0.5
    return c0 + (c1 - c0) * mix[..., None]


def _voronoi(prng: PrngState, size: int) -> np.ndarray:
    k = 4 + prng.integers(4)
    pts = prng.uniform((k, 2)) * size
    colors = prng.uniform((k, 3)) * 2.0 - 1.0
    ys, xs = _coords(size)
    d2 = (ys[..., None] - pts[:, 0]) ** 2 + (xs[..., None] - pts[:, 1]) ** 2
    return colors[np.argmin(d2, axis=-1)]


def _blobs(prng: PrngState, size: int) -> np.ndarray:
    base = prng.uniform((3,)) - 0.5
    m = 4 + prng.integers(5)
    centers = prng.uniform((m, 2)) * size
    radii = 1.0 + 3.0 * prng.uniform((m,))
    amps = (prng.uniform((m, 3)) * 2.0 - 1.0) * 0.9
    ys, xs = _coords(size)
    img = np.broadcast_to(base, (size, size, 3)).copy()
    for i in range(m):
        d2 = (ys - centers[i, 0]) ** 2 + (xs - centers[i, 1]) ** 2
        img = img + amps[i] * np.exp(-d2 / (2.0 * radii[i] ** 2))[..., None]
    return np.tanh(img)


_GENERATORS = {"gratings": _gratings, "voronoi": _voronoi, "blobs": _blobs}


def generate_dataset(spec: DatasetSpec, seed: int, n: int) -> ToyDataset:
    """Deterministic class-balanced dataset of n images."""
    if n < 1:
        raise ValueError("n must be >= 1")
    child_seeds = PrngState(seed).next_u64_block(n)
    images = np.empty((n, spec.size, spec.size, 3), dtype=np.float32)
    labels = np.empty(n, dtype=np.int64)
    for i in range(n):
        label = i % len(spec.families)
        img = _GENERATORS[spec.families[label]](PrngState(int(child_seeds[i])), spec.size)
        images[i] = np.clip(img, -1.0, 1.0).astype(np.float32)
        labels[i] = label
    return ToyDataset(images=images, labels=labels, spec=spec, seed=seed)


def save_dataset(path, ds: ToyDataset) -> None:
    meta = {"kind": "dataset", "spec": asdict(ds.spec), "seed": ds.seed,
            "n": len(ds)}
    write_container(path, meta, {"images": ds.images, "labels": ds.labels})


def load_dataset(path) -> ToyDataset:
    def check(meta):
        if meta.get("kind") != "dataset":
            raise CheckpointError(f"{path}: not a dataset container")
    meta, tensors = read_container(path, validate_meta=check)
    spec = DatasetSpec(size=meta["spec"]["size"],
                       families=tuple(meta["spec"]["families"]))
    return ToyDataset(images=tensors["images"], labels=tensors["labels"],
                      spec=spec, seed=meta["seed"])


def half_flat_half_checker(size: int = 16, flat_color=(0.2, -0.3, 0.5),
                           amplitude: float = 0.8) -> np.ndarray:
    """Probe image: left half constant color, right half 1-px checkerboard."""
    img = np.empty((size, size, 3), dtype=np.float32)
    img[:] = np.asarray(flat_color, dtype=np.float32)
    ys, xs = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    checker = ((ys + xs) % 2 * 2 - 1).astype(np.float32) * amplitude
    img[:, size // 2:, :] = checker[:, size // 2:, None]
    return img
