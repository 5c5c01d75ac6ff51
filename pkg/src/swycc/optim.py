"""Adam optimizer state and gradient utilities.

A :class:`ParamStore` groups the trainable parameters of one optimization
target (the autoencoder nets, or the discriminator) together with their
Adam moments.  Iteration order is lexicographic by name so updates are
applied in a deterministic order regardless of construction order.
"""

from __future__ import annotations

import math

import numpy as np

from .tensor import Tensor


class ParamStore:
    """Ordered name -> parameter map with per-parameter Adam moments.

    Parameters and moments live in contiguous flat buffers (tensors are
    rebound to views into them), so the update is a handful of vector
    ops over one array instead of a Python loop over hundreds.
    """

    def __init__(self, params: dict[str, Tensor]):
        self.params: dict[str, Tensor] = {k: params[k] for k in sorted(params)}
        dtypes = {t.data.dtype for t in self.params.values()}
        if len(dtypes) > 1:
            raise ValueError(f"ParamStore requires a uniform dtype, got {dtypes}")
        self._dtype = dtypes.pop() if dtypes else np.dtype(np.float32)
        self._sizes = {k: t.data.size for k, t in self.params.items()}
        total = sum(self._sizes.values())
        self._flat_p = np.empty(total, dtype=self._dtype)
        self._flat_m = np.zeros(total, dtype=self._dtype)
        self._flat_v = np.zeros(total, dtype=self._dtype)
        self._slices: dict[str, slice] = {}
        off = 0
        for k, t in self.params.items():
            sl = slice(off, off + t.data.size)
            self._slices[k] = sl
            self._flat_p[sl] = t.data.reshape(-1)
            t.data = self._flat_p[sl].reshape(t.data.shape)
            off = sl.stop
        self.m = {k: self._flat_m[sl].reshape(self.params[k].data.shape)
                  for k, sl in self._slices.items()}
        self.v = {k: self._flat_v[sl].reshape(self.params[k].data.shape)
                  for k, sl in self._slices.items()}
        self.step = 0

    def names(self) -> list[str]:
        return list(self.params)

    def __len__(self) -> int:
        return len(self.params)

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def grads(self) -> dict[str, np.ndarray]:
        """Collect accumulated gradients; missing ones count as zero."""
        out = {}
        for k, t in self.params.items():
            out[k] = t.grad if t.grad is not None else np.zeros_like(t.data)
        return out

    def flatten_grads(self, grads: dict[str, np.ndarray]) -> np.ndarray:
        flat = np.empty(self._flat_p.size, dtype=self._dtype)
        for k, sl in self._slices.items():
            if k not in grads:
                raise KeyError(f"adam_step: missing gradient for parameter {k!r}")
            g = grads[k]
            if g.shape != self.params[k].data.shape:
                raise ValueError(f"gradient shape {g.shape} != parameter shape "
                                 f"{self.params[k].data.shape} for {k!r}")
            flat[sl] = g.reshape(-1)
        return flat

    def adam_flat(self, flat_g: np.ndarray, lr: float, beta1: float,
                  beta2: float, eps: float) -> None:
        """Bias-corrected Adam on the flat buffers (deterministic order)."""
        self.step += 1
        bc1 = 1.0 - beta1 ** self.step
        bc2 = 1.0 - beta2 ** self.step
        m, v = self._flat_m, self._flat_v
        m *= beta1
        m += (1.0 - beta1) * flat_g
        v *= beta2
        flat_g *= flat_g  # flat_g is owned scratch; reuse for g^2
        flat_g *= (1.0 - beta2)
        v += flat_g
        denom = v / bc2
        np.sqrt(denom, out=denom)
        denom += eps
        upd = m / bc1
        upd /= denom
        upd *= lr
        self._flat_p -= upd

    def zero_grads(self) -> None:
        for t in self.params.values():
            t.grad = None


def adam_step(store: ParamStore, grads: dict[str, np.ndarray], lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> ParamStore:
    """Bias-corrected Adam update, applied in deterministic name order."""
    store.adam_flat(store.flatten_grads(grads), lr, beta1, beta2, eps)
    return store


def global_grad_norm(grads: dict[str, np.ndarray]) -> float:
    total = 0.0
    for g in grads.values():
        flat = g.reshape(-1).astype(np.float64, copy=False)
        total += float(np.dot(flat, flat))
    return math.sqrt(total)


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> dict[str, np.ndarray]:
    """Scale all gradients jointly so the global L2 norm is <= max_norm."""
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    norm = global_grad_norm(grads)
    if norm > max_norm:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale  # in-place keeps each gradient's dtype
    return grads
