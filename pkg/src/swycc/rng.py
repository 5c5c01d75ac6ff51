"""Deterministic seeded randomness built on splitmix64.

Every random draw in the package (datasets, parameter init, noise,
dropout masks, batch selection) flows through :class:`PrngState`, so any
artifact is reproducible from its seed alone.  The generator is splitmix64
with increment 0x9E3779B97F4A7C15: the k-th raw output after seeding with
``s0`` is ``mix(s0 + k * GAMMA mod 2^64)``, which lets us produce whole
blocks with vectorized uint64 arithmetic while staying bit-identical to
the sequential definition.
"""

from __future__ import annotations

import math

import numpy as np

_MASK64 = (1 << 64) - 1
GAMMA = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB

# uint64 copies for the vectorized path
_U_GAMMA = np.uint64(GAMMA)
_U_MIX1 = np.uint64(_MIX1)
_U_MIX2 = np.uint64(_MIX2)

_INV_2_53 = 1.0 / (1 << 53)


def _mix(z: int) -> int:
    z = ((z ^ (z >> 30)) * _MIX1) & _MASK64
    z = ((z ^ (z >> 27)) * _MIX2) & _MASK64
    return z ^ (z >> 31)


class PrngState:
    """splitmix64 stream; state is a single 64-bit unsigned integer."""

    __slots__ = ("state",)

    def __init__(self, seed: int):
        self.state = seed & _MASK64

    def __repr__(self) -> str:
        return f"PrngState(0x{self.state:016x})"

    def copy(self) -> "PrngState":
        return PrngState(self.state)

    def spawn(self) -> "PrngState":
        """Derive an independent child stream (consumes one draw)."""
        return PrngState(self.next_u64())

    def next_u64(self) -> int:
        self.state = (self.state + GAMMA) & _MASK64
        return _mix(self.state)

    def next_u64_block(self, n: int) -> np.ndarray:
        """Vector of the next ``n`` raw outputs; advances state by ``n``."""
        if n == 0:
            return np.empty(0, dtype=np.uint64)
        ks = np.arange(1, n + 1, dtype=np.uint64)
        z = np.uint64(self.state) + ks * _U_GAMMA  # wraps mod 2^64
        z = (z ^ (z >> np.uint64(30))) * _U_MIX1
        z = (z ^ (z >> np.uint64(27))) * _U_MIX2
        z = z ^ (z >> np.uint64(31))
        self.state = (self.state + n * GAMMA) & _MASK64
        return z

    def uniform(self, shape=(), dtype=np.float64) -> np.ndarray:
        """Uniform draws in [0, 1) using the top 53 bits of each output."""
        n = int(np.prod(shape)) if shape else 1
        u = (self.next_u64_block(n) >> np.uint64(11)).astype(np.float64)
        out = u * _INV_2_53
        out = out.reshape(shape) if shape else out[0]
        return out.astype(dtype, copy=False) if shape else dtype(out)

    def normal(self, shape=(), dtype=np.float64) -> np.ndarray:
        """Standard normal draws via Box-Muller on uniform pairs."""
        n = int(np.prod(shape)) if shape else 1
        m = -(-n // 2)  # pairs
        u1 = self.uniform((m,))
        u2 = self.uniform((m,))
        r = np.sqrt(-2.0 * np.log1p(-u1))  # 1-u1 in (0,1], never log(0)
        theta = (2.0 * math.pi) * u2
        z = np.concatenate([r * np.cos(theta), r * np.sin(theta)])[:n]
        out = z.reshape(shape) if shape else z[0]
        return out.astype(dtype, copy=False) if shape else dtype(out)

    def integers(self, upper: int, shape=()) -> np.ndarray:
        """Uniform integers in [0, upper)."""
        if upper <= 0:
            raise ValueError("upper must be positive")
        u = self.uniform(shape if shape else (1,))
        out = np.floor(u * upper).astype(np.int64)
        return out.reshape(shape) if shape else int(out[0])

    def bernoulli(self, rate: float, shape=()) -> np.ndarray:
        """Boolean mask, True with probability ``rate``."""
        return self.uniform(shape if shape else (1,)) < rate
