"""Central finite-difference verification of analytic gradients.

The checker evaluates a scalar-valued graph builder twice per sampled
coordinate (w +- h with h relative to the coordinate's magnitude) and
compares against the gradient from one backward pass.  Run it on f64
parameters; f32 rounding swamps the difference quotient.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .rng import PrngState
from .tensor import NonFiniteError, Tensor, no_grad


@dataclass
class CoordResult:
    name: str
    index: int
    analytic: float
    numeric: float
    rel_err: float


@dataclass
class GradCheckReport:
    max_rel_err: float
    n_checked: int
    n_within: int
    tolerance: float
    worst: list[CoordResult] = field(default_factory=list)

    @property
    def frac_within(self) -> float:
        return self.n_within / self.n_checked if self.n_checked else 1.0

    def passed(self, min_frac: float = 1.0) -> bool:
        return self.frac_within >= min_frac

    def __str__(self) -> str:
        return (f"gradcheck: {self.n_within}/{self.n_checked} coords within "
                f"rel {self.tolerance:g} (max rel err {self.max_rel_err:.3g})")


def _rel_err(a: float, n: float, atol: float) -> float:
    denom = max(abs(a), abs(n))
    if denom < atol:
        return 0.0  # both negligibly small
    return abs(a - n) / denom


def gradient_check(f: Callable[[], Tensor], params: dict[str, Tensor],
                   samples: int, prng: PrngState | None = None,
                   h_rel: float = 1e-4, tolerance: float = 1e-3,
                   atol: float = 1e-7) -> GradCheckReport:
    """Compare analytic gradients of ``f()`` against central differences.

    ``f`` must be a pure function of ``params`` (fix any internal PRNG
    draws), evaluable repeatedly.  ``samples`` coordinates are drawn
    uniformly over all parameter entries.
    """
    prng = prng if prng is not None else PrngState(0)

    for t in params.values():
        t.grad = None
    loss = f()
    if not np.isfinite(loss.data):
        raise NonFiniteError("gradient_check: loss is non-finite")
    loss.backward()
    analytic = {k: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data))
                for k, t in params.items()}

    names = sorted(params)
    sizes = np.array([params[k].size for k in names])
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    total = int(offsets[-1])

    results: list[CoordResult] = []
    n_within = 0
    max_err = 0.0
    for _ in range(samples):
        flat_idx = prng.integers(total)
        which = int(np.searchsorted(offsets, flat_idx, side="right") - 1)
        name = names[which]
        idx = int(flat_idx - offsets[which])
        w = params[name].data.reshape(-1)
        orig = w[idx]
        h = h_rel * max(1.0, abs(float(orig)))
        with no_grad():
            w[idx] = orig + h
            f_plus = float(f().data)
            w[idx] = orig - h
            f_minus = float(f().data)
            w[idx] = orig
        numeric = (f_plus - f_minus) / (2.0 * h)
        a = float(analytic[name].reshape(-1)[idx])
        err = _rel_err(a, numeric, atol)
        max_err = max(max_err, err)
        if err <= tolerance:
            n_within += 1
        results.append(CoordResult(name, idx, a, numeric, err))

    results.sort(key=lambda r: -r.rel_err)
    return GradCheckReport(max_rel_err=max_err, n_checked=samples,
                           n_within=n_within, tolerance=tolerance,
                           worst=results[:10])
