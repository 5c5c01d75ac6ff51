"""Corruption schedule and v-parameterization identities.

The weighting identity proved here (w_t * ||x - x_hat||^2 == ||v - v_hat||^2)
licenses computing the diffusion losses in v-space.
"""

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from swycc.rng import PrngState
from swycc.schedule import (SIGMA_SQ_FLOOR, CorruptionDraw, alpha_sigma,
                            corrupt, loss_weight, schedule_sample, v_target,
                            x_and_eps_from_v)

ALPHA_AT_0 = 1.0 / math.sqrt(1.0 + math.exp(-20.0))
ALPHA_AT_1 = 1.0 / math.sqrt(1.0 + math.exp(20.0))


class TestAlphaSigma:
    def test_endpoint_t0(self):
        alpha, _ = alpha_sigma(0.0)
        assert abs(alpha - ALPHA_AT_0) < 1e-9
        assert abs(alpha - 1.0) < 1e-8

    def test_endpoint_t1(self):
        alpha, _ = alpha_sigma(1.0)
        assert abs(alpha - ALPHA_AT_1) < 1e-9
        assert abs(alpha - 4.5398e-5) < 1e-8

    @given(st.floats(min_value=0.0, max_value=1.0))
    @settings(max_examples=200, deadline=None)
    def test_unit_circle_identity(self, t):
        alpha, sigma = alpha_sigma(t)
        assert abs(alpha * alpha + sigma * sigma - 1.0) <= 1e-12

    def test_dense_grid_identity_and_monotonicity(self):
        t = np.linspace(0.0, 1.0, 10_000)
        alpha, sigma = alpha_sigma(t)
        assert np.abs(alpha**2 + sigma**2 - 1.0).max() <= 1e-12
        assert np.all(np.diff(alpha) < 0.0)
        assert alpha[0] > 0.999 and alpha[-1] < 1e-4

    def test_out_of_range_rejected(self):
        with pytest.raises(ValueError):
            alpha_sigma(-0.01)
        with pytest.raises(ValueError):
            alpha_sigma(1.01)

    def test_schedule_sample_bundle(self):
        s = schedule_sample(0.5)
        assert s.t == 0.5
        assert abs(s.alpha**2 + s.sigma**2 - 1.0) < 1e-12
        assert abs(s.weight - 1.0 / s.sigma**2) < 1e-6 * s.weight


class TestCorrupt:
    def test_t0_is_nearly_identity(self):
        prng = PrngState(0)
        x = prng.normal((4, 8, 8, 3), dtype=np.float32)
        draw = corrupt(x, np.zeros(4), prng)
        assert np.abs(draw.x_t - x).max() < 1e-3  # alpha ~ 1, sigma ~ 4.5e-5

    def test_zero_noise_scales_by_alpha(self):
        x = PrngState(1).normal((2, 4, 4, 3))
        t = np.array([0.3, 0.8])
        alpha, _ = alpha_sigma(t)
        draw = CorruptionDraw(t=t, eps=np.zeros_like(x),
                              x_t=alpha.reshape(2, 1, 1, 1) * x + 0.0)
        np.testing.assert_allclose(draw.x_t, alpha.reshape(2, 1, 1, 1) * x)

    def test_monte_carlo_variance_matches_sigma(self):
        # x = 0: Var(x_t) should equal sigma_t^2
        prng = PrngState(2)
        t = 0.5
        draws = corrupt(np.zeros((10_000, 1, 1, 1)), np.full(10_000, t), prng)
        _, sigma = alpha_sigma(t)
        emp = draws.x_t.var()
        assert abs(emp - sigma**2) / sigma**2 < 0.05

    def test_reproducible_from_seed(self):
        x = PrngState(3).normal((2, 4, 4, 3), dtype=np.float32)
        d1 = corrupt(x, np.array([0.2, 0.7]), PrngState(9))
        d2 = corrupt(x, np.array([0.2, 0.7]), PrngState(9))
        assert np.array_equal(d1.x_t, d2.x_t)
        assert np.array_equal(d1.eps, d2.eps)


class TestVParameterization:
    def test_t0_v_is_nearly_eps(self):
        prng = PrngState(4)
        x = prng.normal((8,)).reshape(1, 2, 2, 2)
        eps = prng.normal((8,)).reshape(1, 2, 2, 2)
        v = v_target(x, eps, 0.0)
        assert np.abs(v - eps).max() < 1e-3

    def test_reconstruction_identities_exact(self):
        prng = PrngState(5)
        x = prng.normal((3, 4, 4, 2))
        eps = prng.normal((3, 4, 4, 2))
        t = prng.uniform((3,))
        alpha, sigma = alpha_sigma(t)
        a = alpha.reshape(3, 1, 1, 1)
        s = sigma.reshape(3, 1, 1, 1)
        x_t = a * x + s * eps
        v = v_target(x, eps, t)
        np.testing.assert_allclose(a * x_t - s * v, x, atol=1e-12)
        np.testing.assert_allclose(a * v + s * x_t, eps, atol=1e-12)

    def test_round_trip_through_inversion(self):
        prng = PrngState(6)
        x = prng.normal((2, 4, 4, 3), dtype=np.float32)
        eps = prng.normal((2, 4, 4, 3), dtype=np.float32)
        t = prng.uniform((2,))
        alpha, sigma = alpha_sigma(t)
        x_t = (alpha.reshape(2, 1, 1, 1) * x + sigma.reshape(2, 1, 1, 1) * eps).astype(np.float32)
        v = v_target(x, eps, t)
        x_hat, eps_hat = x_and_eps_from_v(x_t, v, t)
        np.testing.assert_allclose(x_hat, x, atol=1e-6)
        np.testing.assert_allclose(eps_hat, eps, atol=1e-6)

    def test_equal_alpha_sigma_plugin(self):
        # at alpha = sigma = sqrt(1/2): x_hat = eps_hat = x_t / sqrt(2) for v = 0
        angle_mid = math.pi / 4.0
        from swycc.schedule import ANGLE_AT_0, ANGLE_AT_1
        t_mid = (angle_mid - ANGLE_AT_0) / (ANGLE_AT_1 - ANGLE_AT_0)
        x_t = PrngState(7).normal((2, 2, 2, 1))
        x_hat, eps_hat = x_and_eps_from_v(x_t, np.zeros_like(x_t), t_mid)
        np.testing.assert_allclose(x_hat, x_t / math.sqrt(2), atol=1e-9)
        np.testing.assert_allclose(eps_hat, x_t / math.sqrt(2), atol=1e-9)

    def test_reconstruction_identity_f64(self):
        prng = PrngState(8)
        x_t = prng.normal((4, 3, 3, 2))
        v = prng.normal((4, 3, 3, 2))
        t = prng.uniform((4,))
        alpha, sigma = alpha_sigma(t)
        x_hat, eps_hat = x_and_eps_from_v(x_t, v, t)
        recon = alpha.reshape(4, 1, 1, 1) * x_hat + sigma.reshape(4, 1, 1, 1) * eps_hat
        np.testing.assert_allclose(recon, x_t, atol=1e-12)


class TestLossWeight:
    def test_weight_at_t1_is_one(self):
        assert abs(loss_weight(1.0) - 1.0) < 1e-8

    def test_clamp_prevents_overflow(self):
        w = loss_weight(0.0)
        assert w <= 1.0 / SIGMA_SQ_FLOOR + 1e-3
        assert np.isfinite(w)

    @pytest.mark.parametrize("seed", range(5))
    def test_weighting_identity(self, seed):
        # w_t ||x - x_hat||^2 == ||v - v_hat||^2 away from the clamp region
        prng = PrngState(seed + 10)
        n = 50
        x = prng.normal((n, 2, 2, 3))
        eps = prng.normal((n, 2, 2, 3))
        v_hat = prng.normal((n, 2, 2, 3))
        t = 1e-3 + (1 - 1e-3) * prng.uniform((n,))
        alpha, sigma = alpha_sigma(t)
        a = alpha.reshape(n, 1, 1, 1)
        s = sigma.reshape(n, 1, 1, 1)
        x_t = a * x + s * eps
        v = v_target(x, eps, t)
        x_hat, _ = x_and_eps_from_v(x_t, v_hat, t)
        w = loss_weight(t).reshape(n, 1, 1, 1)
        lhs = (w * (x - x_hat) ** 2).sum(axis=(1, 2, 3))
        rhs = ((v - v_hat) ** 2).sum(axis=(1, 2, 3))
        np.testing.assert_allclose(lhs, rhs, rtol=1e-6)
