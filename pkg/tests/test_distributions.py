import math

import numpy as np
import pytest
from scipy.integrate import simpson

from platepool.distributions import (GammaParams, NormalParams, derive_seed,
                                     gamma_logpdf, gamma_logpdf_grad,
                                     gamma_moments, gamma_params_from_moments,
                                     normal_logpdf, normal_logpdf_grad,
                                     rng_from_seed, sample_gamma, sample_normal)

from conftest import central_diff, rel_err


class TestNormalLogpdf:
    def test_standard_normal_at_mode(self):
        assert normal_logpdf(0.0, NormalParams(0.0, 1.0)) == pytest.approx(-0.91893853, abs=1e-8)

    def test_scale_shift_at_mode(self):
        expected = -0.5 * math.log(2 * math.pi) - math.log(2.0)
        assert normal_logpdf(3.0, NormalParams(3.0, 2.0)) == pytest.approx(expected, abs=1e-8)
        assert expected == pytest.approx(-1.61208571, abs=1e-8)

    def test_gradient_closed_forms(self):
        dx, dmean, dstd = normal_logpdf_grad(1.0, NormalParams(0.0, 1.0))
        assert dx == pytest.approx(-1.0, abs=1e-12)
        assert normal_logpdf_grad(0.0, NormalParams(0.0, 1.0)) == pytest.approx((0.0, 0.0, -1.0))
        assert normal_logpdf_grad(2.0, NormalParams(0.0, 1.0)) == pytest.approx((-2.0, 2.0, 3.0))

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(7)
        h = 1e-6
        for _ in range(100):
            x = rng.normal(0.0, 3.0)
            mean = rng.normal(0.0, 2.0)
            std = rng.uniform(0.3, 4.0)
            p = NormalParams(mean, std)
            dx, dmean, dstd = normal_logpdf_grad(x, p)
            fd_x = central_diff(lambda v: normal_logpdf(v[0], p), np.array([x]), 0, h)
            fd_m = central_diff(lambda v: normal_logpdf(x, NormalParams(v[0], std)), np.array([mean]), 0, h)
            fd_s = central_diff(lambda v: normal_logpdf(x, NormalParams(mean, v[0])), np.array([std]), 0, h)
            assert rel_err(dx, fd_x) < 1e-5
            assert rel_err(dmean, fd_m) < 1e-5
            assert rel_err(dstd, fd_s) < 1e-5

    def test_normalization_by_quadrature(self):
        p = NormalParams(1.3, 2.1)
        grid = np.linspace(p.mean - 10 * p.std, p.mean + 10 * p.std, 20001)
        total = simpson(np.exp(normal_logpdf(grid, p)), x=grid)
        assert abs(total - 1.0) < 1e-8

    def test_nonfinite_input_rejected(self):
        with pytest.raises(ValueError):
            normal_logpdf(float("nan"), NormalParams(0.0, 1.0))
        with pytest.raises(ValueError):
            normal_logpdf_grad(float("inf"), NormalParams(0.0, 1.0))

    def test_invalid_params_rejected(self):
        with pytest.raises(ValueError):
            NormalParams(0.0, 0.0)
        with pytest.raises(ValueError):
            NormalParams(float("nan"), 1.0)


class TestGammaLogpdf:
    def test_exponential_values(self):
        assert gamma_logpdf(1.0, GammaParams(1.0, 1.0)) == pytest.approx(-1.0, abs=1e-12)
        assert gamma_logpdf(0.5, GammaParams(1.0, 1.0)) == pytest.approx(-0.5, abs=1e-12)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(11)
        h = 1e-6
        for _ in range(100):
            x = rng.uniform(0.2, 8.0)
            shape = rng.uniform(0.5, 90.0)
            rate = rng.uniform(0.1, 20.0)
            p = GammaParams(shape, rate)
            dx, dshape, drate = gamma_logpdf_grad(x, p)
            fd_x = central_diff(lambda v: gamma_logpdf(v[0], p), np.array([x]), 0, h)
            fd_a = central_diff(lambda v: gamma_logpdf(x, GammaParams(v[0], rate)), np.array([shape]), 0, h)
            fd_b = central_diff(lambda v: gamma_logpdf(x, GammaParams(shape, v[0])), np.array([rate]), 0, h)
            assert rel_err(dx, fd_x) < 1e-5
            assert rel_err(dshape, fd_a) < 1e-5
            assert rel_err(drate, fd_b) < 1e-5

    def test_domain_error(self):
        with pytest.raises(ValueError):
            gamma_logpdf(0.0, GammaParams(2.0, 1.0))
        with pytest.raises(ValueError):
            gamma_logpdf(-1.0, GammaParams(2.0, 1.0))

    def test_normalization_by_quadrature(self):
        p = GammaParams(3.0, 0.2)
        grid = np.linspace(1e-9, 200.0, 400001)
        total = simpson(np.exp(gamma_logpdf(grid, p)), x=grid)
        assert abs(total - 1.0) < 1e-6


class TestGammaMoments:
    @pytest.mark.parametrize(
        "shape,rate,mean,var",
        [(3.0, 0.2, 15.0, 75.0), (80.0, 16.0, 5.0, 0.3125), (3.6, 6.0, 0.6, 0.1)],
    )
    def test_hyperprior_moments(self, shape, rate, mean, var):
        m, v = gamma_moments(GammaParams(shape, rate))
        assert m == pytest.approx(mean, rel=1e-12)
        assert v == pytest.approx(var, rel=1e-12)

    def test_moment_round_trip(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            mean = rng.uniform(0.05, 40.0)
            var = rng.uniform(0.01, 30.0)
            p = gamma_params_from_moments(mean, var)
            m, v = gamma_moments(p)
            assert abs(m - mean) < 1e-12 * max(1.0, mean)
            assert abs(v - var) < 1e-12 * max(1.0, var)


class TestSamplers:
    def test_normal_sample_moments(self):
        rng = rng_from_seed(123, 0)
        draws = sample_normal(NormalParams(0.0, 1.0), rng, size=100_000)
        assert abs(draws.mean()) < 0.02
        assert abs(draws.var() - 1.0) < 0.02

    def test_gamma_sample_moments(self):
        rng = rng_from_seed(123, 1)
        draws = sample_gamma(GammaParams(3.0, 0.2), rng, size=100_000)
        assert abs(draws.mean() - 15.0) / 15.0 < 0.01

    def test_fixed_seed_bit_identical(self):
        a = sample_normal(NormalParams(2.0, 0.5), rng_from_seed(9, 4), size=64)
        b = sample_normal(NormalParams(2.0, 0.5), rng_from_seed(9, 4), size=64)
        assert np.array_equal(a, b)
        c = sample_gamma(GammaParams(4.0, 2.0), rng_from_seed(9, 5), size=64)
        d = sample_gamma(GammaParams(4.0, 2.0), rng_from_seed(9, 5), size=64)
        assert np.array_equal(c, d)

    def test_streams_are_distinct(self):
        a = rng_from_seed(9, 0).normal(size=8)
        b = rng_from_seed(9, 1).normal(size=8)
        assert not np.allclose(a, b)

    def test_derive_seed_stable(self):
        assert derive_seed(42, 2, 0) == derive_seed(42, 2, 0)
        assert derive_seed(42, 2, 0) != derive_seed(42, 2, 1)
