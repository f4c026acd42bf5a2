import math

import numpy as np
import pytest
from scipy import linalg

from platepool.gpr import (KernelConfig, coefficient_of_variation,
                           gpr_fit, gpr_mean_grad, gpr_predict, load_gpr,
                           log_marginal_likelihood,
                           log_marginal_likelihood_grad, save_gpr)

from conftest import rel_err


def _rbf(x1, x2, kc):
    d = np.subtract.outer(x1, x2)
    return kc.signal_var * np.exp(-(d**2) / (2.0 * kc.lengthscale**2))


class TestFit:
    def test_noise_free_interpolation_two_points(self):
        kc = KernelConfig(1.0, 1.0, 1e-9)
        model = gpr_fit([0.0, 1.0], [0.0, 1.0], kc, optimize_hypers=False)
        for x, y in [(0.0, 0.0), (1.0, 1.0)]:
            mean, var = gpr_predict(model, x)
            assert abs(mean - y) < 1e-6
            assert var <= 1e-6 * kc.signal_var

    def test_marginal_likelihood_gradient_matches_fd(self):
        rng = np.random.default_rng(2)
        x = np.sort(rng.uniform(0.0, 10.0, 10))
        y = np.sin(x) * 3.0 + rng.normal(0.0, 0.2, 10)
        kc = KernelConfig(2.0, 1.5, 0.1)
        _, grad = log_marginal_likelihood_grad(x, y, kc)
        z0 = np.log([kc.signal_var, kc.lengthscale, kc.noise_var])
        h = 1e-6
        for j in range(3):
            zp, zm = z0.copy(), z0.copy()
            zp[j] += h
            zm[j] -= h
            fd = (
                log_marginal_likelihood(x, y, KernelConfig(*np.exp(zp)))
                - log_marginal_likelihood(x, y, KernelConfig(*np.exp(zm)))
            ) / (2 * h)
            assert rel_err(grad[j], fd) < 1e-4

    def test_two_point_plate_fit_succeeds(self, default_dataset):
        # the data-scarce plate has two observed pairs; fitting must stay
        # well-conditioned even with hyperparameter optimization on
        x = np.asarray(default_dataset.amplitudes[5])
        y = np.asarray(default_dataset.strains[5])
        model = gpr_fit(x, y, KernelConfig(1e4, 3.0, 25.0), seed=0)
        assert np.all(np.isfinite(model.alpha))
        assert np.all(np.isfinite(np.diag(model.chol)))
        mean, var = gpr_predict(model, float(x.mean()))
        assert math.isfinite(mean) and var >= 0.0

    def test_optimization_improves_marginal_likelihood(self):
        rng = np.random.default_rng(4)
        x = np.linspace(0.0, 12.0, 30)
        y = -50.0 + 25.0 * x + 1.5 * x**2 + rng.normal(0.0, 5.0, 30)
        init = KernelConfig(1.0, 0.1, 1.0)
        fixed = gpr_fit(x, y, init, optimize_hypers=False)
        opt = gpr_fit(x, y, init, seed=1)
        assert opt.log_marginal > fixed.log_marginal

    def test_jitter_escalation_with_duplicates(self):
        # duplicate inputs with a tiny noise floor still factorize
        model = gpr_fit([1.0, 1.0, 2.0], [0.9, 1.1, 2.0],
                        KernelConfig(1.0, 1.0, 1e-8), optimize_hypers=False)
        assert np.all(np.isfinite(model.alpha))

    def test_ill_conditioning_error_message(self, monkeypatch):
        calls = {"n": 0}

        def always_fail(*args, **kwargs):
            calls["n"] += 1
            raise linalg.LinAlgError("not positive definite")

        monkeypatch.setattr(linalg, "cholesky", always_fail)
        with pytest.raises(linalg.LinAlgError, match="duplicate"):
            gpr_fit([0.0, 0.0], [1.0, 1.0], KernelConfig(1.0, 1.0, 1e-12),
                    optimize_hypers=False)
        assert calls["n"] > 1  # escalation attempted before giving up

    def test_too_few_points_rejected(self):
        with pytest.raises(ValueError):
            gpr_fit([1.0], [2.0], KernelConfig(1.0, 1.0, 0.1))


class TestPredict:
    def test_far_field_reverts_to_prior_variance(self):
        kc = KernelConfig(4.0, 1.0, 0.01)
        model = gpr_fit(np.linspace(0, 1, 5), np.ones(5), kc, optimize_hypers=False)
        _, var = gpr_predict(model, 50.0)  # > 10 lengthscales away
        assert abs(var - kc.signal_var) / kc.signal_var < 0.01

    def test_two_point_closed_form_oracle(self):
        # direct 2x2 solve, independent of the Cholesky implementation
        kc = KernelConfig(1.0, 1.0, 0.01)
        x = np.array([0.0, 2.0])
        y = np.array([0.0, 4.0])
        model = gpr_fit(x, y, kc, optimize_hypers=False)
        k_train = _rbf(x, x, kc) + kc.noise_var * np.eye(2)
        k_star = _rbf(np.array([1.0]), x, kc)[0]
        expected_mean = k_star @ np.linalg.solve(k_train, y)
        expected_var = kc.signal_var - k_star @ np.linalg.solve(k_train, k_star)
        mean, var = gpr_predict(model, 1.0)
        assert mean == pytest.approx(expected_mean, abs=1e-10)
        assert var == pytest.approx(expected_var, abs=1e-10)

    def test_posterior_mean_linear_in_targets(self):
        kc = KernelConfig(2.0, 1.2, 0.05)
        rng = np.random.default_rng(8)
        x = np.linspace(0, 5, 12)
        y1 = rng.normal(size=12)
        y2 = rng.normal(size=12)
        grid = np.linspace(-1, 6, 40)
        m1, _ = gpr_predict(gpr_fit(x, y1, kc, optimize_hypers=False), grid)
        m2, _ = gpr_predict(gpr_fit(x, y2, kc, optimize_hypers=False), grid)
        m12, _ = gpr_predict(gpr_fit(x, y1 + y2, kc, optimize_hypers=False), grid)
        np.testing.assert_allclose(m12, m1 + m2, atol=1e-9)

    def test_variance_independent_of_targets(self):
        kc = KernelConfig(2.0, 1.2, 0.05)
        rng = np.random.default_rng(9)
        x = np.linspace(0, 5, 12)
        grid = np.linspace(-1, 6, 40)
        _, v1 = gpr_predict(gpr_fit(x, rng.normal(size=12), kc, optimize_hypers=False), grid)
        _, v2 = gpr_predict(gpr_fit(x, rng.normal(size=12) * 5, kc, optimize_hypers=False), grid)
        np.testing.assert_allclose(v1, v2, atol=1e-12)

    def test_adding_a_point_never_increases_variance(self):
        kc = KernelConfig(1.0, 1.0, 1e-8)
        x = np.array([0.0, 1.0, 2.5, 4.0])
        y = np.sin(x)
        grid = np.linspace(-0.5, 4.5, 60)
        _, v_before = gpr_predict(gpr_fit(x, y, kc, optimize_hypers=False), grid)
        x2 = np.append(x, 3.2)
        _, v_after = gpr_predict(gpr_fit(x2, np.sin(x2), kc, optimize_hypers=False), grid)
        assert np.all(v_after <= v_before + 1e-8)


class TestMeanGradient:
    def test_symmetry_gives_zero_gradient(self):
        kc = KernelConfig(1.0, 1.0, 0.01)
        x = np.array([-2.0, -1.0, 1.0, 2.0])
        y = np.array([1.0, 2.0, 2.0, 1.0])  # even function
        model = gpr_fit(x, y, kc, optimize_hypers=False)
        assert abs(gpr_mean_grad(model, 0.0)) < 1e-8

    def test_matches_finite_differences(self, surrogates):
        model = surrogates[0]
        rng = np.random.default_rng(12)
        h = 1e-4  # large intermediates make smaller steps roundoff-bound
        for _ in range(20):
            x = rng.uniform(0.5, 11.5)
            fd = (gpr_predict(model, x + h)[0] - gpr_predict(model, x - h)[0]) / (2 * h)
            assert rel_err(gpr_mean_grad(model, x), fd, floor=1e-2) < 1e-5

    def test_constant_targets_give_flat_mean(self):
        # between-point mean reversion shrinks with coverage density; the
        # gradient must be negligible against the target scale (|y| = 5)
        kc = KernelConfig(1.0, 0.5, 1e-9)
        x = np.linspace(0.0, 1.0, 12)
        model = gpr_fit(x, np.full(12, 5.0), kc, optimize_hypers=False)
        for xq in np.linspace(0.25, 0.75, 11):
            assert abs(gpr_mean_grad(model, xq)) < 1e-3


class TestCoefficientOfVariation:
    def test_definition(self):
        kc = KernelConfig(1.0, 1.0, 0.01)
        model = gpr_fit([0.0, 2.0], [90.0, 110.0], kc, optimize_hypers=False)
        mean, var = gpr_predict(model, 1.0)
        assert coefficient_of_variation(model, 1.0) == pytest.approx(math.sqrt(var) / abs(mean))

    def test_near_zero_at_training_point_with_tiny_noise(self):
        kc = KernelConfig(1.0, 1.0, 1e-10)
        model = gpr_fit([0.0, 1.0], [100.0, 120.0], kc, optimize_hypers=False)
        assert coefficient_of_variation(model, 1.0) < 1e-4

    def test_undefined_for_tiny_mean(self):
        kc = KernelConfig(1.0, 1.0, 0.01)
        model = gpr_fit([-1.0, 1.0], [-1.0, 1.0], kc, optimize_hypers=False)
        assert math.isnan(coefficient_of_variation(model, 0.0))


class TestPersistence:
    def test_round_trip_reproduces_predictions(self, tmp_path, surrogates):
        model = surrogates[2]
        path = tmp_path / "surrogate.json"
        save_gpr(model, path)
        loaded = load_gpr(path)
        grid = np.linspace(0.0, 12.0, 101)
        m1, v1 = gpr_predict(model, grid)
        m2, v2 = gpr_predict(loaded, grid)
        assert np.array_equal(m1, m2)  # bit-for-bit on one machine
        assert np.array_equal(v1, v2)
        assert loaded.kernel == model.kernel
