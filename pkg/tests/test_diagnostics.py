import math

import numpy as np
import pytest

from platepool.diagnostics import (ess, format_summary_table,
                                   rank_normalized_rhat, summarize,
                                   write_summary)
from platepool.distributions import rng_from_seed


def iid_chains(n_chains=4, n_draws=2000, seed=0, dist="normal"):
    rng = rng_from_seed(seed, 0)
    if dist == "normal":
        return rng.normal(size=(n_chains, n_draws))
    return rng.uniform(size=(n_chains, n_draws))


def ar1_chains(phi, n_chains=4, n_draws=5000, seed=1):
    rng = rng_from_seed(seed, 0)
    x = np.empty((n_chains, n_draws))
    innov_scale = math.sqrt(1.0 - phi * phi)
    for c in range(n_chains):
        x[c, 0] = rng.normal()
        for t in range(1, n_draws):
            x[c, t] = phi * x[c, t - 1] + innov_scale * rng.normal()
    return x


class TestRhat:
    def test_iid_chains_pass_gate(self):
        r = rank_normalized_rhat(iid_chains())
        assert r.value < 1.01
        assert not r.degenerate

    def test_shifted_chain_detected(self):
        x = iid_chains()
        x[0] += 5.0  # one chain displaced by 5 sigma
        assert rank_normalized_rhat(x).value > 1.2

    def test_all_constant_is_flagged_unit_value(self):
        x = np.full((4, 100), 3.7)
        r = rank_normalized_rhat(x)
        assert r.value == 1.0
        assert r.degenerate

    def test_distinct_constants_flagged_large(self):
        x = np.vstack([np.full(100, 1.0), np.full(100, 2.0)])
        r = rank_normalized_rhat(x)
        assert r.value > 10.0
        assert r.degenerate

    def test_monotone_transform_invariance(self):
        x = iid_chains(seed=5)
        x[0] += 0.3  # mild mismatch so rhat is not exactly 1
        base = rank_normalized_rhat(x).value
        for f in (np.exp, lambda v: 3.0 * v - 7.0, lambda v: v**3):
            assert abs(rank_normalized_rhat(f(x)).value - base) < 1e-12

    def test_chain_relabeling_invariance(self):
        x = iid_chains(seed=6)
        x[1] += 0.5
        base = rank_normalized_rhat(x).value
        perm = [2, 0, 3, 1]
        assert rank_normalized_rhat(x[perm]).value == pytest.approx(base, abs=1e-14)

    def test_input_validation(self):
        with pytest.raises(ValueError):
            rank_normalized_rhat(np.ones((1, 100)))
        with pytest.raises(ValueError):
            rank_normalized_rhat(np.ones((4, 2)))


class TestEss:
    def test_iid_ess_near_total(self):
        x = iid_chains(seed=7)
        total = x.size
        val = ess(x, "bulk").value
        assert abs(val - total) / total < 0.15

    def test_ar1_ess_matches_theory(self):
        phi = 0.9
        x = ar1_chains(phi)
        expected = x.size * (1.0 - phi) / (1.0 + phi)
        val = ess(x, "bulk").value
        assert abs(val - expected) / expected < 0.25

    def test_constant_chain_flagged(self):
        r = ess(np.full((4, 100), 2.0), "bulk")
        assert r.degenerate
        assert math.isnan(r.value)

    def test_tail_ess_reasonable_for_iid(self):
        x = iid_chains(seed=8)
        val = ess(x, "tail").value
        assert 0.3 * x.size < val <= 1.5 * x.size

    def test_cap_on_antithetic_chains(self):
        # perfectly alternating draws are strongly negatively correlated:
        # the estimate is capped at 1.5x the draw count and flags nothing
        base = iid_chains(n_chains=2, n_draws=1000, seed=9)
        x = np.abs(base) * np.tile([1.0, -1.0], 500)
        val = ess(x, "bulk").value
        assert val <= 1.5 * x.size

    def test_kind_validation(self):
        with pytest.raises(ValueError):
            ess(iid_chains(), "typo")


class TestSummarize:
    def test_symmetric_mean_median_agree(self):
        rng = rng_from_seed(10, 0)
        draws = rng.normal(size=(4, 2000, 1))
        s = summarize(draws, ["x"])
        p = s.params[0]
        assert abs(p.mean - p.q50) < 2.0 * p.mcse_mean

    def test_uniform_quantiles(self):
        rng = rng_from_seed(11, 0)
        draws = rng.uniform(size=(4, 2000, 1))
        p = summarize(draws, ["u"]).params[0]
        assert abs(p.q2_5 - 0.025) < 0.01
        assert abs(p.q97_5 - 0.975) < 0.01

    def test_deterministic(self):
        draws = iid_chains(seed=12).reshape(4, 2000, 1)
        a = summarize(draws, ["x"])
        b = summarize(draws, ["x"])
        assert a == b

    def test_gate_logic(self):
        good = iid_chains(seed=13).reshape(4, 2000, 1)
        assert summarize(good, ["x"]).gate_passed
        bad = good.copy()
        bad[0, :, 0] += 5.0
        s = summarize(bad, ["x"])
        assert not s.gate_passed
        assert s.max_rhat > 1.2

    def test_quantiles_use_linear_interpolation(self):
        draws = np.arange(1.0, 9.0).reshape(1, 8, 1).repeat(2, axis=0)
        p = summarize(draws, ["x"]).params[0]
        assert p.q50 == pytest.approx(np.quantile(np.tile(np.arange(1.0, 9.0), 2), 0.5))

    def test_write_summary_files(self, tmp_path):
        draws = iid_chains(seed=14).reshape(4, 2000, 1)
        s = summarize(draws, ["mu_w[1]"])
        write_summary(s, tmp_path / "s.json", tmp_path / "s.txt")
        import json

        data = json.loads((tmp_path / "s.json").read_text())
        assert data["gate_passed"] is True
        assert data["params"][0]["name"] == "mu_w[1]"
        table = (tmp_path / "s.txt").read_text()
        assert "mu_w[1]" in table
        assert "convergence gate" in table

    def test_table_marks_degenerate(self):
        draws = np.full((4, 100, 1), 1.0)
        table = format_summary_table(summarize(draws, ["const"]))
        assert "*degenerate*" in table
