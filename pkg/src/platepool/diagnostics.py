"""Convergence diagnostics and posterior summaries.

Rank-normalized split R-hat and effective sample size in the style of
Vehtari et al. (2021): chains are split in half, all draws are ranked
jointly (ties averaged), ranks map to normal scores through the inverse
normal CDF of (r - 3/8)/(S + 1/4), and the classic split-R-hat /
Geyer-initial-monotone ESS run on the scores. The tail R-hat variant
folds the scores around their median (fold, re-rank, split-R-hat), so
the reported value is exactly rank-based and invariant under strictly
monotone transformations of the draws.

Degenerate inputs (constant draws) yield defined, flagged results
instead of NaNs so that pipeline gates remain decidable.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy.fft import irfft, next_fast_len, rfft
from scipy.special import ndtri
from scipy.stats import rankdata

GATE_RHAT = 1.01
ESS_CAP_FACTOR = 1.5


@dataclass(frozen=True)
class RhatResult:
    value: float
    bulk: float
    tail: float
    degenerate: bool


@dataclass(frozen=True)
class EssResult:
    value: float
    degenerate: bool


@dataclass(frozen=True)
class ParamSummary:
    name: str
    mean: float
    std: float
    q2_5: float
    q50: float
    q97_5: float
    rhat: float
    ess_bulk: float
    ess_tail: float
    mcse_mean: float
    degenerate: bool


@dataclass(frozen=True)
class Summary:
    """Per-parameter posterior summary with the convergence gate result."""

    params: tuple
    n_chains: int
    n_samples: int
    gate_threshold: float = GATE_RHAT

    @property
    def gate_passed(self) -> bool:
        return all(p.rhat < self.gate_threshold for p in self.params)

    @property
    def max_rhat(self) -> float:
        return max(p.rhat for p in self.params)

    def param(self, name: str) -> ParamSummary:
        for p in self.params:
            if p.name == name:
                return p
        raise KeyError(f"no parameter named {name!r}")


def _split(x):
    x = np.asarray(x, dtype=float)
    if x.ndim != 2:
        raise ValueError("expected (n_chains, n_draws) array")
    c, s = x.shape
    half = s // 2
    return np.concatenate([x[:, :half], x[:, half : 2 * half]], axis=0)


def _rank_normal_scores(x):
    """Joint average-ranks mapped through the inverse normal CDF."""
    flat = x.reshape(-1)
    r = rankdata(flat, method="average")
    z = ndtri((r - 0.375) / (flat.size + 0.25))
    return z.reshape(x.shape)


def _split_rhat_scores(z):
    """Classic split-R-hat sqrt((W(n-1)/n + B/n)/W) on score matrix z."""
    m, n = z.shape
    chain_means = z.mean(axis=1)
    w = float(np.mean(np.var(z, axis=1, ddof=1)))
    b_over_n = float(np.var(chain_means, ddof=1))
    var_plus = w * (n - 1) / n + b_over_n
    degenerate = w <= 1e-12 * max(var_plus, 1e-300)
    w_eff = w + 1e-12 * var_plus + 1e-300
    return float(np.sqrt(var_plus / w_eff)), degenerate


def rank_normalized_rhat(chains) -> RhatResult:
    """Rank-normalized split R-hat (max of bulk and tail variants).

    Parameters
    ----------
    chains : array_like, shape (n_chains, n_draws)
        Per-chain draws of one parameter; >= 2 chains, >= 4 draws each.
    """
    x = np.asarray(chains, dtype=float)
    if x.ndim != 2 or x.shape[0] < 2 or x.shape[1] < 4:
        raise ValueError("need >= 2 chains with >= 4 draws each")
    if np.all(x == x.flat[0]):
        return RhatResult(value=1.0, bulk=1.0, tail=1.0, degenerate=True)
    halves = _split(x)
    z = _rank_normal_scores(halves)
    bulk, deg_b = _split_rhat_scores(z)
    folded = np.abs(z - np.median(z))
    zf = _rank_normal_scores(folded)
    tail, deg_t = _split_rhat_scores(zf)
    return RhatResult(
        value=max(bulk, tail), bulk=bulk, tail=tail, degenerate=deg_b or deg_t
    )


def _autocov(z):
    """Per-chain biased autocovariance via FFT; z is (m, n)."""
    m, n = z.shape
    zc = z - z.mean(axis=1, keepdims=True)
    size = next_fast_len(2 * n)
    f = rfft(zc, size, axis=1)
    acov = irfft(f * np.conj(f), size, axis=1)[:, :n].real
    return acov / n


def _ess_core(z):
    """Geyer initial-monotone-sequence ESS on a (m, n) score matrix."""
    m, n = z.shape
    if np.all(z == z.flat[0]):
        return float("nan"), True
    acov = _autocov(z)
    mean_var = float(np.mean(acov[:, 0])) * n / (n - 1)  # mean within-chain var (ddof=1)
    var_plus = mean_var * (n - 1) / n
    if m > 1:
        var_plus += float(np.var(z.mean(axis=1), ddof=1))
    if var_plus <= 0.0:
        return float("nan"), True
    rho = 1.0 - (mean_var - acov.mean(axis=0)) / var_plus
    rho[0] = 1.0
    # pairwise Geyer sums: keep while positive, enforce monotone decrease
    max_pairs = (n - 1) // 2
    tau = 0.0
    prev_pair = np.inf
    used_pairs = 0
    for k in range(max_pairs):
        pair = rho[2 * k] + rho[2 * k + 1]
        if pair <= 0.0:
            break
        pair = min(pair, prev_pair)
        tau += pair
        prev_pair = pair
        used_pairs += 1
    if used_pairs == 0:
        tau = max(rho[0], 1e-12)  # pathological anticorrelation; fall back
        tau_total = tau
    else:
        tau_total = -1.0 + 2.0 * tau
    tau_total = max(tau_total, 1e-12)
    return m * n / tau_total, False


def ess(chains, kind: str = "bulk") -> EssResult:
    """Effective sample size of one parameter's chains.

    ``bulk`` runs on rank-normal scores of the split chains; ``tail``
    is the minimum over the 5%/95% quantile-indicator ESS values. Values
    above 1.5x the draw count are capped (antithetic chains), which
    itself is a flag of suspicion in reports.
    """
    x = np.asarray(chains, dtype=float)
    if x.ndim != 2 or x.shape[0] < 1 or x.shape[1] < 4:
        raise ValueError("need chains with >= 4 draws each")
    if np.all(x == x.flat[0]):
        return EssResult(value=float("nan"), degenerate=True)
    halves = _split(x)
    total = x.shape[0] * x.shape[1]
    if kind == "bulk":
        val, deg = _ess_core(_rank_normal_scores(halves))
    elif kind == "tail":
        vals = []
        any_deg = False
        for q in (0.05, 0.95):
            indicator = (halves <= np.quantile(x, q)).astype(float)
            v, deg = _ess_core(indicator)
            any_deg = any_deg or deg
            if not deg:
                vals.append(v)
        if not vals:
            return EssResult(value=float("nan"), degenerate=True)
        val, deg = min(vals), any_deg
    else:
        raise ValueError(f"kind must be 'bulk' or 'tail', got {kind!r}")
    if not np.isnan(val):
        val = min(val, ESS_CAP_FACTOR * total)
    return EssResult(value=float(val), degenerate=deg)


def summarize(chains, param_names=None) -> Summary:
    """Posterior summary table for a :class:`~platepool.nuts.Chains` object
    or a raw (n_chains, n_draws, n_params) array.

    Quantiles use linear interpolation (type 7). The acceptance gate is
    R-hat < 1.01 for every parameter.
    """
    if hasattr(chains, "param_names"):
        values = chains.constrained if chains.constrained is not None else chains.unconstrained
        names = chains.param_names
    else:
        values = np.asarray(chains, dtype=float)
        names = tuple(param_names) if param_names else tuple(f"p{i}" for i in range(values.shape[2]))
    if values.ndim != 3 or values.shape[1] < 4:
        raise ValueError("expected (n_chains, n_draws >= 4, n_params) draws")
    rows = []
    for j, name in enumerate(names):
        x = values[:, :, j]
        pooled = x.reshape(-1)
        r = rank_normalized_rhat(x)
        eb = ess(x, "bulk")
        et = ess(x, "tail")
        std = float(np.std(pooled, ddof=1))
        mcse = std / np.sqrt(eb.value) if eb.value > 0 else float("nan")
        rows.append(
            ParamSummary(
                name=name,
                mean=float(np.mean(pooled)),
                std=std,
                q2_5=float(np.quantile(pooled, 0.025)),
                q50=float(np.quantile(pooled, 0.5)),
                q97_5=float(np.quantile(pooled, 0.975)),
                rhat=r.value,
                ess_bulk=eb.value,
                ess_tail=et.value,
                mcse_mean=mcse,
                degenerate=r.degenerate or eb.degenerate or et.degenerate,
            )
        )
    return Summary(params=tuple(rows), n_chains=values.shape[0], n_samples=values.shape[1])


def summary_to_dict(summary: Summary) -> dict:
    return {
        "n_chains": summary.n_chains,
        "n_samples": summary.n_samples,
        "gate_threshold": summary.gate_threshold,
        "gate_passed": summary.gate_passed,
        "max_rhat": summary.max_rhat,
        "params": [
            {
                "name": p.name,
                "mean": p.mean,
                "std": p.std,
                "q2.5": p.q2_5,
                "q50": p.q50,
                "q97.5": p.q97_5,
                "rhat": p.rhat,
                "ess_bulk": p.ess_bulk,
                "ess_tail": p.ess_tail,
                "mcse_mean": p.mcse_mean,
                "degenerate": p.degenerate,
            }
            for p in summary.params
        ],
    }


def format_summary_table(summary: Summary) -> str:
    """Fixed-width text rendering of the summary."""
    name_w = max(12, max(len(p.name) for p in summary.params))
    header = (
        f"{'parameter':<{name_w}} {'mean':>12} {'std':>12} {'2.5%':>12} "
        f"{'50%':>12} {'97.5%':>12} {'rhat':>8} {'ess_bulk':>9} {'ess_tail':>9}"
    )
    lines = [header, "-" * len(header)]
    for p in summary.params:
        flag = " *degenerate*" if p.degenerate else ""
        lines.append(
            f"{p.name:<{name_w}} {p.mean:>12.5g} {p.std:>12.5g} {p.q2_5:>12.5g} "
            f"{p.q50:>12.5g} {p.q97_5:>12.5g} {p.rhat:>8.4f} {p.ess_bulk:>9.0f} "
            f"{p.ess_tail:>9.0f}{flag}"
        )
    gate = "PASSED" if summary.gate_passed else "FAILED"
    lines.append("-" * len(header))
    lines.append(
        f"convergence gate (all rhat < {summary.gate_threshold}): {gate} "
        f"(max rhat = {summary.max_rhat:.5f})"
    )
    return "\n".join(lines) + "\n"


def write_summary(summary: Summary, json_path, txt_path):
    with open(json_path, "w") as fh:
        json.dump(summary_to_dict(summary), fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(txt_path, "w") as fh:
        fh.write(format_summary_table(summary))
