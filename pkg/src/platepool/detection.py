"""Posterior predictive strain distributions and damage detection.

For a plate's posterior draws (mu_w[k], sigma_w[k], gamma), each draw
produces one predictive strain: an amplitude from the truncated-at-zero
Normal(mu_w[k], sigma_w[k]^2), pushed through the surrogate posterior
mean, plus measurement noise from the same draw's gamma. Gaussian KDE
turns the samples into densities; regulatory deflection levels map to
threshold strains by averaging noisy surrogate evaluations over the
gamma draws. Partial-pooling and no-pooling predictives are compared
via their standard deviations (variance-reduction ratio) and threshold
exceedance probabilities.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass

import numpy as np

from .distributions import LN_2PI
from .gpr import GprModel, gpr_predict

PARTIAL_POOLING = "partial_pooling"
NO_POOLING = "no_pooling"


@dataclass(frozen=True)
class PredictiveSamples:
    """Posterior predictive strain draws for one plate under one regime."""

    plate: int
    strains: np.ndarray
    source: str

    def __post_init__(self):
        if self.source not in (PARTIAL_POOLING, NO_POOLING):
            raise ValueError(f"unknown source {self.source!r}")
        if not np.all(np.isfinite(self.strains)):
            raise ValueError("predictive strains must be finite")


@dataclass(frozen=True)
class ThresholdSet:
    """Deflection levels (mm) and their averaged threshold strains."""

    levels: tuple
    strain_means: tuple

    def __post_init__(self):
        lv = np.asarray(self.levels, dtype=float)
        if np.any(lv <= 0.0) or np.any(np.diff(lv) <= 0.0):
            raise ValueError(f"levels must be strictly increasing and positive, got {self.levels}")


@dataclass(frozen=True)
class KdeResult:
    """Gaussian KDE on a fixed grid."""

    grid: np.ndarray
    density: np.ndarray
    bandwidth: float
    samples: np.ndarray

    def evaluate(self, x):
        scalar = np.ndim(x) == 0
        xq = np.atleast_1d(np.asarray(x, dtype=float))
        out = _kde_eval(self.samples, xq, self.bandwidth)
        return float(out[0]) if scalar else out

    def integral(self) -> float:
        return float(np.trapezoid(self.density, self.grid))


@dataclass(frozen=True)
class SourceDetection:
    """One pooling regime's predictive summary for a plate."""

    source: str
    std: float
    exceedance: dict
    kde: KdeResult
    n_samples: int


@dataclass(frozen=True)
class PlateDetection:
    plate: int
    thresholds: ThresholdSet
    partial_pooling: SourceDetection
    no_pooling: SourceDetection
    variance_reduction: float


@dataclass(frozen=True)
class DetectionReport:
    levels: tuple
    plates: tuple

    def plate(self, k: int) -> PlateDetection:
        for p in self.plates:
            if p.plate == k:
                return p
        raise KeyError(f"no detection entry for plate {k}")


def _chain_column(chains, name):
    try:
        return chains.column(name)
    except KeyError:
        raise KeyError(
            f"chains are missing parameter column {name!r}; available: "
            f"{', '.join(chains.param_names[:8])}..."
        ) from None


def gamma_column(chains, plate=None):
    """Noise-scale draws: shared ``gamma`` or the per-plate ``gamma[k]``."""
    names = set(chains.param_names)
    if "gamma" in names:
        return _chain_column(chains, "gamma")
    if plate is not None and f"gamma[{plate}]" in names:
        return _chain_column(chains, f"gamma[{plate}]")
    raise KeyError("chains carry neither 'gamma' nor a per-plate 'gamma[k]' column")


def draw_predictive(chains, plate: int, surrogate: GprModel, rng,
                    source: str, noise_std_draws=None) -> PredictiveSamples:
    """Posterior predictive strain samples for one plate.

    One predictive strain per posterior draw: amplitude from the
    truncated Normal (rejection at 0, mirroring generation), surrogate
    mean, plus Normal(0, gamma^2) noise from the same draw.
    """
    mu = _chain_column(chains, f"mu_w[{plate}]")
    sigma = _chain_column(chains, f"sigma_w[{plate}]")
    gamma = np.asarray(noise_std_draws, dtype=float) if noise_std_draws is not None \
        else gamma_column(chains, plate)
    if not (len(mu) == len(sigma) == len(gamma)):
        raise ValueError("parameter columns have mismatched draw counts")
    w = rng.normal(mu, sigma)
    bad = w < 0.0
    while np.any(bad):
        w[bad] = rng.normal(mu[bad], sigma[bad])
        bad = w < 0.0
    mean_strain, _ = gpr_predict(surrogate, w)
    strains = mean_strain + rng.normal(0.0, 1.0, size=len(w)) * gamma
    return PredictiveSamples(plate=plate, strains=strains, source=source)


def silverman_bandwidth(samples) -> float:
    """0.9 * min(std, IQR/1.34) * n^(-1/5), guarding zero-spread pieces."""
    x = np.asarray(samples, dtype=float)
    std = float(np.std(x))
    iqr = float(np.quantile(x, 0.75) - np.quantile(x, 0.25))
    candidates = [v for v in (std, iqr / 1.34) if v > 0.0]
    if not candidates:
        return 0.0
    return 0.9 * min(candidates) * len(x) ** (-0.2)


def _kde_eval(samples, x, bandwidth, chunk=2048):
    inv = 1.0 / bandwidth
    out = np.zeros(len(x))
    for lo in range(0, len(samples), chunk):
        s = samples[lo : lo + chunk]
        z = (x[:, None] - s[None, :]) * inv
        out += np.exp(-0.5 * z * z - 0.5 * LN_2PI).sum(axis=1)
    return out * inv / len(samples)


def kde(samples, bandwidth=None, grid_size: int = 512, span: float = 4.0) -> KdeResult:
    """Gaussian kernel density estimate on a regular grid.

    The default bandwidth is Silverman's rule; the grid spans the data
    range padded by ``span`` bandwidths. Zero-variance input degenerates
    to a spike and is reported with a warning.
    """
    x = np.asarray(samples, dtype=float)
    if x.ndim != 1 or len(x) < 2:
        raise ValueError("kde needs a 1-d sample of length >= 2")
    if bandwidth is None:
        bandwidth = silverman_bandwidth(x)
    if bandwidth <= 0.0:
        import warnings

        warnings.warn("zero-variance KDE input; density degenerates to a spike", RuntimeWarning)
        bandwidth = max(abs(float(x[0])), 1.0) * 1e-6
    grid = np.linspace(x.min() - span * bandwidth, x.max() + span * bandwidth, grid_size)
    density = _kde_eval(x, grid, bandwidth)
    return KdeResult(grid=grid, density=density, bandwidth=float(bandwidth), samples=x)


def threshold_strains(levels, surrogate: GprModel, gamma_draws, rng) -> ThresholdSet:
    """Averaged threshold strain per deflection level.

    Each level is pushed through the surrogate mean once per gamma draw
    with likelihood noise added, then averaged; by the law of large
    numbers this approaches the surrogate mean at the level.
    """
    gamma_draws = np.asarray(gamma_draws, dtype=float)
    means = []
    for level in levels:
        base, _ = gpr_predict(surrogate, float(level))
        noisy = base + rng.normal(0.0, 1.0, size=len(gamma_draws)) * gamma_draws
        means.append(float(np.mean(noisy)))
    return ThresholdSet(levels=tuple(float(v) for v in levels), strain_means=tuple(means))


def _source_detection(samples: PredictiveSamples, thresholds: ThresholdSet) -> SourceDetection:
    exceedance = {
        level: float(np.mean(samples.strains > t))
        for level, t in zip(thresholds.levels, thresholds.strain_means)
    }
    return SourceDetection(
        source=samples.source,
        std=float(np.std(samples.strains, ddof=1)),
        exceedance=exceedance,
        kde=kde(samples.strains),
        n_samples=len(samples.strains),
    )


def compare_pooling(partial: PredictiveSamples, independent: PredictiveSamples,
                    thresholds: ThresholdSet) -> PlateDetection:
    """Pool-vs-no-pool comparison for one plate.

    The variance-reduction ratio is (no-pooling std)/(partial-pooling
    std); values above 1 mean pooling tightened the predictive.
    """
    if partial.plate != independent.plate:
        raise ValueError("cannot compare predictive samples of different plates")
    pp = _source_detection(partial, thresholds)
    npd = _source_detection(independent, thresholds)
    return PlateDetection(
        plate=partial.plate,
        thresholds=thresholds,
        partial_pooling=pp,
        no_pooling=npd,
        variance_reduction=npd.std / pp.std,
    )


def report_to_dict(report: DetectionReport) -> dict:
    def src(s: SourceDetection):
        return {
            "std_microeps": s.std,
            "n_samples": s.n_samples,
            "kde_bandwidth": s.kde.bandwidth,
            "exceedance": {f"{lv:g}mm": p for lv, p in s.exceedance.items()},
        }

    return {
        "levels_mm": list(report.levels),
        "plates": [
            {
                "plate": p.plate,
                "threshold_strains_microeps": {
                    f"{lv:g}mm": t for lv, t in zip(p.thresholds.levels, p.thresholds.strain_means)
                },
                "partial_pooling": src(p.partial_pooling),
                "no_pooling": src(p.no_pooling),
                "variance_reduction_ratio": p.variance_reduction,
            }
            for p in report.plates
        ],
    }


def write_report(report: DetectionReport, json_path, kde_csv_path):
    """Write the detection report JSON and the KDE curves CSV.

    CSV columns: grid, density, source, plate.
    """
    with open(json_path, "w") as fh:
        json.dump(report_to_dict(report), fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(kde_csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["grid", "density", "source", "plate"])
        for p in report.plates:
            for s in (p.partial_pooling, p.no_pooling):
                for g, d in zip(s.kde.grid, s.kde.density):
                    writer.writerow(["%.9g" % g, "%.9g" % d, s.source, p.plate])
