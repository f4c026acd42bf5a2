"""Synthetic plate-deflection data: analytic strain oracle and generator.

Stands in for the finite-element model. A deflected plate carries a
half-sine "bathtub" mode; the transverse strain read by a (conceptual)
center sensor is an affine-plus-quadratic function of the deflection
amplitude. The two-level generator draws per-plate amplitude statistics
from shared global Normals, then per-observation amplitudes, and maps
them to noisy strains.

Units: lengths in mm, strains in microstrain.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .distributions import rng_from_seed

FLOAT_FMT = "%.9g"


@dataclass(frozen=True)
class PlateGeometry:
    """Rectangular plate, long dimension ``a``, short ``b``, thickness ``t`` (mm)."""

    a: float = 3200.0
    b: float = 800.0
    t: float = 15.0

    def __post_init__(self):
        if not (self.a >= self.b > 0.0):
            raise ValueError(f"plate dimensions must satisfy a >= b > 0, got a={self.a}, b={self.b}")
        if self.t <= 0.0:
            raise ValueError(f"plate thickness must be > 0, got {self.t}")


@dataclass(frozen=True)
class OracleConfig:
    """Deflection-to-strain map constants.

    eps0 is the baseline membrane strain under in-plane compression
    (microstrain), kappa1/kappa2 the linear and quadratic sensitivities
    to amplitude (microstrain/mm, microstrain/mm^2).
    """

    eps0: float = -50.0
    kappa1: float = 25.0
    kappa2: float = 1.5

    def __post_init__(self):
        for name in ("eps0", "kappa1", "kappa2"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"oracle constant {name} must be finite")
        if self.kappa1 <= 0.0:
            raise ValueError(f"kappa1 must be > 0, got {self.kappa1}")


@dataclass(frozen=True)
class GroundTruth:
    """Generation-time truth, kept for audit only; inference never reads it."""

    mu_mu: float
    sigma_mu: float
    mu_sigma: float
    sigma_sigma: float
    plate_means: tuple
    plate_stds: tuple
    noise_std: float


@dataclass(frozen=True)
class DatasetConfig:
    """Two-level generation setup (defaults reproduce the reference setup)."""

    n_plates: int = 6
    obs_counts: tuple = (20, 20, 20, 20, 20, 2)
    mu_mu: float = 5.0
    sigma_mu: float = 1.2
    mu_sigma: float = 0.5
    sigma_sigma: float = 0.15
    noise_std: float = 5.0
    oracle: OracleConfig = field(default_factory=OracleConfig)

    def __post_init__(self):
        if self.n_plates <= 0:
            raise ValueError(f"n_plates must be > 0, got {self.n_plates}")
        if len(self.obs_counts) != self.n_plates:
            raise ValueError(
                f"obs_counts has {len(self.obs_counts)} entries for {self.n_plates} plates"
            )
        if any(n <= 0 for n in self.obs_counts):
            raise ValueError(f"all obs_counts must be > 0, got {self.obs_counts}")
        for name in ("sigma_mu", "sigma_sigma", "noise_std"):
            if getattr(self, name) <= 0.0:
                raise ValueError(f"{name} must be > 0")


@dataclass(frozen=True)
class Dataset:
    """Per-plate amplitude/strain observations plus audit-only ground truth.

    ``amplitudes[k]`` and ``strains[k]`` are aligned arrays for plate k
    (0-based internally, plate labels are 1-based). Inference consumes
    ``strains`` and the plate structure only.
    """

    amplitudes: tuple
    strains: tuple
    ground_truth: GroundTruth

    @property
    def n_plates(self) -> int:
        return len(self.strains)

    @property
    def obs_counts(self) -> tuple:
        return tuple(len(s) for s in self.strains)

    @property
    def total_obs(self) -> int:
        return sum(self.obs_counts)


def deflection_field(u: float, v: float, geom: PlateGeometry, amp: float) -> float:
    """Out-of-plane deflection amp*sin(pi*u/a)*sin(pi*v/b) at plate point (u, v).

    Parameters
    ----------
    u, v : float
        In-plane coordinates, 0 <= u <= a and 0 <= v <= b (mm).
    geom : PlateGeometry
    amp : float
        Mode amplitude (mm), >= 0.
    """
    if not (0.0 <= u <= geom.a) or not (0.0 <= v <= geom.b):
        raise ValueError(f"point ({u}, {v}) outside plate 0..{geom.a} x 0..{geom.b}")
    if amp < 0.0:
        raise ValueError(f"amplitude must be >= 0, got {amp}")
    return amp * math.sin(math.pi * u / geom.a) * math.sin(math.pi * v / geom.b)


def strain_oracle(amp, cfg: OracleConfig):
    """Center-sensor transverse strain for deflection amplitude ``amp`` (mm).

    eps0 + kappa1*amp + kappa2*amp^2, smooth and monotone over the
    operating range [0, 12] mm. Accepts scalars or arrays.
    """
    amp = np.asarray(amp, dtype=float)
    if np.any(amp < 0.0):
        raise ValueError("amplitude must be >= 0")
    out = cfg.eps0 + cfg.kappa1 * amp + cfg.kappa2 * amp * amp
    return float(out) if out.ndim == 0 else out


def _draw_positive(rng, mean, std):
    # rejection resampling, never clamping, so the shape above 0 is kept
    while True:
        x = rng.normal(mean, std)
        if x > 0.0:
            return x


def generate_dataset(cfg: DatasetConfig, seed: int) -> Dataset:
    """Generate the two-level synthetic dataset.

    Per plate k, draws (mu_k, sigma_k) from the global Normals (draws
    that would make negative amplitudes non-negligible, i.e. mu_k <= 0
    or sigma_k <= 0, are rejected and resampled), then N_k amplitudes
    from Normal(mu_k, sigma_k^2) rejected below 0, and maps them to
    strains through the oracle plus white Gaussian noise.

    Parameters
    ----------
    cfg : DatasetConfig
    seed : int
        Root seed; the full dataset is a pure function of (cfg, seed).
    """
    rng = rng_from_seed(seed, 0)
    plate_means = []
    plate_stds = []
    amplitudes = []
    strains = []
    for k in range(cfg.n_plates):
        mu_k = _draw_positive(rng, cfg.mu_mu, cfg.sigma_mu)
        sigma_k = _draw_positive(rng, cfg.mu_sigma, cfg.sigma_sigma)
        plate_means.append(mu_k)
        plate_stds.append(sigma_k)
        n_k = cfg.obs_counts[k]
        amps = np.empty(n_k)
        for i in range(n_k):
            while True:
                w = rng.normal(mu_k, sigma_k)
                if w >= 0.0:
                    break
            amps[i] = w
        eps = strain_oracle(amps, cfg.oracle) + rng.normal(0.0, cfg.noise_std, size=n_k)
        amplitudes.append(amps)
        strains.append(eps)
    truth = GroundTruth(
        mu_mu=cfg.mu_mu,
        sigma_mu=cfg.sigma_mu,
        mu_sigma=cfg.mu_sigma,
        sigma_sigma=cfg.sigma_sigma,
        plate_means=tuple(plate_means),
        plate_stds=tuple(plate_stds),
        noise_std=cfg.noise_std,
    )
    return Dataset(amplitudes=tuple(amplitudes), strains=tuple(strains), ground_truth=truth)


def save_dataset(dataset: Dataset, csv_path, meta_path, cfg: DatasetConfig = None):
    """Write observations as CSV and config + ground truth as a JSON sidecar.

    CSV columns: plate_index, obs_index, amplitude_mm, strain_microeps
    (1-based indices, floats at 9 significant digits).
    """
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["plate_index", "obs_index", "amplitude_mm", "strain_microeps"])
        for k in range(dataset.n_plates):
            for i, (w, e) in enumerate(zip(dataset.amplitudes[k], dataset.strains[k])):
                writer.writerow([k + 1, i + 1, FLOAT_FMT % w, FLOAT_FMT % e])
    truth = dataset.ground_truth
    meta = {
        "ground_truth": {
            "mu_mu": truth.mu_mu,
            "sigma_mu": truth.sigma_mu,
            "mu_sigma": truth.mu_sigma,
            "sigma_sigma": truth.sigma_sigma,
            "plate_means": list(truth.plate_means),
            "plate_stds": list(truth.plate_stds),
            "noise_std": truth.noise_std,
        }
    }
    if cfg is not None:
        meta["config"] = {
            "n_plates": cfg.n_plates,
            "obs_counts": list(cfg.obs_counts),
            "mu_mu": cfg.mu_mu,
            "sigma_mu": cfg.sigma_mu,
            "mu_sigma": cfg.mu_sigma,
            "sigma_sigma": cfg.sigma_sigma,
            "noise_std": cfg.noise_std,
            "oracle": {"eps0": cfg.oracle.eps0, "kappa1": cfg.oracle.kappa1, "kappa2": cfg.oracle.kappa2},
        }
    with open(meta_path, "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_dataset(csv_path, meta_path) -> Dataset:
    """Reload a dataset written by ``save_dataset``."""
    per_plate_amp = {}
    per_plate_eps = {}
    with open(csv_path, newline="") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            k = int(row["plate_index"])
            per_plate_amp.setdefault(k, []).append(float(row["amplitude_mm"]))
            per_plate_eps.setdefault(k, []).append(float(row["strain_microeps"]))
    labels = sorted(per_plate_amp)
    amplitudes = tuple(np.array(per_plate_amp[k]) for k in labels)
    strains = tuple(np.array(per_plate_eps[k]) for k in labels)
    with open(meta_path) as fh:
        meta = json.load(fh)
    gt = meta["ground_truth"]
    truth = GroundTruth(
        mu_mu=gt["mu_mu"],
        sigma_mu=gt["sigma_mu"],
        mu_sigma=gt["mu_sigma"],
        sigma_sigma=gt["sigma_sigma"],
        plate_means=tuple(gt["plate_means"]),
        plate_stds=tuple(gt["plate_stds"]),
        noise_std=gt["noise_std"],
    )
    return Dataset(amplitudes=amplitudes, strains=strains, ground_truth=truth)
