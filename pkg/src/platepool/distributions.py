"""Normal and Gamma probability primitives.

Log-densities, analytic gradients, moment formulas and seeded samplers
used by every other module. All density/gradient functions are pure and
accept scalars or numpy arrays for the evaluation point; distribution
parameters are plain floats carried by small frozen dataclasses.

RNG policy: generators are built on the counter-based Philox bit
generator, keyed per task/chain via ``rng_from_seed``, so parallel
streams are independent and every draw sequence is reproducible.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import digamma, gammaln

LN_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class NormalParams:
    """Mean/standard-deviation pair of a Normal distribution."""

    mean: float
    std: float

    def __post_init__(self):
        if not (math.isfinite(self.mean) and math.isfinite(self.std)):
            raise ValueError(f"Normal parameters must be finite, got {self}")
        if self.std <= 0.0:
            raise ValueError(f"Normal std must be > 0, got {self.std}")


@dataclass(frozen=True)
class GammaParams:
    """Shape/rate pair of a Gamma distribution."""

    shape: float
    rate: float

    def __post_init__(self):
        if not (math.isfinite(self.shape) and math.isfinite(self.rate)):
            raise ValueError(f"Gamma parameters must be finite, got {self}")
        if self.shape <= 0.0 or self.rate <= 0.0:
            raise ValueError(f"Gamma shape and rate must be > 0, got {self}")


def _check_finite(x, name="x"):
    if not np.all(np.isfinite(x)):
        raise ValueError(f"{name} must be finite")


def normal_logpdf(x, p: NormalParams):
    """Log-density of Normal(mean, std^2) at ``x``.

    Parameters
    ----------
    x : float or ndarray
        Evaluation point(s); must be finite.
    p : NormalParams
        Distribution parameters.
    """
    x = np.asarray(x, dtype=float)
    _check_finite(x)
    z = (x - p.mean) / p.std
    out = -0.5 * LN_2PI - math.log(p.std) - 0.5 * z * z
    return float(out) if out.ndim == 0 else out


def normal_logpdf_grad(x, p: NormalParams):
    """Gradient of ``normal_logpdf`` as ``(d/dx, d/dmean, d/dstd)``."""
    x = np.asarray(x, dtype=float)
    _check_finite(x)
    z = (x - p.mean) / p.std
    d_x = -z / p.std
    d_mean = z / p.std
    d_std = (z * z - 1.0) / p.std
    if d_x.ndim == 0:
        return float(d_x), float(d_mean), float(d_std)
    return d_x, d_mean, d_std


def gamma_logpdf(x, p: GammaParams):
    """Log-density of Gamma(shape, rate) at ``x``.

    shape*ln(rate) - lnGamma(shape) + (shape-1)*ln(x) - rate*x

    Raises
    ------
    ValueError
        If any evaluation point is outside the support (x <= 0).
    """
    x = np.asarray(x, dtype=float)
    _check_finite(x)
    if np.any(x <= 0.0):
        raise ValueError("gamma_logpdf requires x > 0")
    out = (
        p.shape * math.log(p.rate)
        - gammaln(p.shape)
        + (p.shape - 1.0) * np.log(x)
        - p.rate * x
    )
    return float(out) if out.ndim == 0 else out


def gamma_logpdf_grad(x, p: GammaParams):
    """Gradient of ``gamma_logpdf`` as ``(d/dx, d/dshape, d/drate)``."""
    x = np.asarray(x, dtype=float)
    _check_finite(x)
    if np.any(x <= 0.0):
        raise ValueError("gamma_logpdf_grad requires x > 0")
    d_x = (p.shape - 1.0) / x - p.rate
    d_shape = math.log(p.rate) - digamma(p.shape) + np.log(x)
    d_rate = p.shape / p.rate - x
    if d_x.ndim == 0:
        return float(d_x), float(d_shape), float(d_rate)
    return d_x, d_shape, d_rate


def gamma_moments(p: GammaParams):
    """Mean and variance of Gamma(shape, rate): (shape/rate, shape/rate^2)."""
    return p.shape / p.rate, p.shape / p.rate**2


def gamma_params_from_moments(mean: float, variance: float) -> GammaParams:
    """Shape/rate of the Gamma with the given mean and variance."""
    if mean <= 0.0 or variance <= 0.0:
        raise ValueError("mean and variance must be > 0")
    return GammaParams(shape=mean * mean / variance, rate=mean / variance)


def sample_normal(p: NormalParams, rng: np.random.Generator, size=None):
    """Draw from Normal(mean, std^2) using the caller-owned generator."""
    return rng.normal(p.mean, p.std, size=size)


def sample_gamma(p: GammaParams, rng: np.random.Generator, size=None):
    """Draw from Gamma(shape, rate) using the caller-owned generator.

    numpy's gamma sampler is the Marsaglia-Tsang squeeze (with the
    shape < 1 boost), parameterized by scale = 1/rate.
    """
    return rng.gamma(p.shape, 1.0 / p.rate, size=size)


def rng_from_seed(seed: int, *stream: int) -> np.random.Generator:
    """Independent Philox generator for one (seed, stream...) task key.

    Distinct stream tuples under the same seed yield statistically
    independent, reproducible sequences; no generator state is shared.
    """
    key = np.random.SeedSequence([int(seed), *map(int, stream)]).generate_state(2, np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def derive_seed(seed: int, *stream: int) -> int:
    """Stable integer sub-seed for one (seed, stream...) task key."""
    return int(np.random.SeedSequence([int(seed), *map(int, stream)]).generate_state(1, np.uint64)[0])
