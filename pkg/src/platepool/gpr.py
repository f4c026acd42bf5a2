"""Gaussian process regression surrogate (squared-exponential kernel).

One-dimensional GPR following Rasmussen & Williams (2006, ch. 2 and 5):
Cholesky-based solves throughout (never a matrix inverse), log marginal
likelihood maximized in log-hyperparameter space with analytic
gradients and multiple restarts. The posterior mean has a closed-form
input derivative, which the sampler needs to differentiate the
likelihood through the surrogate.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import linalg, optimize

from .distributions import LN_2PI, rng_from_seed

# log-space search box: signal_var [1e-4, 1e8] microeps^2,
# lengthscale [1e-2, 1e3] mm, noise_var [1e-8, 1e6] microeps^2
_LOG_BOUNDS = [
    (math.log(1e-4), math.log(1e8)),
    (math.log(1e-2), math.log(1e3)),
    (math.log(1e-8), math.log(1e6)),
]
_MAX_JITTER_FACTOR = 1e-6


@dataclass(frozen=True)
class KernelConfig:
    """RBF kernel hyperparameters: amplitude, input scale, observation noise."""

    signal_var: float
    lengthscale: float
    noise_var: float

    def __post_init__(self):
        if not all(
            math.isfinite(v) and v > 0.0
            for v in (self.signal_var, self.lengthscale, self.noise_var)
        ):
            raise ValueError(f"kernel hyperparameters must be finite and > 0, got {self}")


@dataclass
class GprModel:
    """Fitted surrogate: training pairs, kernel, and precomputed solves.

    ``alpha`` solves (K + noise_var*I) alpha = y; ``chol`` is the lower
    Cholesky factor of (K + noise_var*I) (including any escalated
    jitter). Immutable by convention after fitting.
    """

    train_x: np.ndarray
    train_y: np.ndarray
    kernel: KernelConfig
    alpha: np.ndarray
    chol: np.ndarray
    log_marginal: float


def _kernel_matrix(x1, x2, kc: KernelConfig):
    d = x1[:, None] - x2[None, :]
    return kc.signal_var * np.exp(-(d * d) / (2.0 * kc.lengthscale**2))


def _factorize(x, y, kc: KernelConfig):
    """Cholesky of K + noise_var*I with jitter escalation; returns (chol, alpha, jitter)."""
    k = _kernel_matrix(x, x, kc)
    jitter = 0.0
    while True:
        try:
            chol = linalg.cholesky(k + (kc.noise_var + jitter) * np.eye(len(x)), lower=True)
            break
        except linalg.LinAlgError:
            jitter = 1e-12 * kc.signal_var if jitter == 0.0 else jitter * 10.0
            if jitter > _MAX_JITTER_FACTOR * kc.signal_var:
                raise linalg.LinAlgError(
                    "covariance matrix is not positive definite even with jitter "
                    f"{_MAX_JITTER_FACTOR:g}*signal_var; training inputs may contain "
                    "duplicates with a vanishing noise variance"
                )
    alpha = linalg.cho_solve((chol, True), y)
    return chol, alpha, jitter


def log_marginal_likelihood(x, y, kc: KernelConfig):
    """Log marginal likelihood ln p(y | x, kernel)."""
    chol, alpha, _ = _factorize(x, y, kc)
    return float(
        -0.5 * y @ alpha - np.sum(np.log(np.diag(chol))) - 0.5 * len(y) * LN_2PI
    )


def log_marginal_likelihood_grad(x, y, kc: KernelConfig):
    """LML and its gradient w.r.t. (log signal_var, log lengthscale, log noise_var).

    Uses dL/dtheta_j = 0.5 tr((alpha alpha^T - K_n^{-1}) dK_n/dtheta_j),
    with dK/dlog-parameter absorbed analytically for the RBF kernel.
    """
    chol, alpha, _ = _factorize(x, y, kc)
    n = len(x)
    lml = float(-0.5 * y @ alpha - np.sum(np.log(np.diag(chol))) - 0.5 * n * LN_2PI)
    k = _kernel_matrix(x, x, kc)
    kinv = linalg.cho_solve((chol, True), np.eye(n))
    inner = np.outer(alpha, alpha) - kinv
    d2 = (x[:, None] - x[None, :]) ** 2
    d_sig = 0.5 * np.sum(inner * k)
    d_len = 0.5 * np.sum(inner * (k * d2 / kc.lengthscale**2))
    d_noise = 0.5 * kc.noise_var * np.trace(inner)
    return lml, np.array([d_sig, d_len, d_noise])


def _fit_fixed(x, y, kc: KernelConfig) -> GprModel:
    chol, alpha, _ = _factorize(x, y, kc)
    lml = float(-0.5 * y @ alpha - np.sum(np.log(np.diag(chol))) - 0.5 * len(y) * LN_2PI)
    return GprModel(
        train_x=x, train_y=y, kernel=kc, alpha=alpha, chol=chol, log_marginal=lml
    )


def gpr_fit(x, y, init: KernelConfig, optimize_hypers: bool = True,
            n_restarts: int = 5, seed: int = 0) -> GprModel:
    """Fit a GPR surrogate to (amplitude, strain) pairs.

    Parameters
    ----------
    x, y : array_like
        Training inputs (mm) and targets (microstrain), >= 2 points.
    init : KernelConfig
        Starting kernel; used as-is when ``optimize_hypers`` is False.
    optimize_hypers : bool
        Maximize the log marginal likelihood over log-hyperparameters
        (L-BFGS-B, analytic gradients, ``n_restarts`` starts).
    seed : int
        Seeds the restart perturbations; fits are reproducible.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.ndim != 1 or x.shape != y.shape:
        raise ValueError("x and y must be 1-d arrays of equal length")
    if len(x) < 2:
        raise ValueError(f"need at least 2 training points, got {len(x)}")
    if not optimize_hypers:
        return _fit_fixed(x, y, init)

    def objective(z):
        kc = KernelConfig(math.exp(z[0]), math.exp(z[1]), math.exp(z[2]))
        lml, grad = log_marginal_likelihood_grad(x, y, kc)
        return -lml, -grad

    rng = rng_from_seed(seed, 101)
    span = max(np.ptp(x), 1e-3)
    var_y = max(float(np.var(y)), 1e-6)
    starts = [np.log([init.signal_var, init.lengthscale, init.noise_var])]
    for _ in range(max(0, n_restarts - 1)):
        base = np.log([var_y, span / 3.0, var_y / 50.0])
        starts.append(base + rng.normal(0.0, 1.0, size=3))

    best = None
    for z0 in starts:
        z0 = np.clip(z0, [lo for lo, _ in _LOG_BOUNDS], [hi for _, hi in _LOG_BOUNDS])
        try:
            res = optimize.minimize(
                objective, z0, jac=True, method="L-BFGS-B", bounds=_LOG_BOUNDS
            )
        except linalg.LinAlgError:
            continue
        if best is None or res.fun < best.fun:
            best = res
    if best is None:
        raise linalg.LinAlgError(
            "hyperparameter optimization failed from every start; "
            "check for duplicate inputs or degenerate targets"
        )
    kc = KernelConfig(*np.exp(best.x))
    return _fit_fixed(x, y, kc)


def gpr_predict(model: GprModel, x):
    """Posterior mean and variance at ``x`` (scalar or array).

    Variance is the latent-function variance
    k(x,x) - k(x,X)(K + noise_var I)^{-1} k(X,x); tiny negative values
    from roundoff are clamped to zero with a warning.
    """
    xq = np.atleast_1d(np.asarray(x, dtype=float))
    kvec = _kernel_matrix(xq, model.train_x, model.kernel)
    mean = kvec @ model.alpha
    v = linalg.solve_triangular(model.chol, kvec.T, lower=True)
    var = model.kernel.signal_var - np.sum(v * v, axis=0)
    if np.any(var < 0.0):
        warnings.warn(
            f"clamping negative predictive variance (min {var.min():.3e}) to 0",
            RuntimeWarning,
        )
        var = np.maximum(var, 0.0)
    if np.ndim(x) == 0:
        return float(mean[0]), float(var[0])
    return mean, var


def gpr_mean_grad(model: GprModel, x):
    """Analytic d(mean)/dx of the RBF posterior mean (microstrain/mm)."""
    xq = np.atleast_1d(np.asarray(x, dtype=float))
    kvec = _kernel_matrix(xq, model.train_x, model.kernel)
    d = model.train_x[None, :] - xq[:, None]
    grad = (kvec * d / model.kernel.lengthscale**2) @ model.alpha
    return float(grad[0]) if np.ndim(x) == 0 else grad


def coefficient_of_variation(model: GprModel, x, tiny: float = 1e-6):
    """sqrt(predictive var)/|mean| at ``x``; NaN when |mean| <= ``tiny``."""
    mean, var = gpr_predict(model, float(x))
    if abs(mean) <= tiny:
        return float("nan")
    return math.sqrt(var) / abs(mean)


def save_gpr(model: GprModel, path):
    """Persist training arrays and kernel hyperparameters as JSON."""
    payload = {
        "train_x": [float(v) for v in model.train_x],
        "train_y": [float(v) for v in model.train_y],
        "kernel": {
            "signal_var": model.kernel.signal_var,
            "lengthscale": model.kernel.lengthscale,
            "noise_var": model.kernel.noise_var,
        },
        "log_marginal": model.log_marginal,
    }
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_gpr(path) -> GprModel:
    """Reload a surrogate; factorizations are recomputed deterministically."""
    with open(path) as fh:
        payload = json.load(fh)
    kc = KernelConfig(**payload["kernel"])
    return _fit_fixed(np.array(payload["train_x"]), np.array(payload["train_y"]), kc)
