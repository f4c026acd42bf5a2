"""Bayesian models for plate deflection amplitudes from strain data.

Two model kinds share one implementation:

* ``hierarchical`` (partial pooling): all plates jointly, plate-level
  amplitude statistics tied together by shared higher-level parameters
  and a single noise scale ``gamma``.
* ``independent`` (no pooling): one spec per plate; the full DAG is
  retained (higher-level nodes included) but informed by that plate's
  observations only, with the noise scale indexed per plate.

Generative structure (all scales positive, amplitudes non-negative):

    mu_mu, sigma_mu, mu_sigma, sigma_sigma ~ Gamma hyperpriors
    mu_w[k]    ~ Normal(mu_mu, sigma_mu^2)     truncated at 0
    sigma_w[k] ~ Normal(mu_sigma, sigma_sigma^2) truncated at 0
    w[k,i]     ~ Normal(mu_w[k], sigma_w[k]^2) truncated at 0
    gamma      ~ Gamma noise prior
    strain[k,i] ~ Normal(surrogate_mean_k(w[k,i]), gamma^2)

The truncation normalizers ln Phi(mean/std) depend on sampled
parameters and are included in the joint density.

Unconstrained parameterization (one flat vector; see ``ParamLayout``):

    [log mu_mu, log sigma_mu, log mu_sigma, log sigma_sigma,
     mu_w[k] raw (softplus), log sigma_w[k], w[k,i] raw (softplus),
     log gamma]

giving dimension 4 + P + P + sum(N_k) + 1. The likelihood uses only
the surrogate posterior mean; its analytic input-gradient propagates
through the chain rule so the log-posterior gradient is exact.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import gammaln, log_ndtr

from .distributions import LN_2PI, GammaParams

HIERARCHICAL = "hierarchical"
INDEPENDENT = "independent"


@dataclass(frozen=True)
class Hyperpriors:
    """Gamma hyperpriors for the shared parameters and the noise scale."""

    mu_mu: GammaParams = GammaParams(3.0, 0.2)
    sigma_mu: GammaParams = GammaParams(0.8, 0.35)
    mu_sigma: GammaParams = GammaParams(3.6, 6.0)
    sigma_sigma: GammaParams = GammaParams(4.8, 16.0)
    noise: GammaParams = GammaParams(80.0, 16.0)


@dataclass(frozen=True)
class ParamLayout:
    """Names, transforms and block indices of the flat parameter vector."""

    names: tuple
    units: tuple
    softplus_mask: np.ndarray  # True -> softplus, False -> exp
    n_plates: int
    obs_counts: tuple

    @property
    def dim(self) -> int:
        return len(self.names)

    @property
    def sl_hyper(self):
        return slice(0, 4)

    @property
    def sl_mu_w(self):
        return slice(4, 4 + self.n_plates)

    @property
    def sl_sigma_w(self):
        return slice(4 + self.n_plates, 4 + 2 * self.n_plates)

    @property
    def sl_w(self):
        return slice(4 + 2 * self.n_plates, self.dim - 1)

    @property
    def idx_gamma(self) -> int:
        return self.dim - 1

    def manifest(self):
        """Self-describing column list: name, index, transform, unit."""
        return [
            {
                "name": self.names[i],
                "index": i,
                "transform": "softplus" if self.softplus_mask[i] else "exp",
                "unit": self.units[i],
            }
            for i in range(self.dim)
        ]


@dataclass
class ModelSpec:
    """One inference task: data view (strains only), surrogates, priors.

    Immutable after construction; ``log_posterior`` is pure and
    reentrant, so any number of chains may evaluate it concurrently.
    """

    kind: str
    plate_labels: tuple
    strains: tuple
    surrogates: tuple
    hyperpriors: Hyperpriors
    layout: ParamLayout
    # caches for the vectorized likelihood (per observation)
    _obs_strain: np.ndarray = field(repr=False, default=None)
    _obs_plate: np.ndarray = field(repr=False, default=None)
    _train_stack: np.ndarray = field(repr=False, default=None)
    _alpha_stack: np.ndarray = field(repr=False, default=None)
    _sv_obs: np.ndarray = field(repr=False, default=None)
    _inv2ls2_obs: np.ndarray = field(repr=False, default=None)

    @property
    def dim(self) -> int:
        return self.layout.dim


def _build_layout(kind, plate_labels, obs_counts):
    names = ["mu_mu", "sigma_mu", "mu_sigma", "sigma_sigma"]
    units = ["mm", "mm", "mm", "mm"]
    softplus = [False, False, False, False]
    for k in plate_labels:
        names.append(f"mu_w[{k}]")
        units.append("mm")
        softplus.append(True)
    for k in plate_labels:
        names.append(f"sigma_w[{k}]")
        units.append("mm")
        softplus.append(False)
    for k, n_k in zip(plate_labels, obs_counts):
        for i in range(1, n_k + 1):
            names.append(f"w[{k},{i}]")
            units.append("mm")
            softplus.append(True)
    names.append("gamma" if kind == HIERARCHICAL else f"gamma[{plate_labels[0]}]")
    units.append("microeps")
    softplus.append(False)
    return ParamLayout(
        names=tuple(names),
        units=tuple(units),
        softplus_mask=np.array(softplus),
        n_plates=len(plate_labels),
        obs_counts=tuple(obs_counts),
    )


def make_spec(kind, plate_labels, strains, surrogates,
              hyperpriors: Hyperpriors = None) -> ModelSpec:
    """Assemble a ModelSpec and precompute the per-observation caches."""
    if kind not in (HIERARCHICAL, INDEPENDENT):
        raise ValueError(f"unknown model kind {kind!r}")
    if kind == INDEPENDENT and len(plate_labels) != 1:
        raise ValueError("independent specs hold exactly one plate")
    strains = tuple(np.asarray(s, dtype=float) for s in strains)
    surrogates = tuple(surrogates)
    if len(strains) != len(plate_labels) or len(surrogates) != len(plate_labels):
        raise ValueError("plate_labels, strains and surrogates must align")
    hyperpriors = hyperpriors or Hyperpriors()
    obs_counts = tuple(len(s) for s in strains)
    layout = _build_layout(kind, plate_labels, obs_counts)
    n_obs = sum(obs_counts)
    obs_strain = np.concatenate(strains) if n_obs else np.empty(0)
    obs_plate = np.repeat(np.arange(len(plate_labels)), obs_counts) if n_obs else np.empty(0, dtype=int)
    if n_obs:
        t_max = max(len(m.train_x) for m in surrogates)
        train_pad = np.zeros((len(plate_labels), t_max))
        alpha_pad = np.zeros((len(plate_labels), t_max))
        for j, m in enumerate(surrogates):
            t = len(m.train_x)
            train_pad[j, :t] = m.train_x
            train_pad[j, t:] = m.train_x[0]  # padded entries carry zero alpha
            alpha_pad[j, :t] = m.alpha
        sv = np.array([m.kernel.signal_var for m in surrogates])
        inv2ls2 = np.array([1.0 / (2.0 * m.kernel.lengthscale**2) for m in surrogates])
        train_stack = train_pad[obs_plate]
        alpha_stack = alpha_pad[obs_plate]
        sv_obs = sv[obs_plate][:, None]
        inv2ls2_obs = inv2ls2[obs_plate][:, None]
    else:
        train_stack = alpha_stack = np.empty((0, 0))
        sv_obs = inv2ls2_obs = np.empty((0, 1))
    return ModelSpec(
        kind=kind,
        plate_labels=tuple(plate_labels),
        strains=strains,
        surrogates=surrogates,
        hyperpriors=hyperpriors,
        layout=layout,
        _obs_strain=obs_strain,
        _obs_plate=obs_plate,
        _train_stack=train_stack,
        _alpha_stack=alpha_stack,
        _sv_obs=sv_obs,
        _inv2ls2_obs=inv2ls2_obs,
    )


def build_hierarchical_spec(dataset, surrogates, hyperpriors=None) -> ModelSpec:
    """Partial-pooling spec over all plates of ``dataset`` (strains only)."""
    strains = getattr(dataset, "strains", dataset)
    labels = tuple(range(1, len(strains) + 1))
    return make_spec(HIERARCHICAL, labels, strains, surrogates, hyperpriors)


def build_independent_specs(dataset, surrogates, hyperpriors=None):
    """One no-pooling spec per plate, identical hyperprior constants."""
    strains = getattr(dataset, "strains", dataset)
    specs = []
    for j in range(len(strains)):
        specs.append(
            make_spec(INDEPENDENT, (j + 1,), (strains[j],), (surrogates[j],), hyperpriors)
        )
    return specs


@dataclass
class LogDensityResult:
    logp: float
    grad: np.ndarray


# stable softplus / sigmoid pieces

def _softplus(x):
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _log_sigmoid(x):
    return np.minimum(x, 0.0) - np.log1p(np.exp(-np.abs(x)))


def _inv_softplus(c):
    c = np.asarray(c, dtype=float)
    out = np.where(c > 30.0, c, np.log(np.expm1(np.maximum(c, 1e-300))))
    return out


def transform(layout: ParamLayout, unconstrained):
    """Map unconstrained vector to constrained values plus log|Jacobian|.

    Positive scales use exp (log-Jacobian: the coordinate itself);
    non-negative amplitudes use softplus (log-Jacobian: log sigmoid).
    """
    u = np.asarray(unconstrained, dtype=float)
    if u.shape != (layout.dim,):
        raise ValueError(f"expected vector of dim {layout.dim}, got shape {u.shape}")
    if not np.all(np.isfinite(u)):
        raise ValueError("unconstrained parameters must be finite")
    sp = layout.softplus_mask
    c = np.empty_like(u)
    c[sp] = _softplus(u[sp])
    c[~sp] = np.exp(u[~sp])
    log_jac = float(np.sum(u[~sp]) + np.sum(_log_sigmoid(u[sp])))
    return c, log_jac


def untransform(layout: ParamLayout, constrained):
    """Inverse of ``transform`` (drops the Jacobian)."""
    c = np.asarray(constrained, dtype=float)
    sp = layout.softplus_mask
    u = np.empty_like(c)
    u[sp] = _inv_softplus(c[sp])
    u[~sp] = np.log(c[~sp])
    return u


def constrain_array(layout: ParamLayout, unconstrained):
    """Vectorized unconstrained -> constrained map over leading axes."""
    u = np.asarray(unconstrained, dtype=float)
    sp = layout.softplus_mask
    return np.where(sp, _softplus(u), np.exp(np.where(sp, 0.0, u)))


def initial_unconstrained(layout: ParamLayout, rng) -> np.ndarray:
    """Random initial state: Uniform(-1, 1) per unconstrained coordinate."""
    return rng.uniform(-1.0, 1.0, size=layout.dim)


def _gamma_logpdf_terms(x, p: GammaParams):
    # density and d/dx, shape/rate fixed; x > 0 guaranteed by the transform
    logp = p.shape * np.log(p.rate) - gammaln(p.shape) + (p.shape - 1.0) * np.log(x) - p.rate * x
    dx = (p.shape - 1.0) / x - p.rate
    return logp, dx


def log_posterior(theta, spec: ModelSpec) -> LogDensityResult:
    """Joint log-posterior density and gradient in unconstrained space.

    Returns logp = likelihood + truncated amplitude priors + plate
    parameter priors + hyperpriors + noise prior + log|Jacobian|, with
    the exact gradient via the chain rule (including the surrogate mean
    derivative). Numerical failure (overflow/NaN) yields a flagged
    divergence result: logp = -inf with a zeroed gradient.

    Raises
    ------
    ValueError
        If ``theta`` contains non-finite entries or has the wrong shape.
    """
    lay = spec.layout
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (lay.dim,):
        raise ValueError(f"theta has shape {theta.shape}, expected ({lay.dim},)")
    if not np.all(np.isfinite(theta)):
        raise ValueError("theta must be finite")

    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        c, log_jac = transform(lay, theta)
        if not np.all(np.isfinite(c)):
            return LogDensityResult(-np.inf, np.zeros(lay.dim))

        hp = spec.hyperpriors
        p = lay.n_plates
        mu_mu, sig_mu, mu_sig, sig_sig = c[0], c[1], c[2], c[3]
        mu_w = c[lay.sl_mu_w]
        sigma_w = c[lay.sl_sigma_w]
        w = c[lay.sl_w]
        gamma = c[lay.idx_gamma]

        grad_c = np.zeros(lay.dim)
        logp = log_jac

        # hyperpriors and noise prior (Gamma on the positive values)
        for idx, (val, prior) in enumerate(
            [(mu_mu, hp.mu_mu), (sig_mu, hp.sigma_mu), (mu_sig, hp.mu_sigma), (sig_sig, hp.sigma_sigma)]
        ):
            lp, dx = _gamma_logpdf_terms(val, prior)
            logp += lp
            grad_c[idx] += dx
        lp, dx = _gamma_logpdf_terms(gamma, hp.noise)
        logp += lp
        grad_c[lay.idx_gamma] += dx

        # plate-level truncated-Normal priors (means and scales)
        if p:
            # mu_w[k] ~ N(mu_mu, sigma_mu^2) truncated at 0
            r1 = mu_mu / sig_mu
            q1 = np.exp(-0.5 * LN_2PI - 0.5 * r1 * r1 - log_ndtr(r1))  # phi/Phi
            z1 = (mu_w - mu_mu) / sig_mu
            logp += float(np.sum(-0.5 * LN_2PI - np.log(sig_mu) - 0.5 * z1 * z1)) - p * float(log_ndtr(r1))
            grad_c[lay.sl_mu_w] += -z1 / sig_mu
            grad_c[0] += float(np.sum(z1)) / sig_mu - p * q1 / sig_mu
            grad_c[1] += float(np.sum(z1 * z1 - 1.0)) / sig_mu + p * q1 * mu_mu / sig_mu**2

            # sigma_w[k] ~ N(mu_sigma, sigma_sigma^2) truncated at 0
            r2 = mu_sig / sig_sig
            q2 = np.exp(-0.5 * LN_2PI - 0.5 * r2 * r2 - log_ndtr(r2))
            z2 = (sigma_w - mu_sig) / sig_sig
            logp += float(np.sum(-0.5 * LN_2PI - np.log(sig_sig) - 0.5 * z2 * z2)) - p * float(log_ndtr(r2))
            grad_c[lay.sl_sigma_w] += -z2 / sig_sig
            grad_c[2] += float(np.sum(z2)) / sig_sig - p * q2 / sig_sig
            grad_c[3] += float(np.sum(z2 * z2 - 1.0)) / sig_sig + p * q2 * mu_sig / sig_sig**2

        # amplitude priors w[k,i] ~ N(mu_w[k], sigma_w[k]^2) truncated at 0
        n_obs = len(w)
        if n_obs:
            counts = np.asarray(lay.obs_counts, dtype=float)
            mu_o = mu_w[spec._obs_plate]
            s_o = sigma_w[spec._obs_plate]
            r3 = mu_w / sigma_w  # per plate
            q3 = np.exp(-0.5 * LN_2PI - 0.5 * r3 * r3 - log_ndtr(r3))
            z3 = (w - mu_o) / s_o
            logp += float(np.sum(-0.5 * LN_2PI - np.log(s_o) - 0.5 * z3 * z3))
            logp -= float(np.sum(counts * log_ndtr(r3)))
            grad_c[lay.sl_w] += -z3 / s_o
            grad_c[lay.sl_mu_w] += (
                np.bincount(spec._obs_plate, weights=z3 / s_o, minlength=p)
                - counts * q3 / sigma_w
            )
            grad_c[lay.sl_sigma_w] += (
                np.bincount(spec._obs_plate, weights=(z3 * z3 - 1.0) / s_o, minlength=p)
                + counts * q3 * mu_w / sigma_w**2
            )

            # likelihood through the surrogate mean, shared/indexed noise gamma
            diff = w[:, None] - spec._train_stack
            ka = spec._sv_obs * np.exp(-diff * diff * spec._inv2ls2_obs) * spec._alpha_stack
            m = ka.sum(axis=1)
            dm = -(ka * diff).sum(axis=1) * (2.0 * spec._inv2ls2_obs[:, 0])
            resid = spec._obs_strain - m
            z4 = resid / gamma
            logp += float(np.sum(-0.5 * LN_2PI - np.log(gamma) - 0.5 * z4 * z4))
            grad_c[lay.sl_w] += resid / gamma**2 * dm
            grad_c[lay.idx_gamma] += float(np.sum(z4 * z4 - 1.0)) / gamma

        # chain rule back to unconstrained coordinates
        sp = lay.softplus_mask
        grad = np.empty(lay.dim)
        sig = _sigmoid(theta[sp])
        grad[sp] = grad_c[sp] * sig + (1.0 - sig)
        grad[~sp] = grad_c[~sp] * c[~sp] + 1.0

    if not (np.isfinite(logp) and np.all(np.isfinite(grad))):
        return LogDensityResult(-np.inf, np.zeros(lay.dim))
    return LogDensityResult(float(logp), grad)
