import numpy as np
import pytest

from platepool.distributions import rng_from_seed
from platepool.gpr import KernelConfig, gpr_fit
from platepool.model import build_hierarchical_spec, build_independent_specs
from platepool.synthetic import DatasetConfig, OracleConfig, generate_dataset, strain_oracle


def central_diff(f, x, i, h):
    """Central finite difference of scalar f along coordinate i."""
    xp = np.array(x, dtype=float)
    xm = np.array(x, dtype=float)
    xp[i] += h
    xm[i] -= h
    return (f(xp) - f(xm)) / (2.0 * h)


def rel_err(a, b, floor=1e-3):
    """|a-b| relative to the larger magnitude, floored for tiny values."""
    return abs(a - b) / max(abs(a), abs(b), floor)


def make_surrogates(seed=42, n_plates=6, n_train=30, optimize=True):
    """Grid-trained surrogates mirroring the pipeline's default recipe."""
    x = np.linspace(0.0, 12.0, n_train)
    oracle = OracleConfig()
    out = []
    for k in range(1, n_plates + 1):
        y = strain_oracle(x, oracle) + rng_from_seed(seed, 1, k, 0).normal(0.0, 5.0, len(x))
        out.append(gpr_fit(x, y, KernelConfig(1e4, 3.0, 25.0),
                           optimize_hypers=optimize, seed=k))
    return out


@pytest.fixture(scope="session")
def default_dataset():
    return generate_dataset(DatasetConfig(), seed=42)


@pytest.fixture(scope="session")
def surrogates(default_dataset):
    return make_surrogates()


@pytest.fixture(scope="session")
def hier_spec(default_dataset, surrogates):
    return build_hierarchical_spec(default_dataset, surrogates)


@pytest.fixture(scope="session")
def indep_specs(default_dataset, surrogates):
    return build_independent_specs(default_dataset, surrogates)


def tame_theta(spec, dataset, rng, scale=0.3):
    """Unconstrained point near the generative truth, jittered.

    Finite differences of the log posterior are numerically meaningful
    here (at arbitrary Uniform(-1,1) points the density is ~ -1e5 and
    FD roundoff swamps small gradient entries).
    """
    from platepool.model import untransform

    lay = spec.layout
    c = np.empty(spec.dim)
    c[0], c[1], c[2], c[3] = 5.0, 1.2, 0.5, 0.15
    if lay.n_plates:
        labels = [k - 1 for k in spec.plate_labels]
        c[lay.sl_mu_w] = np.asarray(dataset.ground_truth.plate_means)[labels]
        c[lay.sl_sigma_w] = np.asarray(dataset.ground_truth.plate_stds)[labels]
        c[lay.sl_w] = np.concatenate([dataset.amplitudes[i] for i in labels])
    c[lay.idx_gamma] = 5.0
    return untransform(lay, c) + rng.uniform(-scale, scale, spec.dim)
