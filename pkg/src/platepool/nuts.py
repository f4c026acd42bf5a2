"""Self-contained No-U-Turn Sampler with warmup adaptation.

Multiplicative tree doubling with the U-turn stopping rule and
multinomial (weight-proportional) candidate selection along the
trajectory, dual-averaging step-size adaptation toward a target
acceptance statistic, and windowed diagonal mass-matrix estimation
during warmup (expanding windows over the middle of warmup; the final
metric comes from the last window, i.e. the second half of adaptation).

References: Hoffman & Gelman (2014) for the tree construction and dual
averaging (algorithms 4-6); Betancourt (2017) for the multinomial
variant; the Stan reference manual for the windowed adaptation layout.

Each chain owns its position, adaptation state and a counter-based RNG
stream; chains share only the immutable model spec. Results are
identical whether chains run serially or in a process pool, and are
merged by chain index.
"""

from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from functools import partial
from pathlib import Path

import numpy as np

from .distributions import rng_from_seed
from .model import constrain_array, log_posterior, untransform

MAX_ENERGY_ERROR = 1000.0  # divergence threshold on the Hamiltonian error
_DA_GAMMA = 0.05
_DA_T0 = 10.0
_DA_KAPPA = 0.75


@dataclass(frozen=True)
class SamplerConfig:
    """Sampler setup; defaults reproduce the reference inference setup."""

    n_warmup: int = 4000
    n_samples: int = 2000
    n_chains: int = 4
    target_accept: float = 0.8
    max_tree_depth: int = 10
    seed: int = 0

    def __post_init__(self):
        if min(self.n_warmup, self.n_samples, self.n_chains, self.max_tree_depth) <= 0:
            raise ValueError(f"sampler counts must be > 0, got {self}")
        if not (0.0 < self.target_accept < 1.0):
            raise ValueError(f"target_accept must be in (0,1), got {self.target_accept}")


@dataclass
class DrawStats:
    """Per-transition sampler statistics."""

    depth: int
    divergent: bool
    accept_stat: float
    energy: float
    n_leapfrog: int


@dataclass
class Chains:
    """Post-warmup draws for all chains plus per-draw sampler statistics.

    ``constrained``/``unconstrained`` have shape (n_chains, n_samples,
    dim); ``constrained`` is None for generic (unstructured) targets.
    """

    constrained: np.ndarray
    unconstrained: np.ndarray
    param_names: tuple
    divergent: np.ndarray
    tree_depth: np.ndarray
    step_size: np.ndarray
    energy: np.ndarray
    accept_stat: np.ndarray
    seed: int
    warmup_divergences: tuple

    @property
    def _draws(self) -> np.ndarray:
        return self.unconstrained if self.unconstrained is not None else self.constrained

    @property
    def n_chains(self) -> int:
        return self._draws.shape[0]

    @property
    def n_samples(self) -> int:
        return self._draws.shape[1]

    @property
    def dim(self) -> int:
        return self._draws.shape[2]

    def divergence_rate(self) -> float:
        return float(np.mean(self.divergent))

    def flat(self, constrained=True) -> np.ndarray:
        """All draws pooled across chains, shape (n_chains*n_samples, dim)."""
        x = self.constrained if constrained else self.unconstrained
        return x.reshape(-1, x.shape[2])

    def column(self, name: str, constrained=True) -> np.ndarray:
        """Pooled draws of one named parameter."""
        if name not in self.param_names:
            raise KeyError(f"no parameter named {name!r} in chains")
        return self.flat(constrained)[:, self.param_names.index(name)]

    def per_chain(self, name: str, constrained=True) -> np.ndarray:
        """(n_chains, n_samples) draws of one named parameter."""
        if name not in self.param_names:
            raise KeyError(f"no parameter named {name!r} in chains")
        x = self.constrained if constrained else self.unconstrained
        return x[:, :, self.param_names.index(name)]


def _kinetic(p, inv_mass):
    with np.errstate(over="ignore", invalid="ignore"):
        return 0.5 * float(np.dot(p * p, inv_mass))


def leapfrog(q, p, grad, step, inv_mass, logp_grad_fn):
    """One symplectic leapfrog step; returns (q', p', logp', grad').

    Momentum follows the gradient of the log-density; a non-finite
    position, log-density or gradient at the new point signals a
    divergence to the caller via logp' = -inf.
    """
    with np.errstate(over="ignore", invalid="ignore"):
        p_half = p + 0.5 * step * grad
        q_new = q + step * (inv_mass * p_half)
        if not np.all(np.isfinite(q_new)):
            return q_new, p_half, -np.inf, np.zeros_like(q)
        logp_new, grad_new = logp_grad_fn(q_new)
        if not (np.isfinite(logp_new) and np.all(np.isfinite(grad_new))):
            return q_new, p_half, -np.inf, np.zeros_like(grad_new)
        p_new = p_half + 0.5 * step * grad_new
    return q_new, p_new, logp_new, grad_new


def _uturn(q_minus, q_plus, p_minus, p_plus, inv_mass):
    dq = q_plus - q_minus
    return (np.dot(dq, inv_mass * p_minus) < 0.0) or (np.dot(dq, inv_mass * p_plus) < 0.0)


@dataclass
class _Tree:
    q_minus: np.ndarray
    p_minus: np.ndarray
    grad_minus: np.ndarray
    q_plus: np.ndarray
    p_plus: np.ndarray
    grad_plus: np.ndarray
    q_prop: np.ndarray
    logp_prop: float
    grad_prop: np.ndarray
    log_sum_w: float
    ok: bool
    divergent: bool


def _build_tree(fn, q, p, grad, direction, depth, step, inv_mass, h0, rng, acc):
    """Recursive doubling; ``acc`` accumulates (sum_alpha, n_alpha, n_leapfrog)."""
    if depth == 0:
        q2, p2, logp2, grad2 = leapfrog(q, p, grad, direction * step, inv_mass, fn)
        acc[2] += 1
        if math.isinf(logp2):
            acc[1] += 1
            return _Tree(q2, p2, grad2, q2, p2, grad2, q2, logp2, grad2, -np.inf, False, True)
        h2 = -logp2 + _kinetic(p2, inv_mass)
        log_w = h0 - h2
        acc[0] += math.exp(min(0.0, log_w))
        acc[1] += 1
        if h2 - h0 > MAX_ENERGY_ERROR:
            return _Tree(q2, p2, grad2, q2, p2, grad2, q2, logp2, grad2, -np.inf, False, True)
        return _Tree(q2, p2, grad2, q2, p2, grad2, q2, logp2, grad2, log_w, True, False)

    t1 = _build_tree(fn, q, p, grad, direction, depth - 1, step, inv_mass, h0, rng, acc)
    if not t1.ok:
        return t1
    if direction == 1:
        t2 = _build_tree(fn, t1.q_plus, t1.p_plus, t1.grad_plus, direction,
                         depth - 1, step, inv_mass, h0, rng, acc)
        q_minus, p_minus, grad_minus = t1.q_minus, t1.p_minus, t1.grad_minus
        q_plus, p_plus, grad_plus = t2.q_plus, t2.p_plus, t2.grad_plus
    else:
        t2 = _build_tree(fn, t1.q_minus, t1.p_minus, t1.grad_minus, direction,
                         depth - 1, step, inv_mass, h0, rng, acc)
        q_minus, p_minus, grad_minus = t2.q_minus, t2.p_minus, t2.grad_minus
        q_plus, p_plus, grad_plus = t1.q_plus, t1.p_plus, t1.grad_plus
    divergent = t1.divergent or t2.divergent
    if not t2.ok:
        return _Tree(q_minus, p_minus, grad_minus, q_plus, p_plus, grad_plus,
                     t1.q_prop, t1.logp_prop, t1.grad_prop, t1.log_sum_w,
                     False, divergent)
    log_sum_w = np.logaddexp(t1.log_sum_w, t2.log_sum_w)
    # multinomial selection between the two half-subtrees
    if math.log(rng.random()) < t2.log_sum_w - log_sum_w:
        q_prop, logp_prop, grad_prop = t2.q_prop, t2.logp_prop, t2.grad_prop
    else:
        q_prop, logp_prop, grad_prop = t1.q_prop, t1.logp_prop, t1.grad_prop
    ok = not _uturn(q_minus, q_plus, p_minus, p_plus, inv_mass)
    return _Tree(q_minus, p_minus, grad_minus, q_plus, p_plus, grad_plus,
                 q_prop, logp_prop, grad_prop, log_sum_w, ok, divergent)


def _nuts_transition(fn, q, logp, grad, step, mass_sqrt, inv_mass, rng, max_depth):
    p0 = rng.standard_normal(q.shape[0]) * mass_sqrt
    h0 = -logp + _kinetic(p0, inv_mass)
    q_minus = q_plus = q
    p_minus = p_plus = p0
    grad_minus = grad_plus = grad
    q_cur, logp_cur, grad_cur = q, logp, grad
    log_sum_w = 0.0
    acc = [0.0, 0, 0]  # sum_alpha, n_alpha, n_leapfrog
    depth = 0
    divergent = False
    while depth < max_depth:
        direction = 1 if rng.integers(0, 2) == 1 else -1
        if direction == 1:
            tree = _build_tree(fn, q_plus, p_plus, grad_plus, 1, depth, step,
                               inv_mass, h0, rng, acc)
            q_plus, p_plus, grad_plus = tree.q_plus, tree.p_plus, tree.grad_plus
        else:
            tree = _build_tree(fn, q_minus, p_minus, grad_minus, -1, depth, step,
                               inv_mass, h0, rng, acc)
            q_minus, p_minus, grad_minus = tree.q_minus, tree.p_minus, tree.grad_minus
        divergent = divergent or tree.divergent
        if not tree.ok:
            break
        # biased progressive sampling toward the fresh subtree
        if tree.log_sum_w > log_sum_w or math.log(rng.random()) < tree.log_sum_w - log_sum_w:
            q_cur, logp_cur, grad_cur = tree.q_prop, tree.logp_prop, tree.grad_prop
        log_sum_w = np.logaddexp(log_sum_w, tree.log_sum_w)
        depth += 1
        if _uturn(q_minus, q_plus, p_minus, p_plus, inv_mass):
            break
    accept_stat = acc[0] / max(acc[1], 1)
    stats = DrawStats(depth=depth, divergent=divergent, accept_stat=accept_stat,
                      energy=h0, n_leapfrog=acc[2])
    return q_cur, logp_cur, grad_cur, stats


def nuts_draw(state, logp_grad_fn, step, mass_diag, rng, max_depth=10):
    """One NUTS transition from ``state`` = (q, logp, grad).

    Returns the next state tuple and its :class:`DrawStats`. Intended
    for direct use on small test targets; ``run_chains`` drives the full
    warmup/sampling schedule.
    """
    q, logp, grad = state
    mass_diag = np.asarray(mass_diag, dtype=float)
    q2, logp2, grad2, stats = _nuts_transition(
        logp_grad_fn, np.asarray(q, dtype=float), logp, grad,
        step, np.sqrt(mass_diag), 1.0 / mass_diag, rng, max_depth
    )
    return (q2, logp2, grad2), stats


class _DualAveraging:
    """Nesterov dual averaging of log step size (Hoffman & Gelman alg. 5)."""

    def __init__(self, step0, target):
        self.mu = math.log(10.0 * step0)
        self.log_step = math.log(step0)
        self.log_step_bar = 0.0
        self.h_bar = 0.0
        self.t = 0
        self.target = target

    def update(self, accept_stat):
        self.t += 1
        eta = 1.0 / (self.t + _DA_T0)
        self.h_bar = (1.0 - eta) * self.h_bar + eta * (self.target - accept_stat)
        self.log_step = self.mu - math.sqrt(self.t) / _DA_GAMMA * self.h_bar
        w = self.t ** (-_DA_KAPPA)
        self.log_step_bar = w * self.log_step + (1.0 - w) * self.log_step_bar

    @property
    def step(self):
        return math.exp(self.log_step)

    @property
    def adapted_step(self):
        return math.exp(self.log_step_bar)


def _find_reasonable_step(fn, q, logp, grad, mass_sqrt, inv_mass, rng):
    """Doubling heuristic for the initial step size (alg. 4)."""
    step = 1.0
    p0 = rng.standard_normal(q.shape[0]) * mass_sqrt
    h0 = -logp + _kinetic(p0, inv_mass)

    def log_ratio(eps):
        _, p1, logp1, _ = leapfrog(q, p0, grad, eps, inv_mass, fn)
        if math.isinf(logp1):
            return -np.inf
        return h0 - (-logp1 + _kinetic(p1, inv_mass))

    r = log_ratio(step)
    while math.isinf(r):
        step *= 0.5
        if step < 1e-10:
            raise RuntimeError("could not find a finite-energy step size at the initial state")
        r = log_ratio(step)
    direction = 1.0 if r > math.log(0.5) else -1.0
    for _ in range(100):
        step_try = step * 2.0**direction
        r = log_ratio(step_try)
        if direction > 0 and not r > math.log(0.5):
            break
        if direction < 0 and not r < math.log(0.5):
            break
        step = step_try
        if step < 1e-10 or step > 1e4:
            break
    return step


def _mass_windows(n_warmup, init_buffer=75, term_buffer=None, base_window=25):
    """Expanding (doubling) adaptation windows over the middle of warmup.

    The terminal buffer (no mass updates, step-size adaptation only) is
    sized at 30% of warmup so the restarted dual averaging after the
    final metric update has room to settle back onto the target
    acceptance; short buffers leave the averaged step biased low.
    """
    if n_warmup < 20:
        return []
    if term_buffer is None:
        term_buffer = max(50, (3 * n_warmup) // 10)
    if n_warmup < init_buffer + term_buffer + base_window:
        init_buffer = max(1, int(0.15 * n_warmup))
        term_buffer = max(1, int(0.30 * n_warmup))
        base_window = max(1, n_warmup - init_buffer - term_buffer)
    windows = []
    start = init_buffer
    end_middle = n_warmup - term_buffer
    size = base_window
    while start + size < end_middle:
        windows.append((start, start + size))
        start += size
        size *= 2
    if start < end_middle:
        windows.append((start, end_middle))
    return windows


def _regularized_var(draws):
    n = draws.shape[0]
    var = np.var(draws, axis=0, ddof=1) if n > 1 else np.ones(draws.shape[1])
    return (n / (n + 5.0)) * var + 5e-3 * (5.0 / (n + 5.0))


def _run_single_chain(logp_grad_fn, dim, cfg: SamplerConfig, chain_idx: int):
    rng = rng_from_seed(cfg.seed, 7, chain_idx)
    q = rng.uniform(-1.0, 1.0, size=dim)
    logp, grad = logp_grad_fn(q)
    for _ in range(100):
        if np.isfinite(logp):
            break
        q = rng.uniform(-1.0, 1.0, size=dim)
        logp, grad = logp_grad_fn(q)
    else:
        raise RuntimeError("no finite-density initial state found in 100 tries")

    inv_mass = np.ones(dim)
    mass_sqrt = np.ones(dim)
    step = _find_reasonable_step(logp_grad_fn, q, logp, grad, mass_sqrt, inv_mass, rng)
    da = _DualAveraging(step, cfg.target_accept)
    windows = _mass_windows(cfg.n_warmup)
    window_idx = 0
    window_draws = []
    n_div_warmup = 0
    early_check = min(200, cfg.n_warmup)
    early_div = 0

    for m in range(cfg.n_warmup):
        q, logp, grad, stats = _nuts_transition(
            logp_grad_fn, q, logp, grad, da.step, mass_sqrt, inv_mass, rng,
            cfg.max_tree_depth,
        )
        da.update(stats.accept_stat)
        if stats.divergent:
            n_div_warmup += 1
            if m < early_check:
                early_div += 1
        if m + 1 == early_check and early_div == early_check:
            raise RuntimeError(
                f"chain {chain_idx}: every one of the first {early_check} warmup "
                "transitions diverged; the model or its scales are likely misconfigured"
            )
        if window_idx < len(windows):
            lo, hi = windows[window_idx]
            if lo <= m < hi:
                window_draws.append(q.copy())
            if m == hi - 1:
                inv_mass = _regularized_var(np.asarray(window_draws))
                mass_sqrt = 1.0 / np.sqrt(inv_mass)
                window_draws = []
                window_idx += 1
                step = _find_reasonable_step(logp_grad_fn, q, logp, grad, mass_sqrt, inv_mass, rng)
                da = _DualAveraging(step, cfg.target_accept)

    if cfg.n_warmup > 0 and n_div_warmup == cfg.n_warmup:
        raise RuntimeError(
            f"chain {chain_idx}: all {cfg.n_warmup} warmup transitions diverged"
        )

    step_final = da.adapted_step if cfg.n_warmup > 0 else da.step
    draws = np.empty((cfg.n_samples, dim))
    divergent = np.zeros(cfg.n_samples, dtype=bool)
    depth = np.zeros(cfg.n_samples, dtype=np.int64)
    energy = np.empty(cfg.n_samples)
    accept = np.empty(cfg.n_samples)
    for s in range(cfg.n_samples):
        q, logp, grad, stats = _nuts_transition(
            logp_grad_fn, q, logp, grad, step_final, mass_sqrt, inv_mass, rng,
            cfg.max_tree_depth,
        )
        draws[s] = q
        divergent[s] = stats.divergent
        depth[s] = stats.depth
        energy[s] = stats.energy
        accept[s] = stats.accept_stat
    return draws, divergent, depth, energy, accept, step_final, n_div_warmup


def _spec_logp_grad(theta, spec):
    res = log_posterior(theta, spec)
    return res.logp, res.grad


def _chain_task(args):
    fn, dim, cfg, chain_idx = args
    return _run_single_chain(fn, dim, cfg, chain_idx)


def run_chains_generic(logp_grad_fn, dim, cfg: SamplerConfig, param_names=None,
                       n_jobs: int = 1) -> Chains:
    """Run NUTS chains on a raw (logp, grad) target.

    ``logp_grad_fn`` must be picklable when ``n_jobs > 1``. Draw arrays
    are identical for any ``n_jobs``; chains merge by index.
    """
    tasks = [(logp_grad_fn, dim, cfg, c) for c in range(cfg.n_chains)]
    if n_jobs > 1 and cfg.n_chains > 1:
        with ProcessPoolExecutor(max_workers=min(n_jobs, cfg.n_chains)) as pool:
            results = list(pool.map(_chain_task, tasks))
    else:
        results = [_chain_task(t) for t in tasks]
    draws = np.stack([r[0] for r in results])
    names = tuple(param_names) if param_names else tuple(f"p{i}" for i in range(dim))
    return Chains(
        constrained=None,
        unconstrained=draws,
        param_names=names,
        divergent=np.stack([r[1] for r in results]),
        tree_depth=np.stack([r[2] for r in results]),
        step_size=np.repeat([[r[5]] for r in results], cfg.n_samples, axis=1),
        energy=np.stack([r[3] for r in results]),
        accept_stat=np.stack([r[4] for r in results]),
        seed=cfg.seed,
        warmup_divergences=tuple(r[6] for r in results),
    )


def run_chains(spec, cfg: SamplerConfig, n_jobs: int = 1) -> Chains:
    """Sample a :class:`~platepool.model.ModelSpec` posterior.

    Warmup draws are discarded; kept draws are emitted in constrained
    space (with the unconstrained copies retained).
    """
    fn = partial(_spec_logp_grad, spec=spec)
    chains = run_chains_generic(fn, spec.dim, cfg, param_names=spec.layout.names,
                                n_jobs=n_jobs)
    chains.constrained = constrain_array(spec.layout, chains.unconstrained)
    return chains


def save_chains(chains: Chains, out_dir):
    """Persist constrained draws as one CSV per chain plus a stats sidecar.

    CSV columns are the manifest parameter names, one row per draw,
    written with full round-trip precision.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    values = chains.constrained if chains.constrained is not None else chains.unconstrained
    for c in range(chains.n_chains):
        with open(out_dir / f"chain_{c}.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(chains.param_names)
            for row in values[c]:
                writer.writerow([repr(float(v)) for v in row])
    stats = {
        "seed": chains.seed,
        "n_chains": chains.n_chains,
        "n_samples": chains.n_samples,
        "warmup_divergences": list(chains.warmup_divergences),
        "chains": [
            {
                "divergent": chains.divergent[c].astype(int).tolist(),
                "tree_depth": chains.tree_depth[c].tolist(),
                "step_size": [float(v) for v in chains.step_size[c]],
                "energy": [float(v) for v in chains.energy[c]],
                "accept_stat": [float(v) for v in chains.accept_stat[c]],
            }
            for c in range(chains.n_chains)
        ],
    }
    with open(out_dir / "stats.json", "w") as fh:
        json.dump(stats, fh, sort_keys=True)
        fh.write("\n")


def load_chains(out_dir, layout=None) -> Chains:
    """Reload chains written by ``save_chains``.

    Draws load as constrained values; unconstrained copies are
    recomputed when the parameter ``layout`` is supplied.
    """
    out_dir = Path(out_dir)
    with open(out_dir / "stats.json") as fh:
        stats = json.load(fh)
    values = []
    names = None
    for c in range(stats["n_chains"]):
        path = out_dir / f"chain_{c}.csv"
        with open(path, newline="") as fh:
            header = next(csv.reader(fh))  # names may contain commas, e.g. w[1,1]
        if names is None:
            names = tuple(header)
        values.append(np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2))
    constrained = np.stack(values)
    unconstrained = None
    if layout is not None:
        unconstrained = np.stack(
            [np.stack([untransform(layout, row) for row in chain]) for chain in constrained]
        )
    return Chains(
        constrained=constrained,
        unconstrained=unconstrained,
        param_names=names,
        divergent=np.array([c["divergent"] for c in stats["chains"]], dtype=bool),
        tree_depth=np.array([c["tree_depth"] for c in stats["chains"]], dtype=np.int64),
        step_size=np.array([c["step_size"] for c in stats["chains"]]),
        energy=np.array([c["energy"] for c in stats["chains"]]),
        accept_stat=np.array([c["accept_stat"] for c in stats["chains"]]),
        seed=stats["seed"],
        warmup_divergences=tuple(stats["warmup_divergences"]),
    )
