"""Stage execution: generate -> surrogates -> infer -> detect -> report.

Every stage is a pure function of (config, output directory): it reads
only artifacts written by earlier stages plus the config, and writes
plain CSV/JSON (plus rendered figures in the report stage). A manifest
accumulates config hash, seeds, library versions, per-stage wall time
and gate outcomes; one seed makes the whole pipeline bit-reproducible
on one machine.
"""

from __future__ import annotations

import json
import math
import platform
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .config import PipelineConfig, SURROGATE_SOURCE_DATASET, config_hash, save_config
from .detection import (DetectionReport, NO_POOLING, PARTIAL_POOLING,
                        compare_pooling, draw_predictive, gamma_column,
                        threshold_strains, write_report)
from .diagnostics import Summary, summarize, write_summary
from .distributions import derive_seed, gamma_logpdf, gamma_moments, rng_from_seed
from .gpr import coefficient_of_variation, gpr_fit, load_gpr, save_gpr
from .model import HIERARCHICAL, build_hierarchical_spec, build_independent_specs
from .nuts import load_chains, run_chains, save_chains
from .synthetic import generate_dataset, load_dataset, save_dataset, strain_oracle

HIER_DIR = "hier"


def _p(out_dir) -> Path:
    p = Path(out_dir)
    p.mkdir(parents=True, exist_ok=True)
    return p


def indep_dir(plate: int) -> str:
    return f"indep_plate_{plate}"


def _require(path: Path, hint: str) -> Path:
    if not path.exists():
        raise FileNotFoundError(f"missing artifact {path}; run `platepool {hint}` first")
    return path


def _update_manifest(out_dir, stage: str, seconds: float, cfg: PipelineConfig, extra=None):
    out = _p(out_dir)
    path = out / "manifest.json"
    manifest = json.loads(path.read_text()) if path.exists() else {}
    manifest.setdefault("stages", {})
    manifest["config_hash"] = config_hash(cfg)
    manifest["seed"] = cfg.seed
    from importlib.metadata import version as _pkg_version

    manifest["versions"] = {
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": _pkg_version("scipy"),
        "matplotlib": _pkg_version("matplotlib"),
        "platepool": __version__,
    }
    entry = {"wall_time_s": round(seconds, 3)}
    if extra:
        entry.update(extra)
    manifest["stages"][stage] = entry
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def stage_generate(cfg: PipelineConfig, out_dir):
    """Write dataset.csv and dataset_meta.json for the configured setup."""
    t0 = time.perf_counter()
    out = _p(out_dir)
    save_config(cfg, out / "config.json")
    dataset = generate_dataset(cfg.dataset, cfg.seed)
    save_dataset(dataset, out / "dataset.csv", out / "dataset_meta.json", cfg.dataset)
    _update_manifest(out, "generate", time.perf_counter() - t0, cfg,
                     {"observations": dataset.total_obs})
    return dataset


def _surrogate_training_pairs(cfg: PipelineConfig, out: Path, plate: int):
    """Training pairs for one plate per the configured source (1-based plate)."""
    if cfg.surrogate.source == SURROGATE_SOURCE_DATASET:
        dataset = load_dataset(_require(out / "dataset.csv", "generate"),
                               _require(out / "dataset_meta.json", "generate"))
        return np.asarray(dataset.amplitudes[plate - 1]), np.asarray(dataset.strains[plate - 1])
    x = np.linspace(0.0, cfg.surrogate.grid_max_amplitude, cfg.surrogate.grid_points)
    noise = rng_from_seed(cfg.seed, 1, plate, 0).normal(0.0, cfg.surrogate.grid_noise_std, len(x))
    return x, strain_oracle(x, cfg.dataset.oracle) + noise


def stage_surrogates(cfg: PipelineConfig, out_dir):
    """Fit one surrogate per plate and persist them as JSON.

    Plates with too few points to identify the kernel borrow
    hyperparameters from a pooled fit over every plate's pairs.
    """
    t0 = time.perf_counter()
    out = _p(out_dir)
    sdir = out / "surrogates"
    sdir.mkdir(exist_ok=True)
    n_plates = cfg.dataset.n_plates
    pairs = {k: _surrogate_training_pairs(cfg, out, k) for k in range(1, n_plates + 1)}
    pooled_kernel = None
    rows = []
    for k in range(1, n_plates + 1):
        x, y = pairs[k]
        borrowed = False
        if cfg.surrogate.optimize and len(x) >= cfg.surrogate.min_points_to_optimize:
            mdl = gpr_fit(x, y, cfg.surrogate.init_kernel, optimize_hypers=True,
                          n_restarts=cfg.surrogate.n_restarts,
                          seed=derive_seed(cfg.seed, 1, k, 1))
        elif cfg.surrogate.optimize:
            if pooled_kernel is None:
                all_x = np.concatenate([pairs[j][0] for j in range(1, n_plates + 1)])
                all_y = np.concatenate([pairs[j][1] for j in range(1, n_plates + 1)])
                pooled = gpr_fit(all_x, all_y, cfg.surrogate.init_kernel,
                                 optimize_hypers=True,
                                 n_restarts=cfg.surrogate.n_restarts,
                                 seed=derive_seed(cfg.seed, 1, 0, 1))
                pooled_kernel = pooled.kernel
            mdl = gpr_fit(x, y, pooled_kernel, optimize_hypers=False)
            borrowed = True
        else:
            mdl = gpr_fit(x, y, cfg.surrogate.init_kernel, optimize_hypers=False)
        save_gpr(mdl, sdir / f"plate_{k}.json")
        rows.append({
            "plate": k,
            "n_train": len(x),
            "source": cfg.surrogate.source,
            "borrowed_hyperparameters": borrowed,
            "kernel": {"signal_var": mdl.kernel.signal_var,
                       "lengthscale": mdl.kernel.lengthscale,
                       "noise_var": mdl.kernel.noise_var},
            "log_marginal": mdl.log_marginal,
        })
    (sdir / "summary.json").write_text(json.dumps({"plates": rows}, indent=2, sort_keys=True) + "\n")
    _update_manifest(out, "train-surrogate", time.perf_counter() - t0, cfg)


def load_surrogates(cfg: PipelineConfig, out_dir):
    out = _p(out_dir)
    return [
        load_gpr(_require(out / "surrogates" / f"plate_{k}.json", "train-surrogate"))
        for k in range(1, cfg.dataset.n_plates + 1)
    ]


def _infer_one(cfg, out, spec, subdir, n_jobs) -> Summary:
    scfg = replace(
        cfg.sampler,
        seed=derive_seed(cfg.seed, 2, 0 if spec.kind == HIERARCHICAL else spec.plate_labels[0]),
    )
    chains = run_chains(spec, scfg, n_jobs=n_jobs)
    cdir = _p(out) / "chains" / subdir
    cdir.mkdir(parents=True, exist_ok=True)
    (cdir / "params_manifest.json").write_text(
        json.dumps(spec.layout.manifest(), indent=2) + "\n"
    )
    save_chains(chains, cdir)
    summary = summarize(chains)
    write_summary(summary, cdir / "summary.json", cdir / "summary.txt")
    return summary


def stage_infer(cfg: PipelineConfig, out_dir, model_kind: str = "hier",
                plate: int = None, n_jobs: int = 1):
    """Run NUTS for the requested model(s); returns {subdir: Summary}.

    ``model_kind`` is "hier" or "indep"; for "indep" without a plate,
    every plate is inferred in turn.
    """
    t0 = time.perf_counter()
    out = _p(out_dir)
    dataset = load_dataset(_require(out / "dataset.csv", "generate"),
                           _require(out / "dataset_meta.json", "generate"))
    surrogates = load_surrogates(cfg, out)
    summaries = {}
    if model_kind == "hier":
        spec = build_hierarchical_spec(dataset, surrogates, cfg.hyperpriors)
        summaries[HIER_DIR] = _infer_one(cfg, out, spec, HIER_DIR, n_jobs)
    elif model_kind == "indep":
        specs = build_independent_specs(dataset, surrogates, cfg.hyperpriors)
        wanted = [plate] if plate is not None else list(range(1, dataset.n_plates + 1))
        for k in wanted:
            if not 1 <= k <= dataset.n_plates:
                raise ValueError(f"plate {k} out of range 1..{dataset.n_plates}")
            summaries[indep_dir(k)] = _infer_one(cfg, out, specs[k - 1], indep_dir(k), n_jobs)
    else:
        raise ValueError(f"model_kind must be 'hier' or 'indep', got {model_kind!r}")
    gates = {name: s.gate_passed for name, s in summaries.items()}
    _update_manifest(out, f"infer-{model_kind}" + (f"-plate{plate}" if plate else ""),
                     time.perf_counter() - t0, cfg,
                     {"gates": gates, "max_rhat": {n: s.max_rhat for n, s in summaries.items()}})
    return summaries


def stage_detect(cfg: PipelineConfig, out_dir) -> DetectionReport:
    """Posterior predictive comparison for every plate with no-pooling chains.

    Requires the hierarchical chains and at least the data-scarce
    (last) plate's independent chains.
    """
    t0 = time.perf_counter()
    out = _p(out_dir)
    surrogates = load_surrogates(cfg, out)
    hier = load_chains(_require(out / "chains" / HIER_DIR / "stats.json", "infer --model hier").parent)
    last_plate = cfg.dataset.n_plates
    _require(out / "chains" / indep_dir(last_plate) / "stats.json",
             f"infer --model indep --plate {last_plate}")
    gamma_draws = gamma_column(hier)
    plates = []
    for k in range(1, cfg.dataset.n_plates + 1):
        cdir = out / "chains" / indep_dir(k)
        if not (cdir / "stats.json").exists():
            continue
        indep = load_chains(cdir)
        surr = surrogates[k - 1]
        pp = draw_predictive(hier, k, surr, rng_from_seed(cfg.seed, 3, k, 0), PARTIAL_POOLING)
        npool = draw_predictive(indep, k, surr, rng_from_seed(cfg.seed, 3, k, 1), NO_POOLING)
        thresholds = threshold_strains(cfg.detection.levels, surr, gamma_draws,
                                       rng_from_seed(cfg.seed, 3, k, 2))
        plates.append(compare_pooling(pp, npool, thresholds))
    report = DetectionReport(levels=tuple(cfg.detection.levels), plates=tuple(plates))
    ddir = out / "detection"
    ddir.mkdir(exist_ok=True)
    write_report(report, ddir / "report.json", ddir / "kde_curves.csv")
    _update_manifest(out, "detect", time.perf_counter() - t0, cfg,
                     {"plates": [p.plate for p in plates],
                      "variance_reduction": {p.plate: p.variance_reduction for p in plates}})
    return report


def _prior_curves(hyperpriors):
    curves = {}
    for name, p in (("mu_mu", hyperpriors.mu_mu), ("sigma_mu", hyperpriors.sigma_mu),
                    ("mu_sigma", hyperpriors.mu_sigma), ("sigma_sigma", hyperpriors.sigma_sigma),
                    ("gamma", hyperpriors.noise)):
        mean, var = gamma_moments(p)
        hi = mean + 4.0 * math.sqrt(var)
        grid = np.linspace(hi * 1e-4, hi, 400)
        curves[name] = (grid, np.exp(gamma_logpdf(grid, p)))
    return curves


def _load_kde_curves(csv_path):
    """kde_curves.csv -> {(plate, source): (grid, density)} arrays."""
    import csv as _csv

    curves = {}
    with open(csv_path, newline="") as fh:
        for row in _csv.DictReader(fh):
            key = (int(row["plate"]), row["source"])
            curves.setdefault(key, ([], []))
            curves[key][0].append(float(row["grid"]))
            curves[key][1].append(float(row["density"]))
    return {k: (np.array(g), np.array(d)) for k, (g, d) in curves.items()}


def stage_report(cfg: PipelineConfig, out_dir):
    """Consolidated text/JSON report plus rendered figures."""
    from . import figures

    t0 = time.perf_counter()
    out = _p(out_dir)
    dataset = load_dataset(_require(out / "dataset.csv", "generate"),
                           _require(out / "dataset_meta.json", "generate"))
    surrogates = load_surrogates(cfg, out)
    hier_dir = out / "chains" / HIER_DIR
    hier = load_chains(_require(hier_dir / "stats.json", "infer --model hier").parent)
    hier_summary = json.loads((hier_dir / "summary.json").read_text())
    detection_report = json.loads(_require(out / "detection" / "report.json", "detect").read_text())
    kde_curves = _load_kde_curves(_require(out / "detection" / "kde_curves.csv", "detect"))

    # coefficient of variation of each surrogate at the plate's posterior
    # mean amplitude (the relative-spread check behind the mean-only likelihood)
    cov_rows = []
    for k in range(1, dataset.n_plates + 1):
        mu_post = float(np.mean(hier.column(f"mu_w[{k}]")))
        cov = coefficient_of_variation(surrogates[k - 1], mu_post)
        cov_rows.append({"plate": k, "posterior_mean_amplitude_mm": mu_post,
                         "cov_at_posterior_mean": None if math.isnan(cov) else cov})

    gates = {}
    max_rhat = {}
    for cdir in sorted((out / "chains").iterdir()):
        sj = cdir / "summary.json"
        if sj.exists():
            s = json.loads(sj.read_text())
            gates[cdir.name] = s["gate_passed"]
            max_rhat[cdir.name] = s["max_rhat"]

    fig_dir = out / "figures"
    fig_dir.mkdir(exist_ok=True)
    last = dataset.n_plates
    figures.fig_dataset_clusters(dataset, fig_dir / "dataset_clusters.png")
    figures.fig_surrogate(surrogates[last - 1], last, fig_dir / f"surrogate_plate_{last}.png")
    figures.fig_shared_posteriors(hier, _prior_curves(cfg.hyperpriors),
                                  fig_dir / "shared_posteriors.png")
    det_plates = detection_report["plates"]
    if det_plates:
        entry = det_plates[-1]
        k = entry["plate"]
        figures.fig_detection_curves(
            {src: kde_curves[(k, src)] for src in (PARTIAL_POOLING, NO_POOLING)},
            thresholds=entry["threshold_strains_microeps"],
            ratio=entry["variance_reduction_ratio"],
            plate=k,
            path=fig_dir / f"detection_plate_{k}.png",
        )
    figures.fig_deflection_mode(cfg.geometry, 6.0, fig_dir / "deflection_mode.png")

    report = {
        "config_hash": config_hash(cfg),
        "seed": cfg.seed,
        "dataset": {"n_plates": dataset.n_plates, "obs_counts": list(dataset.obs_counts),
                    "total_obs": dataset.total_obs},
        "surrogate_cov": cov_rows,
        "convergence": {"gates": gates, "max_rhat": max_rhat},
        "hier_summary": hier_summary,
        "detection": detection_report,
        "figures": sorted(p.name for p in fig_dir.glob("*.png")),
    }
    rdir = out / "report"
    rdir.mkdir(exist_ok=True)
    (rdir / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    (rdir / "report.txt").write_text(_format_report_text(cfg, report, hier_dir))
    _update_manifest(out, "report", time.perf_counter() - t0, cfg)
    return report


def _format_report_text(cfg: PipelineConfig, report: dict, hier_dir: Path) -> str:
    lines = []
    add = lines.append
    add("platepool pipeline report")
    add("=" * 60)
    add(f"config hash : {report['config_hash']}")
    add(f"seed        : {report['seed']}")
    ds = report["dataset"]
    add(f"dataset     : {ds['n_plates']} plates, counts {ds['obs_counts']}, "
        f"{ds['total_obs']} observations")
    add("")
    add("surrogate coefficient of variation at posterior mean amplitude")
    add(f"{'plate':>6} {'post. mean amp [mm]':>20} {'CoV':>10}")
    for row in report["surrogate_cov"]:
        cov = row["cov_at_posterior_mean"]
        cov_s = f"{cov:.4f}" if cov is not None else "undefined"
        add(f"{row['plate']:>6} {row['posterior_mean_amplitude_mm']:>20.3f} {cov_s:>10}")
    add("")
    add("convergence gates (rank-normalized split R-hat < 1.01)")
    for name in sorted(report["convergence"]["gates"]):
        ok = report["convergence"]["gates"][name]
        add(f"  {name:<16} {'PASS' if ok else 'FAIL'}  "
            f"(max rhat {report['convergence']['max_rhat'][name]:.5f})")
    add("")
    add("detection (posterior predictive strain)")
    for entry in report["detection"]["plates"]:
        add(f"  plate {entry['plate']}: "
            f"std partial-pool {entry['partial_pooling']['std_microeps']:.2f}, "
            f"no-pool {entry['no_pooling']['std_microeps']:.2f}, "
            f"variance-reduction ratio {entry['variance_reduction_ratio']:.3f}")
        for lv, t in sorted(entry["threshold_strains_microeps"].items()):
            pp = entry["partial_pooling"]["exceedance"][lv]
            npd = entry["no_pooling"]["exceedance"][lv]
            add(f"    {lv:>5} threshold {t:9.2f} microeps | "
                f"P(exceed) partial-pool {pp:.4f}, no-pool {npd:.4f}")
    add("")
    add("per-parameter R-hat table (hierarchical model)")
    add((hier_dir / "summary.txt").read_text().rstrip())
    add("")
    add("figures: " + ", ".join(report["figures"]))
    return "\n".join(lines) + "\n"


def run_all(cfg: PipelineConfig, out_dir, n_jobs: int = 1) -> int:
    """Full pipeline; returns the process exit code (0 ok, 2 gate failure)."""
    out = _p(out_dir)
    stage_generate(cfg, out)
    stage_surrogates(cfg, out)
    summaries = stage_infer(cfg, out, "hier", n_jobs=n_jobs)
    summaries.update(stage_infer(cfg, out, "indep", n_jobs=n_jobs))
    stage_detect(cfg, out)
    stage_report(cfg, out)
    return 0 if all(s.gate_passed for s in summaries.values()) else 2
