"""Report figures rendered to files (headless Agg backend).

One function per figure, mirroring the delimited outputs they sit next
to: dataset clusters, surrogate fit, posterior/trace panels for the
shared parameters, pooling-comparison predictive densities, and the
deflection mode shape. All figures are deterministic for fixed inputs
(fixed dpi, no timestamps) so report artifacts stay byte-reproducible.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import numpy as np
from matplotlib import pyplot as plt

from .detection import DetectionReport
from .gpr import GprModel, gpr_predict
from .synthetic import Dataset, PlateGeometry, deflection_field

PLATE_COLORS = ["tab:blue", "tab:orange", "tab:green", "tab:red", "tab:purple", "tab:brown",
                "tab:pink", "tab:gray", "tab:olive", "tab:cyan"]
_SAVE = dict(dpi=150, bbox_inches="tight")


def _style():
    plt.rcParams.update({
        "figure.autolayout": False,
        "axes.grid": True,
        "grid.alpha": 0.3,
        "font.size": 9,
    })


def _color(k):
    return PLATE_COLORS[(k - 1) % len(PLATE_COLORS)]


def fig_dataset_clusters(dataset: Dataset, path):
    """Scatter of (amplitude, strain) observations, one color per plate."""
    _style()
    fig, ax = plt.subplots(figsize=(6, 4))
    for k in range(dataset.n_plates):
        ax.scatter(dataset.amplitudes[k], dataset.strains[k], s=18,
                   color=_color(k + 1), label=f"plate {k + 1} (n={len(dataset.strains[k])})")
    ax.set_xlabel("deflection amplitude [mm]")
    ax.set_ylabel("transverse strain [microstrain]")
    ax.legend(fontsize=7)
    fig.savefig(path, **_SAVE)
    plt.close(fig)


def fig_surrogate(model: GprModel, plate: int, path):
    """Surrogate mean with a 2-sigma band and the training points."""
    _style()
    lo = min(0.0, float(model.train_x.min()))
    hi = float(model.train_x.max()) * 1.05
    grid = np.linspace(lo, hi, 300)
    mean, var = gpr_predict(model, grid)
    band = 2.0 * np.sqrt(var)
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.fill_between(grid, mean - band, mean + band, alpha=0.25, color="tab:blue",
                    label="2-sigma credible band")
    ax.plot(grid, mean, color="tab:blue", label="posterior mean")
    ax.scatter(model.train_x, model.train_y, s=18, color="tab:red", zorder=3,
               label="training set")
    ax.set_xlabel("deflection amplitude [mm]")
    ax.set_ylabel("transverse strain [microstrain]")
    ax.set_title(f"surrogate for plate {plate} (mean used in the likelihood)")
    ax.legend(fontsize=7)
    fig.savefig(path, **_SAVE)
    plt.close(fig)


def fig_shared_posteriors(chains, priors, path):
    """KDE posterior + trace panel per shared parameter, prior overlaid.

    ``priors`` maps parameter name -> (grid, density) arrays.
    """
    from .detection import kde as make_kde

    _style()
    names = [n for n in ("mu_mu", "sigma_mu", "mu_sigma", "sigma_sigma", "gamma")
             if n in chains.param_names]
    fig, axes = plt.subplots(len(names), 2, figsize=(9, 2.1 * len(names)))
    axes = np.atleast_2d(axes)
    for row, name in enumerate(names):
        per_chain = chains.per_chain(name)
        ax = axes[row, 0]
        for c in range(per_chain.shape[0]):
            k = make_kde(per_chain[c])
            ax.plot(k.grid, k.density, lw=0.9)
        if name in priors:
            g, dens = priors[name]
            ax.plot(g, dens, "m--", lw=1.1, label="prior")
            ax.legend(fontsize=7)
        ax.set_ylabel("density")
        ax.set_title(name, fontsize=9)
        ax = axes[row, 1]
        for c in range(per_chain.shape[0]):
            ax.plot(per_chain[c], lw=0.4)
        ax.set_ylabel(name)
    axes[-1, 0].set_xlabel("value")
    axes[-1, 1].set_xlabel("draw")
    fig.tight_layout()
    fig.savefig(path, **_SAVE)
    plt.close(fig)


def fig_detection(report: DetectionReport, plate: int, path):
    """Predictive strain densities for both pooling regimes plus thresholds."""
    entry = report.plate(plate)
    curves = {
        det.source: (det.kde.grid, det.kde.density)
        for det in (entry.partial_pooling, entry.no_pooling)
    }
    thresholds = {
        f"{lv:g}mm": t
        for lv, t in zip(entry.thresholds.levels, entry.thresholds.strain_means)
    }
    fig_detection_curves(curves, thresholds, entry.variance_reduction, plate, path)


def fig_detection_curves(curves: dict, thresholds: dict, ratio: float, plate: int, path):
    """Same figure from raw curve data: {source: (grid, density)} plus
    {level-label: threshold strain}."""
    _style()
    fig, ax = plt.subplots(figsize=(6.5, 4))
    colors = {"partial_pooling": "tab:blue", "no_pooling": "tab:orange"}
    for source, (grid, density) in curves.items():
        color = colors.get(source, "tab:gray")
        ax.plot(grid, density, color=color, label=source.replace("_", " "))
        ax.fill_between(grid, density, alpha=0.15, color=color)
    for label, t in sorted(thresholds.items(), key=lambda kv: kv[1]):
        ax.axvline(t, ls="--", lw=0.9, color="gray")
        ax.text(t, ax.get_ylim()[1] * 0.95, label, rotation=90,
                fontsize=7, ha="right", va="top")
    ax.set_xlabel("predicted transverse strain [microstrain]")
    ax.set_ylabel("density")
    ax.set_title(f"plate {plate}: variance-reduction ratio {ratio:.2f}")
    ax.legend(fontsize=8)
    fig.savefig(path, **_SAVE)
    plt.close(fig)


def fig_deflection_mode(geom: PlateGeometry, amplitude: float, path):
    """Perspective surface of the half-sine bathtub deflection mode."""
    _style()
    u = np.linspace(0.0, geom.a, 60)
    v = np.linspace(0.0, geom.b, 30)
    uu, vv = np.meshgrid(u, v)
    w = np.vectorize(lambda a, b: deflection_field(a, b, geom, amplitude))(uu, vv)
    fig = plt.figure(figsize=(6.5, 4))
    ax = fig.add_subplot(111, projection="3d")
    ax.plot_surface(uu, vv, w, cmap="viridis", rstride=1, cstride=1, linewidth=0)
    ax.scatter([geom.a / 2], [geom.b / 2], [amplitude], color="red", s=25,
               label="strain sensor")
    ax.set_xlabel("u [mm]")
    ax.set_ylabel("v [mm]")
    ax.set_zlabel("w [mm]")
    ax.view_init(azim=-60, elev=25)
    fig.savefig(path, **_SAVE)
    plt.close(fig)
