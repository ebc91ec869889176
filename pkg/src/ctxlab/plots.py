"""SVG figure rendering for the report pipelines.

All figures are written as SVG with a fixed hash salt and no embedded
creation date, so identical inputs produce byte-identical files.
"""

from __future__ import annotations

import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
matplotlib.rcParams["svg.hashsalt"] = "ctxlab"

import matplotlib.pyplot as plt
import numpy as np

from .numerics import EigenSpectrum, LinearFit, PowerLawFit, _relative_values

LN2 = math.log(2.0)


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return path


def save_spectrum_plot(spectra_by_l: dict[int, EigenSpectrum], path,
                       thresholds=None, true_ids: dict[int, int] | None = None) -> Path:
    """Relative eigenvalue vs index, linear and log y-axis panels side by side."""
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.6))
    for ax, yscale in zip(axes, ("linear", "log")):
        for l in sorted(spectra_by_l):
            rel = _relative_values(spectra_by_l[l])
            ax.plot(np.arange(1, len(rel) + 1), rel, lw=1.2, label=f"l={l}")
            if true_ids and l in true_ids:
                ax.axvline(true_ids[l], color="gray", lw=0.6, ls=":")
        if thresholds is not None:
            for thr in thresholds:
                ax.axhline(thr, color="lightgray", lw=0.5, zorder=0)
        ax.set_xlabel("eigenvalue index")
        ax.set_ylabel("relative eigenvalue")
        ax.set_yscale(yscale)
        ax.set_title(f"{yscale} scale")
    axes[0].legend(fontsize=7)
    fig.tight_layout()
    return _save(fig, path)


def save_sweep_plot(report, path) -> Path:
    """Validation CE vs context length, one curve per dataset size, minima
    marked, with the random-guess level ln 2 for reference."""
    by_d: dict[int, dict[int, list[float]]] = {}
    for r in report.records:
        by_d.setdefault(r.dataset_size, {}).setdefault(r.context_length, []).append(r.final_val_ce)
    fig, ax = plt.subplots(figsize=(6, 4))
    for D in sorted(by_d):
        ls = sorted(by_d[D])
        means = [float(np.mean(by_d[D][l])) for l in ls]
        (line,) = ax.plot(ls, means, marker="o", ms=3, lw=1.2, label=f"D={D}")
        if D in report.optimal_l:
            l_star = report.optimal_l[D]
            ax.plot([l_star], [float(np.mean(by_d[D][l_star]))], marker="*",
                    ms=12, color=line.get_color(), zorder=5)
    ax.axhline(LN2, color="gray", lw=0.8, ls="--", label="random guess (ln 2)")
    ax.set_xlabel("context length l")
    ax.set_ylabel("validation CE (nats)")
    ax.set_xscale("log")
    ax.legend(fontsize=8)
    fig.tight_layout()
    return _save(fig, path)


def save_ce_vs_id_plot(ids, ces, fit: LinearFit, path) -> Path:
    ids = np.asarray(ids, dtype=float)
    ces = np.asarray(ces, dtype=float)
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.scatter(ids, ces, s=18, zorder=3)
    xs = np.linspace(ids.min(), ids.max(), 50)
    ax.plot(xs, fit.predict(xs), lw=1.0, color="C1",
            label=f"slope={fit.slope:.5f}, r$^2$={fit.r_squared:.5f}")
    ax.set_xlabel("measured intrinsic dimension")
    ax.set_ylabel("validation CE (nats)")
    ax.legend(fontsize=8)
    fig.tight_layout()
    return _save(fig, path)


def save_power_fit_plot(x, y, fit: PowerLawFit, path,
                        xlabel: str = "x", ylabel: str = "y") -> Path:
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.scatter(x, y, s=18, zorder=3)
    xs = np.geomspace(x.min(), x.max(), 100)
    ax.plot(xs, fit.predict(xs), lw=1.0, color="C1",
            label=f"c0={fit.c0:.4g}, c={fit.c:.4g}, gamma={fit.gamma:.4g}")
    ax.set_xscale("log")
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.legend(fontsize=8)
    fig.tight_layout()
    return _save(fig, path)


def save_nn_scaling_plot(result, path) -> Path:
    """Log-log mean capped nearest-neighbour distance vs dataset size."""
    d = np.asarray(result.dataset_sizes, dtype=float)
    m = np.asarray(result.mean_distances, dtype=float)
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.loglog(d, m, marker="o", ms=4, lw=0, zorder=3)
    xs = np.geomspace(d.min(), d.max(), 50)
    ax.loglog(xs, np.exp(result.intercept) * xs**result.exponent, lw=1.0, color="C1",
              label=f"slope={result.exponent:.3f}, r$^2$={result.r_squared:.4f}")
    ax.set_xlabel("dataset size D")
    ax.set_ylabel("mean capped NN distance")
    ax.legend(fontsize=8)
    fig.tight_layout()
    return _save(fig, path)
