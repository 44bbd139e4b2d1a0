"""Static figures for fits and reports, written to files with the Agg backend.

No maps: region-level results are drawn as sorted interval plots and the
geometry is left to the GeoJSON exports.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=110, bbox_inches="tight")
    plt.close(fig)
    return path


def plot_temporal(structured, unstructured, path) -> Path:
    """Structured and unstructured temporal RR with 95% bands."""
    fig, axes = plt.subplots(1, 2, figsize=(10, 3.6), sharey=True)
    for ax, surf, title in zip(axes, (structured, unstructured), ("structured", "unstructured")):
        x = surf.day if np.isfinite(surf.day).all() else surf.week
        ax.fill_between(x, surf.rr_lo, surf.rr_hi, alpha=0.3, color="tab:blue", lw=0)
        ax.plot(x, surf.rr_mean, color="tab:blue")
        ax.axhline(1.0, color="grey", lw=0.8, ls="--")
        ax.set_title(f"{title} temporal RR")
        ax.set_xlabel("day" if np.isfinite(surf.day).all() else "week")
    axes[0].set_ylabel("relative risk")
    return _save(fig, path)


def plot_spatial(surface, path) -> Path:
    """Regions sorted by posterior RR with 95% intervals."""
    order = np.argsort(surface.rr_mean, kind="stable")
    n = len(order)
    fig, ax = plt.subplots(figsize=(5, max(3.0, 0.18 * n)))
    y = np.arange(n)
    mean = surface.rr_mean[order]
    ax.errorbar(mean, y, xerr=[mean - surface.rr_lo[order], surface.rr_hi[order] - mean],
                fmt="o", ms=3, color="tab:red", ecolor="0.5", elinewidth=0.8)
    ax.set_yticks(y)
    ax.set_yticklabels(surface.region_id[order], fontsize=7)
    ax.axvline(1.0, color="grey", lw=0.8, ls="--")
    ax.set_xlabel("spatial relative risk")
    return _save(fig, path)


def plot_trajectories(traj: pd.DataFrame, path) -> Path:
    """Daily space-time RR per region (points) with LOESS curves."""
    fig, ax = plt.subplots(figsize=(8, 4))
    for k, (rid, grp) in enumerate(traj.groupby("region_id", sort=False)):
        colour = f"C{k % 10}"
        ax.plot(grp["day"], grp["rr_mean"], ".", ms=2, alpha=0.4, color=colour)
        ax.plot(grp["day"], grp["rr_smooth"], color=colour, label=str(rid))
    ax.axhline(1.0, color="grey", lw=0.8, ls="--")
    ax.set_xlabel("day")
    ax.set_ylabel("relative risk")
    ax.legend(fontsize=7, ncol=2)
    return _save(fig, path)


def plot_coefficients(tables: dict, path) -> Path:
    """Fixed-effect posterior means and 95% intervals, one row per coefficient and model."""
    rows = []
    for label, table in tables.items():
        sub = table[table["parameter"].str.startswith("beta[")]
        for name, mean, lo, hi in zip(sub["parameter"], sub["mean"], sub["q2.5"], sub["q97.5"]):
            rows.append((name[5:-1], label, mean, lo, hi))
    if not rows:
        raise ValueError("no fixed-effect coefficients to plot")
    df = pd.DataFrame(rows, columns=["coef", "model", "mean", "lo", "hi"])
    coefs = list(dict.fromkeys(df["coef"]))
    models = list(dict.fromkeys(df["model"]))
    fig, ax = plt.subplots(figsize=(6, 0.5 + 0.35 * len(coefs) * len(models)))
    offsets = np.linspace(-0.3, 0.3, len(models)) if len(models) > 1 else [0.0]
    for off, (k, m) in zip(offsets, enumerate(models)):
        sub = df[df["model"] == m].set_index("coef").reindex(coefs)
        y = np.arange(len(coefs)) + off
        ax.errorbar(sub["mean"], y, xerr=[sub["mean"] - sub["lo"], sub["hi"] - sub["mean"]],
                    fmt="o", ms=3, color=f"C{k % 10}", label=str(m))
    ax.set_yticks(np.arange(len(coefs)))
    ax.set_yticklabels(coefs)
    ax.axvline(0.0, color="grey", lw=0.8, ls="--")
    ax.set_xlabel("coefficient")
    ax.legend(fontsize=7, title="model")
    return _save(fig, path)


def plot_traces(samples, path, params=None) -> Path:
    """Per-chain trace plots of the fixed effects and log-precisions."""
    labels = samples.registry.labels
    if params is None:
        params = [lab for lab in labels if lab == "mu" or lab.startswith(("beta[", "log_tau_"))]
    fig, axes = plt.subplots(len(params), 1, figsize=(7, 1.3 * len(params)), sharex=True, squeeze=False)
    for ax, name in zip(axes[:, 0], params):
        j = labels.index(name)
        for k, chain in enumerate(samples.chains):
            ax.plot(chain[:, j], lw=0.5, color=f"C{k % 10}")
        ax.set_ylabel(name, fontsize=7, rotation=0, ha="right")
    axes[-1, 0].set_xlabel("kept draw")
    return _save(fig, path)
