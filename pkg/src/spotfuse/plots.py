"""Figure rendering for run reports. All figures are written to files."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .evaluation import METRIC_ORDER, EvalReport

FIG_DPI = 120


def _save(fig, path: str | Path) -> Path:
    path = Path(path)
    fig.savefig(path, dpi=FIG_DPI, bbox_inches="tight")
    plt.close(fig)
    return path


def loss_curves(log: list[dict], path: str | Path) -> Path:
    """Every loss component over epochs, log-scaled y axis."""
    fig, ax = plt.subplots(figsize=(7, 4))
    if log:
        epochs = [row["epoch"] for row in log]
        for key in log[0]:
            if key == "epoch":
                continue
            ax.plot(epochs, [row[key] for row in log], label=key, linewidth=1.2)
        ax.set_yscale("log")
        ax.legend(fontsize=8)
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.set_title("training losses")
    return _save(fig, path)


def metric_curves(report: EvalReport, path: str | Path) -> Path:
    """External metrics against the number of clusters."""
    fig, ax = plt.subplots(figsize=(7, 4))
    for metric in ("ari", "nmi", "ami", "fmi", "jaccard", "purity"):
        ax.plot(report.counts, [row[metric] for row in report.rows],
                marker="o", label=metric)
    ax.set_xlabel("clusters")
    ax.set_ylabel("score")
    ax.set_ylim(-0.05, 1.05)
    ax.set_title("agreement with ground truth")
    ax.legend(fontsize=8)
    return _save(fig, path)


def spatial_map(coords: np.ndarray, assignments: np.ndarray, path: str | Path,
                title: str = "cluster map") -> Path:
    """Spots on their lattice positions, colored by cluster."""
    fig, ax = plt.subplots(figsize=(5, 5))
    sc = ax.scatter(coords[:, 0], coords[:, 1], c=assignments, cmap="tab10", s=14)
    ax.set_aspect("equal")
    ax.set_xlabel("x")
    ax.set_ylabel("y")
    ax.set_title(title)
    fig.colorbar(sc, ax=ax, shrink=0.8)
    return _save(fig, path)


def gate_weight_map(coords: np.ndarray, weights: np.ndarray, names, path: str | Path) -> Path:
    """One panel per modality showing its routing weight across the tissue."""
    m = weights.shape[1]
    fig, axes = plt.subplots(1, m, figsize=(4 * m, 3.6), squeeze=False)
    for j, (ax, name) in enumerate(zip(axes[0], names)):
        sc = ax.scatter(coords[:, 0], coords[:, 1], c=weights[:, j],
                        cmap="viridis", vmin=0.0, vmax=1.0, s=12)
        ax.set_aspect("equal")
        ax.set_title(f"gate weight: {name}")
        fig.colorbar(sc, ax=ax, shrink=0.8)
    return _save(fig, path)


def ablation_bars(table: dict[str, dict[str, float]], metric: str, path: str | Path) -> Path:
    """Mean +/- std of one metric per ablation variant."""
    fig, ax = plt.subplots(figsize=(6, 4))
    variants = list(table)
    means = [table[v][f"{metric}_mean"] for v in variants]
    stds = [table[v][f"{metric}_std"] for v in variants]
    ax.bar(variants, means, yerr=stds, capsize=4, color="tab:blue", alpha=0.85)
    ax.set_ylabel(metric)
    ax.set_title(f"ablation comparison ({metric})")
    ax.tick_params(axis="x", rotation=20)
    return _save(fig, path)


def sweep_curves(values: list[float], rows: list[dict], param: str, path: str | Path) -> Path:
    """Selected metrics against the swept hyperparameter value."""
    fig, ax = plt.subplots(figsize=(6, 4))
    for metric in ("ari", "nmi", "fmi"):
        ax.plot(values, [row[metric] for row in rows], marker="o", label=metric)
    ax.set_xlabel(param)
    ax.set_ylabel("score")
    ax.set_title(f"sensitivity to {param}")
    ax.legend(fontsize=8)
    return _save(fig, path)
