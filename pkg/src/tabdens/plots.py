"""Figure rendering for the CLI report paths.

Each function writes one PNG next to the delimited output it illustrates.
The Agg backend is forced so rendering works headless.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .inference import CalibrationReport, DensityEstimate


def plot_density(estimate: DensityEstimate, left: np.ndarray, right: np.ndarray,
                 density: np.ndarray, path) -> None:
    fig, ax = plt.subplots(figsize=(6, 4))
    edges = np.append(left, right[-1])
    ax.stairs(density, edges, fill=True, alpha=0.6)
    ax.axvline(estimate.median, color="crimson", linestyle="--",
               label=f"median {estimate.median:.3g}")
    cond = ", ".join(f"{n}={v:g}" for n, v in estimate.conditions) or "unconditional"
    ax.set_xlabel(estimate.feature)
    ax.set_ylabel("density")
    ax.set_title(f"p({estimate.feature} | {cond})")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_calibration(report: CalibrationReport, path) -> None:
    fig, ax = plt.subplots(figsize=(6, 4))
    widths = np.diff(report.bin_edges)
    ax.bar(report.bin_edges[:-1], report.histogram / widths, width=widths,
           align="edge", alpha=0.6)
    ax.axhline(1.0, color="crimson", linestyle=":", label="uniform")
    ax.set_xlabel("quantile of truth")
    ax.set_ylabel("density")
    ax.set_title(f"calibration, KS={report.ks_stat:.3f}, n={report.trials}")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_joint(values: np.ndarray, names: list[str], path) -> None:
    values = np.asarray(values)
    fig, ax = plt.subplots(figsize=(5, 5))
    if values.shape[1] == 1:
        ax.hist(values[:, 0], bins=50, density=True, alpha=0.7)
        ax.set_xlabel(names[0])
        ax.set_ylabel("density")
    else:
        ax.scatter(values[:, 0], values[:, 1], s=4, alpha=0.4)
        ax.set_xlabel(names[0])
        ax.set_ylabel(names[1])
    ax.set_title(f"{values.shape[0]} joint draws")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
