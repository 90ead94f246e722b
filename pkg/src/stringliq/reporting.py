"""Figure rendering for the CLI report paths.

Every figure writer takes data plus a target path, draws with the Agg
backend and returns the path; figures accompany the delimited outputs
rather than replacing them.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .lob import DemandSurface
from .pricing import OptionKind


def _save(fig, path):
    fig.savefig(path, dpi=140, bbox_inches="tight")
    plt.close(fig)
    return path


def plot_surface(surface: DemandSurface, path, title: str = "net demand"):
    """Side-by-side heat maps of Q and q over price and time."""
    fig, axes = plt.subplots(1, 2, figsize=(10.5, 4.2))
    extent = [surface.times[0], surface.times[-1],
              surface.prices[0], surface.prices[-1]]
    for ax, z, label in ((axes[0], surface.Q, "Q (shares)"),
                         (axes[1], surface.q, "q (shares/$)")):
        im = ax.imshow(z, aspect="auto", origin="lower", extent=extent,
                       cmap="viridis")
        fig.colorbar(im, ax=ax, label=label)
        ax.set_xlabel("time")
        ax.set_ylabel("price")
    fig.suptitle(title)
    return _save(fig, path)


def plot_price_paths(pi_matrix: np.ndarray, times, path, max_lines: int = 200):
    """Clearing-price fan: a sample of paths plus the cross-path mean."""
    fig, ax = plt.subplots(figsize=(7.5, 4.2))
    times = np.asarray(times, dtype=float)
    sel = pi_matrix[: max_lines]
    ax.plot(times, sel.T, lw=0.5, alpha=0.35, color="steelblue")
    with np.errstate(invalid="ignore"):
        ax.plot(times, np.nanmean(pi_matrix, axis=0), lw=2.0, color="crimson",
                label="mean")
    ax.set_xlabel("time")
    ax.set_ylabel("clearing price")
    ax.legend(loc="best")
    return _save(fig, path)


def plot_smile(points, path, title: str = "implied volatility by delta"):
    fig, ax = plt.subplots(figsize=(7.5, 4.2))
    for kind, marker in ((OptionKind.CALL, "o"), (OptionKind.PUT, "s")):
        rows = [p for p in points if p.kind == kind]
        if not rows:
            continue
        ax.plot([p.delta for p in rows], [p.implied_vol for p in rows],
                marker=marker, lw=1.2, label=kind.value)
    ax.set_xlabel("delta")
    ax.set_ylabel("implied volatility")
    ax.set_title(title)
    ax.legend(loc="best")
    return _save(fig, path)


def plot_wealth_margins(report, path):
    """Histogram of per-path minimum wealth margins from the demo."""
    fig, ax = plt.subplots(figsize=(7.5, 4.2))
    ax.hist(report.per_path_min, bins=40, color="steelblue", edgecolor="white")
    ax.axvline(0.0, color="crimson", lw=1.5)
    ax.set_xlabel("min over time of wealth minus bound")
    ax.set_ylabel("paths")
    ax.set_title(f"wealth margin, verdict: {report.verdict}")
    return _save(fig, path)
