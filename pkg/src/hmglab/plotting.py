"""PNG renderings of the report CSVs (headless matplotlib)."""

from __future__ import annotations

from pathlib import Path
from typing import Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

__all__ = ["plot_series", "plot_rate"]


def _positive(xs: Sequence[float], ys: Sequence[Optional[float]]):
    pts = [(x, y) for x, y in zip(xs, ys) if y is not None and y > 0]
    return [p[0] for p in pts], [p[1] for p in pts]


def plot_series(path: Path, xs: Sequence[float], ys: Sequence[Optional[float]], xlabel: str, ylabel: str, title: str) -> Path:
    """One series on a log-y axis; non-positive values are left out of the log plot."""
    fig, ax = plt.subplots(figsize=(5, 3.5))
    px, py = _positive(xs, ys)
    if px:
        ax.semilogy(px, py, "o-")
    else:
        ax.text(0.5, 0.5, "no positive values", ha="center", va="center", transform=ax.transAxes)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    ax.grid(True, which="both", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def plot_rate(path: Path, ms: Sequence[int], dist: Sequence[Optional[float]], fitted: Sequence[Optional[float]], alpha: Optional[float]) -> Path:
    """Measured distance to the reference against the fitted ``C 3^(-alpha m)`` line."""
    fig, ax = plt.subplots(figsize=(5, 3.5))
    px, py = _positive(ms, dist)
    if px:
        ax.semilogy(px, py, "o", label="|abar(m) - ref|")
    fx, fy = _positive(ms, fitted)
    if fx:
        ax.semilogy(fx, fy, "-", label=f"fit, alpha = {alpha:.3g}")
    if not px and not fx:
        ax.text(0.5, 0.5, "degenerate fit", ha="center", va="center", transform=ax.transAxes)
    else:
        ax.legend()
    ax.set_xlabel("level m")
    ax.set_title("rate fit")
    ax.grid(True, which="both", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path
