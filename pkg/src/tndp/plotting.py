"""Utility-vs-step plots with standard-error bands."""
from __future__ import annotations

from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from tndp.evaluation import UtilityCurve, read_curves_csv  # noqa: E402


def merge_curves(paths: Sequence[str]) -> list[UtilityCurve]:
    """Union of the methods in several curve CSVs; a later file wins on duplicate names."""
    merged: dict[str, UtilityCurve] = {}
    for p in paths:
        for c in read_curves_csv(p):
            merged[c.method] = c
    return [merged[m] for m in sorted(merged)]


def plot_curves(curves: Sequence[UtilityCurve], out_path: str, *, title: str = "",
                ylabel: str = "utility") -> str:
    if not curves:
        raise ValueError("nothing to plot")
    fig, ax = plt.subplots(figsize=(5.5, 4.0))
    cmap = plt.get_cmap("tab10")
    for i, c in enumerate(sorted(curves, key=lambda c: c.method)):
        color = cmap(i % 10)
        ax.plot(c.steps, c.mean, label=c.method, color=color, lw=1.6)
        ax.fill_between(c.steps, c.mean - c.stderr, c.mean + c.stderr, color=color, alpha=0.2, lw=0)
    ax.set_xlabel("step")
    ax.set_ylabel(ylabel)
    if title:
        ax.set_title(title)
    ax.legend(frameon=False, fontsize=8)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path
