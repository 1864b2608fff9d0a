"""Figures for ablation tables and memory attention dumps.

matplotlib is imported lazily with the non-interactive Agg backend so the
library and CLI work headless.
"""

from __future__ import annotations

import os
from typing import Mapping, Sequence


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def plot_ablation(summary: Sequence[Mapping], path: str | os.PathLike, metric: str = "macro_f1") -> None:
    """Grouped bars of ``metric`` mean ± sd, one group per model/mode pair."""
    plt = _pyplot()
    groups = sorted({(s["model"], s["mode"]) for s in summary})
    techniques = sorted({s["technique"] for s in summary}, key=lambda t: (t != "full", t))
    by_key = {(s["model"], s["mode"], s["technique"]): s for s in summary}
    width = 0.8 / max(1, len(techniques))
    fig, ax = plt.subplots(figsize=(max(6.0, 1.2 * len(groups) + 2), 4.0))
    for k, tech in enumerate(techniques):
        xs, means, sds = [], [], []
        for g, (model, mode) in enumerate(groups):
            s = by_key.get((model, mode, tech))
            if s is None:
                continue
            xs.append(g + (k - (len(techniques) - 1) / 2) * width)
            means.append(s[f"{metric}_mean"])
            sds.append(s[f"{metric}_sd"])
        ax.bar(xs, means, width, yerr=sds, capsize=2, label=tech)
    ax.set_xticks(range(len(groups)))
    ax.set_xticklabels([f"{m}\n{mode}" for m, mode in groups], fontsize=8)
    ax.set_ylabel(metric.replace("_", " "))
    ax.set_ylim(0.0, 1.05)
    ax.legend(fontsize=8, ncol=min(5, len(techniques)))
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_attention(records: Sequence[Mapping], path: str | os.PathLike, layer: int = -1,
                   max_rows: int = 60) -> None:
    """Heatmap of summary attention: rows are query timepoints, columns ToI ids.

    ``records`` are attention-dump entries with ``t`` and per-layer lists of
    ``{"t", "toi_id", "weight"}`` dictionaries under ``layers``.
    """
    import numpy as np

    plt = _pyplot()
    rows = [r for r in records if r["layers"] and r["layers"][layer]][-max_rows:]
    max_toi = max([e["toi_id"] for r in rows for e in r["layers"][layer]] + [1])
    grid = np.full((len(rows), max_toi), np.nan)
    for i, r in enumerate(rows):
        for e in r["layers"][layer]:
            grid[i, e["toi_id"] - 1] = e["weight"]
    fig, ax = plt.subplots(figsize=(min(12.0, 2 + 0.12 * max_toi), min(10.0, 2 + 0.12 * len(rows))))
    im = ax.imshow(grid, aspect="auto", interpolation="nearest", cmap="viridis", vmin=0.0,
                   extent=(0.5, max_toi + 0.5, rows[-1]["t"] + 0.5 if rows else 0.5,
                           rows[0]["t"] - 0.5 if rows else -0.5))
    ax.set_xlabel("ToI id (T - t)")
    ax.set_ylabel("timepoint of interest T")
    fig.colorbar(im, ax=ax, label="attention")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
