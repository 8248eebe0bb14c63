"""Figure writers for evaluation and ablation reports."""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

from .evaluation import EvalCurve  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "svg.hashsalt": "bftrans",  # stable element ids -> reproducible SVG bytes
    "svg.fonttype": "none",
}

GRID_KWARGS = dict(linestyle="-", linewidth=0.5, alpha=0.4)


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, metadata={"Date": None} if path.suffix == ".svg" else None)
    plt.close(fig)
    return path


def plot_curves(success: Mapping[str, EvalCurve], precision: Mapping[str, EvalCurve], path) -> Path:
    """Side-by-side success and precision plots; legend entries carry AUC / P@20."""
    with plt.rc_context(STYLE):
        fig, (ax_s, ax_p) = plt.subplots(1, 2, figsize=(7.0, 3.0), constrained_layout=True)
        for name, c in success.items():
            ax_s.plot(c.thresholds, c.values, label=f"{name} [{c.auc:.3f}]")
        for name, c in precision.items():
            ax_p.plot(c.thresholds, c.values, label=f"{name} [{c.p20:.3f}]")
        ax_s.set(xlabel="overlap threshold", ylabel="success rate", xlim=(0, 1), ylim=(0, 1.02), title="Success")
        ax_p.set(xlabel="location error threshold (px)", ylabel="precision", xlim=(0, 50), ylim=(0, 1.02), title="Precision")
        ax_p.axvline(20, color="black", **GRID_KWARGS)
        for ax in (ax_s, ax_p):
            ax.legend(loc="lower left" if ax is ax_s else "lower right")
        return _save(fig, path)


def plot_ablation(rows: Sequence[tuple[str, float, float]], path) -> Path:
    """Grouped bars of success and precision per variant."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5.0, 3.0), constrained_layout=True)
        names = [r[0] for r in rows]
        xs = range(len(rows))
        ax.bar([x - 0.2 for x in xs], [r[1] for r in rows], width=0.4, label="Succ.")
        ax.bar([x + 0.2 for x in xs], [r[2] for r in rows], width=0.4, label="Prec.")
        ax.set_xticks(list(xs), names)
        ax.set_ylim(0, 1)
        ax.legend(loc="upper left")
        return _save(fig, path)
