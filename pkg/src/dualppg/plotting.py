"""Report figures rendered to image files (no display needed)."""

from __future__ import annotations

import math
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .evalharness import Report, _fmt_field  # noqa: E402


def _group_label(cell, group_by) -> str:
    return " / ".join(_fmt_field(cell.group[f]) for f in group_by) or "all"


def plot_report(report: Report, rows: Sequence, path) -> Path:
    """Two panels: mean MAE per group and method, and window HR agreement.

    The PNG metadata is fixed so identical inputs give identical bytes.
    """
    path = Path(path)
    groups = sorted({_group_label(c, report.group_by) for c in report.cells})
    methods = list(dict.fromkeys(c.method for c in report.cells))
    fig, (ax_bar, ax_hr) = plt.subplots(1, 2, figsize=(10, 4))

    width = 0.8 / max(len(methods), 1)
    x = np.arange(len(groups))
    for i, m in enumerate(methods):
        vals = []
        for g in groups:
            cell = next((c for c in report.cells if c.method == m and _group_label(c, report.group_by) == g), None)
            vals.append(cell.mae if cell is not None else math.nan)
        ax_bar.bar(x + (i - (len(methods) - 1) / 2) * width, vals, width, label=m)
    ax_bar.set_xticks(x, groups, rotation=30, ha="right")
    ax_bar.set_ylabel("MAE (BPM)")
    ax_bar.legend(frameon=False)

    for m in methods:
        gold = [h for r in rows if r.method == m and r.valid for h in r.gold_hrs]
        pred = [h for r in rows if r.method == m and r.valid for h in r.pred_hrs]
        if gold:
            ax_hr.scatter(gold, pred, s=12, label=m)
    lo, hi = 40, 160
    ax_hr.plot([lo, hi], [lo, hi], color="0.6", lw=0.8)
    ax_hr.set_xlim(lo, hi)
    ax_hr.set_ylim(lo, hi)
    ax_hr.set_xlabel("reference HR (BPM)")
    ax_hr.set_ylabel("predicted HR (BPM)")

    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)
    return path


def plot_training_curve(history_rows: Sequence, path) -> Path:
    """Mean support and query loss per epoch from meta-training telemetry rows."""
    path = Path(path)
    epochs = sorted({r[0] for r in history_rows})
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for idx, name in ((2, "support (before adapt)"), (3, "query (after adapt)")):
        ax.plot(epochs, [np.mean([r[idx] for r in history_rows if r[0] == e]) for e in epochs], marker="o", label=name)
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)
    return path
