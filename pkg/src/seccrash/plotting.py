"""ROC and ablation figures written straight to PNG files."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import pandas as pd  # noqa: E402

from .evaluation import auc, roc_curve  # noqa: E402

_META = {"Software": None}


def roc_figure(curves: dict, path, title: str = "ROC") -> None:
    """One curve per entry of ``curves`` (name -> (scores, labels)), AUC in the legend."""
    fig, ax = plt.subplots(figsize=(5, 5))
    for name, (scores, labels) in curves.items():
        far, sen, _ = roc_curve(scores, labels)
        ax.plot(far, sen, label=f"{name} (AUC {auc(scores, labels):.3f})")
    ax.plot([0, 1], [0, 1], color="grey", lw=0.8, ls="--")
    ax.axvline(0.2, color="grey", lw=0.6, ls=":")
    ax.set_xlabel("false alarm rate")
    ax.set_ylabel("sensitivity")
    ax.set_title(title)
    ax.legend(loc="lower right", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata=_META)
    plt.close(fig)


def ablation_figure(table: pd.DataFrame, x: str, path, title: str = "") -> None:
    """Line plot for numeric ``x`` (window counts), grouped bars otherwise."""
    cols = [c for c in table.columns if c != x]
    fig, ax = plt.subplots(figsize=(6, 4))
    if pd.api.types.is_numeric_dtype(table[x]):
        for c in cols:
            ax.plot(table[x], table[c], marker="o", label=c)
        ax.set_xticks(list(table[x]))
    else:
        table.set_index(x)[cols].plot.bar(ax=ax, rot=0)
    ax.set_xlabel(x)
    ax.set_ylabel("AUC")
    ax.set_title(title)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata=_META)
    plt.close(fig)
