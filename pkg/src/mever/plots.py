"""Figure rendering for the report path.

PNGs are written without Date metadata so identical inputs produce
identical bytes.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

_PNG_METADATA = {"Date": None, "Software": None}


def render_kappa_curve(rows: list[dict], out_path) -> Path:
    """Line plot of precision/recall against the retrieval cutoff."""
    out_path = Path(out_path)
    kappas = [row["k"] for row in rows]
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.plot(kappas, [row["precision"] for row in rows], marker="o", label="precision")
    ax.plot(kappas, [row["recall"] for row in rows], marker="s", label="recall")
    ax.set_xlabel("retrieval cutoff")
    ax.set_ylabel("score")
    ax.set_xticks(kappas)
    ax.set_ylim(0, 1.02)
    ax.legend()
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_path, metadata=_PNG_METADATA)
    plt.close(fig)
    return out_path


def render_ablation_bars(rows: list[dict], out_path, metric: str = "macro_f1") -> Path:
    """Bar chart of one metric across ablation variants."""
    out_path = Path(out_path)
    usable = [row for row in rows if row.get(metric) is not None]
    names = [row["ablation"] for row in usable]
    values = [row[metric] for row in usable]
    fig, ax = plt.subplots(figsize=(max(5, 0.9 * len(names)), 3.2))
    colors = ["tab:blue" if n == "full" else "tab:orange" for n in names]
    ax.bar(range(len(names)), values, color=colors)
    ax.set_xticks(range(len(names)))
    ax.set_xticklabels(names, rotation=30, ha="right")
    ax.set_ylabel(metric)
    ax.set_ylim(0, 1.02)
    ax.grid(axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_path, metadata=_PNG_METADATA)
    plt.close(fig)
    return out_path
