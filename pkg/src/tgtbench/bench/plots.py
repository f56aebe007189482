"""SVG figures drawn from the CSV rows; presentation only."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

# keep SVG output free of timestamps
_SAVE = {"format": "svg", "metadata": {"Date": None}}


def histogram(path, edges, counts: dict[str, list[int]], xlabel: str = "sum rate (bit/s/Hz)") -> None:
    fig, ax = plt.subplots(figsize=(6, 4))
    for label, c in counts.items():
        ax.stairs(c, edges, label=label, fill=False)
    ax.set_xlabel(xlabel)
    ax.set_ylabel("instances")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, **_SAVE)
    plt.close(fig)


def curves(path, series: dict[str, tuple[list, list]], xlabel: str, ylabel: str, logx: bool = False) -> None:
    fig, ax = plt.subplots(figsize=(6, 4))
    for label, (x, y) in series.items():
        ax.plot(x, y, marker="o", label=label)
    if logx:
        ax.set_xscale("log")
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.grid(alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, **_SAVE)
    plt.close(fig)
