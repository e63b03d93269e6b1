"""Loss curves and per-iteration Dice bars as PNG files."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

_BARS = " .:-=+*#%@"


def sparkline(values) -> str:
    values = list(values)
    if not values:
        return ""
    lo, hi = min(values), max(values)
    span = (hi - lo) or 1.0
    return "".join(_BARS[int((v - lo) / span * (len(_BARS) - 1))] for v in values)


def loss_curve(curve: list[tuple[int, float]], path: str | Path) -> None:
    fig, ax = plt.subplots(figsize=(5, 3))
    if curve:
        it, loss = zip(*curve)
        ax.plot(it, loss, marker=".")
    ax.set_xlabel("episode")
    ax.set_ylabel("soft Dice loss")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def bars(labels: list[str], values: list[float], path: str | Path, ylabel: str = "Dice") -> None:
    fig, ax = plt.subplots(figsize=(5, 3))
    ax.bar(labels, values)
    lo = min(values, default=0.0)
    ax.set_ylim(max(0.0, lo - 0.05), 1.0)
    ax.set_ylabel(ylabel)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
