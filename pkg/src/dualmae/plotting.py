"""Loss-curve figures rendered off-screen with the Agg backend."""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from matplotlib.backends.backend_agg import FigureCanvasAgg
from matplotlib.figure import Figure

COMPONENTS = ("L_intra", "L_cross", "L_mse", "L_rl", "total")


def read_loss_log(path: str | Path) -> dict[str, np.ndarray]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        return {k: np.zeros(0) for k in ("step", *COMPONENTS)}
    return {k: np.array([float(r[k]) for r in rows]) for k in rows[0]}


def plot_loss_curves(log: Mapping[str, Sequence[float]], out_path: str | Path, window: int = 5) -> Path:
    """Per-component curves on a log axis plus the moving-average total."""
    from .trainer import moving_average

    steps = np.asarray(log["step"])
    fig = Figure(figsize=(8, 4.5), dpi=100)
    FigureCanvasAgg(fig)
    ax = fig.add_subplot(1, 1, 1)
    for name in COMPONENTS:
        values = np.asarray(log[name], dtype=np.float64)
        if values.size and np.all(values > 0):
            ax.plot(steps, values, label=name, linewidth=1.0, alpha=0.8)
    if len(steps):
        ax.plot(steps, moving_average(log["total"], window), color="black", linewidth=2.0, label=f"total (mean of {window})")
    ax.set_yscale("log")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.grid(True, which="both", alpha=0.3)
    ax.legend(loc="upper right", fontsize=8)
    fig.tight_layout()
    out = Path(out_path)
    fig.savefig(out, metadata={"Software": None} if out.suffix.lower() == ".png" else None)
    return out


__all__ = ["COMPONENTS", "plot_loss_curves", "read_loss_log"]
