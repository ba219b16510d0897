"""PNG renderings of the learning curve and module error progression."""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .persistence import LearningCurvePoint  # noqa: E402
from .policy import PIPELINE  # noqa: E402


def plot_learning_curve(points: Sequence[LearningCurvePoint], path: str | Path) -> Path:
    fig, ax = plt.subplots(figsize=(6, 3.5))
    gens = [p.generation for p in points]
    ax.plot(gens, [p.best_selection_mean for p in points], marker="o", ms=3, label="population best")
    ax.plot(gens, [p.best_so_far for p in points], ls="--", lw=1, label="best so far")
    ax.set_xlabel("generation")
    ax.set_ylabel("mean selection reward")
    ax.set_ylim(-0.02, 1.02)
    ax.grid(alpha=0.3)
    ax.legend(loc="lower right")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def plot_error_progression(rows: Sequence[Mapping[str, float]], path: str | Path) -> Path:
    fig, ax = plt.subplots(figsize=(6, 3.5))
    gens = [r["generation"] for r in rows]
    for kind in PIPELINE:
        ax.plot(gens, [r[f"{kind.value}%"] for r in rows], label=kind.value)
    ax.plot(gens, [r["total%"] for r in rows], color="black", lw=2, label="total")
    ax.set_xlabel("generation")
    ax.set_ylabel("failing mini-batch episodes (%)")
    ax.set_ylim(-2, 102)
    ax.grid(alpha=0.3)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)
