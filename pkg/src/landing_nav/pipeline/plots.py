"""Static figures for reports: Qini curves, hourly penalty weights, usage by policy."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .metrics import qini_curve  # noqa: E402

_META = {"Software": None}


def plot_qini(curves: dict[str, tuple[np.ndarray, np.ndarray]], path: str | Path, title: str = "Qini") -> None:
    fig, ax = plt.subplots(figsize=(5, 4))
    for label, (x, q) in curves.items():
        ax.plot(x, q, label=label)
    ax.plot([0, 1], [0, 0], color="grey", lw=0.8)
    ax.set_xlabel("fraction targeted")
    ax.set_ylabel("incremental response (normalised)")
    ax.set_title(title)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, metadata=_META)
    plt.close(fig)


def qini_curves_for(scores: dict[str, np.ndarray], t: np.ndarray, y: np.ndarray, page: int) -> dict:
    rows = (t == 0) | (t == page)
    return {name: qini_curve(s[rows, page - 1], t[rows] == page, y[rows]) for name, s in scores.items()}


def plot_alpha(alpha_by_hour: np.ndarray, V: np.ndarray, path: str | Path) -> None:
    fig, ax = plt.subplots(figsize=(6, 3.5))
    hours = np.arange(24)
    ax.bar(hours, V, color="lightgrey", label="relative traffic V_t")
    ax.plot(hours, alpha_by_hour, marker="o", color="C0", label="alpha_t")
    ax.set_xlabel("hour")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, metadata=_META)
    plt.close(fig)


def plot_usage(summary: dict, path: str | Path) -> None:
    arms = list(summary)
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.bar(arms, [summary[a]["mean_usage"] for a in arms], color="C1")
    ax.set_ylabel("usage seconds per user-day")
    ax.tick_params(axis="x", rotation=30)
    fig.tight_layout()
    fig.savefig(path, metadata=_META)
    plt.close(fig)
