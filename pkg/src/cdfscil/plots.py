"""Figure rendering for protocol reports (written next to the CSV export)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .protocol import ProtocolReport


def render_accuracy_curves(reports: list[tuple[str, ProtocolReport]], path) -> Path:
    """Average accuracy per session, one line per labeled report."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    for label, report in reports:
        sessions = np.arange(len(report.average_accuracy))
        ax.plot(sessions, [100.0 * a for a in report.average_accuracy], marker="o", label=label)
    ax.set_xlabel("session")
    ax.set_ylabel("average accuracy (%)")
    ax.set_xticks(np.arange(max(len(r.average_accuracy) for _, r in reports)))
    ax.grid(alpha=0.3)
    if len(reports) > 1:
        ax.legend()
    fig.savefig(path, dpi=150, bbox_inches="tight")
    plt.close(fig)
    return path


def render_seed_band(arm: str, reports: list[ProtocolReport], path) -> Path:
    """Mean average-accuracy curve with a +-1 std band over seeds."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    curves = np.array([r.average_accuracy for r in reports]) * 100.0
    sessions = np.arange(curves.shape[1])
    mean = curves.mean(axis=0)
    std = curves.std(axis=0)
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    ax.plot(sessions, mean, marker="o", label=f"{arm} (mean of {len(reports)} seeds)")
    ax.fill_between(sessions, mean - std, mean + std, alpha=0.2)
    ax.set_xlabel("session")
    ax.set_ylabel("average accuracy (%)")
    ax.set_xticks(sessions)
    ax.grid(alpha=0.3)
    ax.legend()
    fig.savefig(path, dpi=150, bbox_inches="tight")
    plt.close(fig)
    return path
