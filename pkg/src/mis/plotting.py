"""Figures for simulation reports, written as PNG files next to the CSV output."""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .simnet.metrics import MetricsReport  # noqa: E402

PHASES = (("propose_us", "propose"), ("vote_us", "vote"), ("commit_us", "commit"),
          ("storage_us", "storage"))


def phase_breakdown(report: MetricsReport, path: str | Path, title: str = "") -> Path:
    """Stacked per-height latency of the four write phases."""
    rows = report.rows
    heights = [r.height for r in rows]
    fig, ax = plt.subplots(figsize=(8, 4))
    bottom = [0.0] * len(rows)
    for attr, label in PHASES:
        vals = [getattr(r, attr) / 1000 for r in rows]
        ax.bar(heights, vals, bottom=bottom, label=label, width=0.8)
        bottom = [b + v for b, v in zip(bottom, vals)]
    ax.set_xlabel("block height")
    ax.set_ylabel("latency (ms)")
    ax.set_title(title or "write latency by phase")
    ax.legend(loc="upper center", bbox_to_anchor=(0.5, -0.15), ncol=len(PHASES), fontsize="small")
    return _save(fig, path)


def resolve_histogram(samples: Sequence[float], path: str | Path, title: str = "") -> Path:
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.hist(list(samples), bins=40)
    if samples:
        mean = sum(samples) / len(samples)
        ax.axvline(mean, color="black", linestyle="--", label=f"mean {mean:.2f} ms")
        ax.legend(fontsize="small")
    ax.set_xlabel("resolve latency (ms)")
    ax.set_ylabel("requests")
    ax.set_title(title or "resolve latency")
    return _save(fig, path)


def sweep_plot(phase_means: Mapping[int, Mapping[str, float]], path: str | Path,
               title: str = "") -> Path:
    """Mean phase latency against consortium size."""
    sizes = sorted(phase_means)
    fig, ax = plt.subplots(figsize=(6, 4))
    for _, label in PHASES + (("", "total"),):
        key = f"{label}_ms"
        ax.plot(sizes, [phase_means[n].get(key, 0.0) for n in sizes], marker="o", label=label)
    ax.set_xlabel("nodes")
    ax.set_ylabel("mean latency (ms)")
    ax.set_title(title or "latency against node count")
    ax.legend(fontsize="small")
    return _save(fig, path)


def _save(fig, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path
