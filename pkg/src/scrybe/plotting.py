"""Figures written next to the CLI's tab-delimited reports."""

from __future__ import annotations

import math
import os
from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .audit import AuditReport  # noqa: E402


def _save(fig, path: str | os.PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def selection_histogram(counts: Mapping[str, int], rounds: int, path: str | os.PathLike) -> Path:
    """Blocks produced per miner against the uniform expectation and a 5-sigma band."""
    labels = list(counts)
    n = len(labels)
    expected = rounds / n
    sd = math.sqrt(rounds * (1 / n) * (1 - 1 / n))
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.bar(labels, [counts[k] for k in labels], color="#4c72b0")
    ax.axhline(expected, color="black", linewidth=1, label=f"expected {expected:.0f}")
    if sd:
        ax.axhspan(expected - 5 * sd, expected + 5 * sd, color="grey", alpha=0.2, label="±5 sd")
    ax.set_xlabel("miner")
    ax.set_ylabel("blocks produced")
    ax.set_title(f"producer selection over {rounds} rounds")
    ax.legend(loc="lower right")
    return _save(fig, path)


def message_complexity(
    ns: Sequence[int], per_node: Sequence[float], fit: tuple[float, float, float], path: str | os.PathLike
) -> Path:
    slope, intercept, r2 = fit
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(ns, per_node, "o", label="measured")
    xs = [min(ns), max(ns)]
    ax.plot(xs, [slope * x + intercept for x in xs], "-", label=f"{slope:.2f} n {intercept:+.2f}, R² {r2:.4f}")
    ax.set_xlabel("miners (n)")
    ax.set_ylabel("messages per node per round")
    ax.legend()
    return _save(fig, path)


def audit_findings(report: AuditReport, path: str | os.PathLike) -> Path:
    s = report.summary
    names = ["ok", "pending", "warnings", "errors", "block_errors", "store_diffs"]
    colors = ["#55a868", "#8172b2", "#ccb974", "#c44e52", "#c44e52", "#dd8452"]
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.bar(names, [s.get(k, 0) for k in names], color=colors)
    ax.set_ylabel("count")
    ax.set_title(f"audit {report.verdict}")
    ax.tick_params(axis="x", rotation=20)
    return _save(fig, path)
