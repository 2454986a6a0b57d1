"""Static figures: loss traces, PR curves and ablation bars."""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence, Union

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .evaluation.ap import RECALL_POINTS  # noqa: E402

PathLike = Union[str, Path]


def _save(fig, path: PathLike) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100, bbox_inches="tight")
    plt.close(fig)


def stage_losses(report: Mapping, path: PathLike) -> None:
    fig, ax = plt.subplots(figsize=(5, 3.2))
    for name, trace in report.get("loss", {}).items():
        if trace:
            ax.plot(np.arange(1, len(trace) + 1), trace, marker=".", label=name)
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean loss")
    if ax.get_lines():
        ax.legend()
    _save(fig, path)


def pr_curves(curves: Mapping[float, Sequence[float]], path: PathLike, thresholds=(0.5, 0.75)) -> None:
    fig, ax = plt.subplots(figsize=(4, 3.2))
    for t in thresholds:
        if t in curves:
            ax.plot(RECALL_POINTS, curves[t], label=f"IoU {t:.2f}")
    ax.set_xlabel("recall")
    ax.set_ylabel("precision")
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1.02)
    if ax.get_lines():
        ax.legend()
    _save(fig, path)


def ablation_bars(labels: Sequence[str], values: Sequence[float], ylabel: str, path: PathLike,
                  errors: Sequence[float] = ()) -> None:
    fig, ax = plt.subplots(figsize=(max(3.5, 0.9 * len(labels) + 1), 3.2))
    x = np.arange(len(labels))
    ax.bar(x, values, yerr=errors if len(errors) else None, capsize=3, color="#4c72b0")
    ax.set_xticks(x)
    ax.set_xticklabels(labels, rotation=20, ha="right")
    ax.set_ylabel(ylabel)
    _save(fig, path)
