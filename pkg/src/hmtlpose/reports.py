"""CSV reports and their plot renderings."""

from __future__ import annotations

import csv
import math
from pathlib import Path
from typing import Any, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def write_rows(rows: Sequence[dict[str, Any]], path: str | Path) -> Path:
    """Write rows with the union of their keys, in first-seen order."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fields: list[str] = []
    for row in rows:
        fields.extend(k for k in row if k not in fields)
    with path.open("w", newline="") as f:
        writer = csv.DictWriter(f, fields)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _cell(v) for k, v in row.items()})
    return path


def read_rows(path: str | Path) -> list[dict[str, str]]:
    with Path(path).open(newline="") as f:
        return list(csv.DictReader(f))


def _cell(v):
    if isinstance(v, float):
        return "nan" if math.isnan(v) else f"{v:.4f}"
    return v


def plot_curves(epochs: Sequence[dict[str, Any]], path: str | Path) -> Path:
    """Training loss and any MAE columns against epoch."""
    path = Path(path)
    xs = [r["epoch"] for r in epochs]
    mae_keys = [k for k in epochs[0] if k.endswith("_average")]
    fig, axes = plt.subplots(1, 2 if mae_keys else 1, figsize=(9 if mae_keys else 5, 3.5), squeeze=False)
    axes[0][0].plot(xs, [r["train_loss"] for r in epochs], marker=".")
    axes[0][0].set_xlabel("epoch")
    axes[0][0].set_ylabel("train loss")
    if mae_keys:
        ax = axes[0][1]
        for k in mae_keys:
            ax.plot(xs, [r.get(k, float("nan")) for r in epochs], marker=".", label=k)
        ax.set_xlabel("epoch")
        ax.set_ylabel("average MAE (deg)")
        ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def plot_flag_sweep(rows: Sequence[dict[str, Any]], path: str | Path, average: str = "Average") -> Path:
    """Average MAE against flag point, one line per method."""
    path = Path(path)
    fig, ax = plt.subplots(figsize=(5, 3.5))
    methods = []
    for row in rows:
        if row["Method"] not in methods and row["Flag"] != "-":
            methods.append(row["Method"])
    for method in methods:
        pts = [(int(r["Flag"]), float(r[average])) for r in rows if r["Method"] == method]
        ax.plot(*zip(*sorted(pts)), marker="o", label=method)
    for row in rows:
        if row["Flag"] == "-":
            ax.axhline(float(row[average]), linestyle="--", color="gray", label=row["Method"])
    ax.set_xlabel("flag point")
    ax.set_ylabel("average MAE (deg)")
    ax.set_xticks([1, 2, 3, 4])
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def plot_average_bars(rows: Sequence[dict[str, Any]], path: str | Path, average: str = "Average") -> Path:
    """Horizontal bar per report row, labelled by its non-metric cells."""
    path = Path(path)
    labels = [" | ".join(str(v) for k, v in r.items() if not isinstance(v, float)) for r in rows]
    values = [float(r[average]) for r in rows]
    fig, ax = plt.subplots(figsize=(7, 0.35 * len(rows) + 1.2))
    ax.barh(range(len(rows)), values)
    ax.set_yticks(range(len(rows)), labels, fontsize=7)
    ax.invert_yaxis()
    ax.set_xlabel("average MAE (deg)")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path
