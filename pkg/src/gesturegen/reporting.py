"""Report rendering: delimited outputs plus matplotlib figures.

Every command that produces a report writes machine-readable documents
(JSON + CSV) and a rendered figure next to them; human summaries go to
stdout from the CLI layer.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def write_report_json(report: dict, path: str | Path) -> None:
    Path(path).write_text(json.dumps(report, indent=2, default=float))


def write_history_csv(history: list[dict], path: str | Path) -> None:
    """Loss history as one CSV row per epoch."""
    if not history:
        Path(path).write_text("")
        return
    keys = list(history[0].keys())
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=keys)
        writer.writeheader()
        writer.writerows(history)


def save_loss_curve(history: list[dict], path: str | Path, title: str = "training loss") -> None:
    fig, ax = plt.subplots(figsize=(7, 4))
    if history:
        epochs = [h.get("epoch", i) for i, h in enumerate(history)]
        for key in history[0]:
            if key == "epoch":
                continue
            ax.plot(epochs, [h[key] for h in history], label=key)
        ax.set_yscale("log")
        ax.legend(fontsize=8)
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def write_metrics_csv(metrics: dict, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["metric", "value"])
        for key, value in metrics.items():
            writer.writerow([key, value])


def save_metrics_figure(metrics: dict, path: str | Path) -> None:
    numeric = {k: v for k, v in metrics.items() if isinstance(v, (int, float)) and np.isfinite(v)}
    fig, ax = plt.subplots(figsize=(6, 4))
    if numeric:
        names = list(numeric)
        ax.bar(names, [numeric[n] for n in names], color="#4878a8")
        for i, n in enumerate(names):
            ax.text(i, numeric[n], f"{numeric[n]:.3g}", ha="center", va="bottom", fontsize=8)
    ax.set_ylabel("value")
    ax.set_title("evaluation metrics")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def save_mask_figure(mask: np.ndarray, path: str | Path) -> None:
    """Timeline view of an injection mask (1 keep, 0 inject)."""
    mask = np.asarray(mask)
    fig, ax = plt.subplots(figsize=(8, 1.8))
    ax.imshow(mask[None, :], aspect="auto", cmap="RdYlGn", vmin=0, vmax=1,
              extent=(0, len(mask), 0, 1))
    ax.set_yticks([])
    ax.set_xlabel("latent frame")
    ax.set_title("injection mask (green = keep, red = inject)")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
