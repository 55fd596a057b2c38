"""Tab-separated result tables and matplotlib figures."""

from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .train import INFERENCE_MODES, LADDER_ROWS  # noqa: E402

TABLE_COLUMNS = ("task", "topology", "method", "seeds") + INFERENCE_MODES


def _fmt(v) -> str:
    if v is None:
        return "-"
    if isinstance(v, float):
        return f"{v:.4f}"
    return str(v)


def write_tsv(rows: Sequence[dict], path: str | Path, columns: Sequence[str] | None = None) -> Path:
    """Missing cells are written as ``-``."""
    path = Path(path)
    columns = list(columns or (rows[0].keys() if rows else []))
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r.get(c)) for c in columns])
    return path


def read_tsv(path: str | Path) -> list[dict]:
    with open(path, encoding="utf-8", newline="") as fh:
        return list(csv.DictReader(fh, delimiter="\t"))


def read_train_log(path: str | Path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]


def plot_ladder(table: Sequence[dict], path: str | Path, metric: str = "exact match") -> Path:
    """One panel per (task, topology), grouped bars per ladder row and decoding mode."""
    path = Path(path)
    panels = sorted({(r["task"], r["topology"]) for r in table})
    fig, axes = plt.subplots(1, max(len(panels), 1), figsize=(5 * max(len(panels), 1), 3.6), squeeze=False)
    width = 0.8 / len(INFERENCE_MODES)
    for ax, (task, topo) in zip(axes[0], panels):
        rows = {r["method"]: r for r in table if r["task"] == task and r["topology"] == topo}
        methods = [m for m in LADDER_ROWS if m in rows]
        for j, mode in enumerate(INFERENCE_MODES):
            xs, hs = [], []
            for i, m in enumerate(methods):
                v = rows[m].get(mode)
                if v is not None:
                    xs.append(i + (j - 1) * width)
                    hs.append(v)
            ax.bar(xs, hs, width=width, label=mode)
        ax.set_xticks(range(len(methods)))
        ax.set_xticklabels(methods, rotation=20)
        ax.set_title(f"{task} / {topo}")
        ax.set_ylabel(metric)
    axes[0][0].legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_training_curves(logs: dict[str, Sequence[dict]], path: str | Path) -> Path:
    """Training total loss and dev loss against step, one line per run."""
    path = Path(path)
    fig, (a, b) = plt.subplots(1, 2, figsize=(10, 3.6))
    for name, records in logs.items():
        tr = [r for r in records if r.get("event") == "train"]
        dv = [r for r in records if r.get("event") == "valid" and r.get("dev_loss") is not None]
        a.plot([r["step"] for r in tr], [r["total"] for r in tr], label=name)
        b.plot([r["step"] for r in dv], [r["dev_loss"] for r in dv], marker="o", ms=3, label=name)
    a.set_title("training loss")
    b.set_title("dev loss")
    for ax in (a, b):
        ax.set_xlabel("step")
    if logs:
        b.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_alignment(log_probs, path_labels: Sequence[int], path: str | Path, title: str = "") -> Path:
    """Frame posteriors as an image with the forced-alignment path on top."""
    import numpy as np

    path = Path(path)
    probs = np.exp(np.asarray(log_probs)).T
    fig, ax = plt.subplots(figsize=(6, 3.2))
    ax.imshow(probs, aspect="auto", origin="lower", cmap="Greys")
    ax.plot(range(len(path_labels)), path_labels, color="tab:red", lw=1.2)
    ax.set_xlabel("frame")
    ax.set_ylabel("class")
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
