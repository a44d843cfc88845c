"""Figures for the CLI report paths, rendered off-screen to image files."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from bnnkit.cost import CostReport  # noqa: E402


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_cost_sections(reports: list[CostReport], path) -> Path:
    """Stacked per-section OPs bars (BOPs / 64 + FLOPs) for each model."""
    fig, ax = plt.subplots(figsize=(max(5, 1.2 * len(reports) + 2), 4))
    sections: list[str] = []
    for r in reports:
        for s in r.by_section():
            if s not in sections:
                sections.append(s)
    bottom = np.zeros(len(reports))
    names = [r.name for r in reports]
    for s in sections:
        vals = []
        for r in reports:
            row = r.by_section().get(s)
            vals.append(0.0 if row is None else (row.bops / 64 + row.flops) / 1e8)
        ax.bar(names, vals, bottom=bottom, label=s)
        bottom += np.asarray(vals)
    ax.set_ylabel("OPs (1e8)")
    ax.set_title("Operations by section")
    ax.legend(fontsize="small", ncol=2)
    ax.tick_params(axis="x", rotation=30)
    return _save(fig, path)


def plot_cost_frontier(reports: list[CostReport], path) -> Path:
    """Model size against OPs, one labelled point per model."""
    fig, ax = plt.subplots(figsize=(5, 4))
    for r in reports:
        ax.scatter(r.ops / 1e8, r.size_mb)
        ax.annotate(r.name, (r.ops / 1e8, r.size_mb), fontsize="small", xytext=(3, 3), textcoords="offset points")
    ax.set_xlabel("OPs (1e8)")
    ax.set_ylabel("Size (MB)")
    ax.grid(alpha=0.3)
    return _save(fig, path)


def plot_training(rows: list[dict], path) -> Path:
    """Loss and accuracy curves from train CSV rows (string or numeric values)."""
    epochs = [int(r["epoch"]) for r in rows]
    fig, (a1, a2) = plt.subplots(1, 2, figsize=(9, 3.5))
    a1.plot(epochs, [float(r["loss"]) for r in rows], marker="o")
    a1.set_xlabel("epoch")
    a1.set_ylabel("train loss")
    a2.plot(epochs, [float(r["top1"]) for r in rows], marker="o", label="train")
    ev = [(e, float(r["eval_top1"])) for e, r in zip(epochs, rows) if r.get("eval_top1") not in ("", None)]
    if ev:
        a2.plot(*zip(*ev), marker="s", label="eval")
    a2.set_xlabel("epoch")
    a2.set_ylabel("top-1")
    a2.legend()
    for a in (a1, a2):
        a.grid(alpha=0.3)
    return _save(fig, path)


def plot_flip_histogram(counts: dict[str, np.ndarray], path, title: str = "") -> Path:
    """Share of binary weights by number of sign flips, pooled over layers."""
    flat = np.concatenate([c.ravel() for c in counts.values()]) if counts else np.zeros(0, np.int64)
    fig, ax = plt.subplots(figsize=(5, 3.5))
    if flat.size:
        hist = np.bincount(flat)
        ax.bar(np.arange(hist.size), hist / flat.size)
    ax.set_yscale("log")
    ax.set_xlabel("flips per weight")
    ax.set_ylabel("fraction of weights")
    if title:
        ax.set_title(title)
    return _save(fig, path)


def plot_flip_percentiles(rows: list[dict], path) -> Path:
    """Pooled flip percentiles per epoch from flip CSV rows (layer == 'all')."""
    fig, ax = plt.subplots(figsize=(6, 3.5))
    pooled = [r for r in rows if r["layer"] == "all"]
    for opt in sorted({r["optimizer"] for r in pooled}):
        sel = [r for r in pooled if r["optimizer"] == opt]
        ep = [int(r["epoch"]) for r in sel]
        for key in ("p90", "p99"):
            ax.plot(ep, [float(r[key]) for r in sel], marker="o", label=f"{opt} {key}")
    ax.set_xlabel("epoch")
    ax.set_ylabel("flips in epoch")
    ax.legend(fontsize="small")
    ax.grid(alpha=0.3)
    return _save(fig, path)
