"""Figure renderers for the report artifacts.

Every CSV the CLI writes gets a matching PNG next to it. All renderers
take in-memory data plus a destination path and save atomically; the
Agg backend keeps them headless.
"""

from __future__ import annotations

import os

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .channel import ExperimentRow, PeReport

# keep PNG output free of a host-specific software tag so reruns match
_PNG_METADATA = {"Software": "stegflow"}


def _save(fig, path: str):
    tmp = f"{path}.tmp"
    fig.savefig(tmp, format="png", dpi=110, metadata=_PNG_METADATA)
    plt.close(fig)
    os.replace(tmp, path)


def plot_loss_curve(curve: list[tuple[int, int, float]], path: str):
    """Training NLL (bits per dim) against global step."""
    fig, ax = plt.subplots(figsize=(6, 4))
    if curve:
        steps = np.arange(len(curve))
        ax.plot(steps, [row[2] for row in curve], lw=1.2)
    ax.set_xlabel("step")
    ax.set_ylabel("nll (bits per dim)")
    ax.set_title("training loss")
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    _save(fig, path)


def plot_trace(trace: list[tuple[int, float, float]], path: str):
    """Score-gap trace of the latent optimizer."""
    fig, ax = plt.subplots(figsize=(6, 4))
    if trace:
        ax.plot([row[0] for row in trace], [row[1] for row in trace],
                lw=1.2, label="diff")
        ax.plot([row[0] for row in trace], [row[2] for row in trace],
                lw=1.0, alpha=0.7, label="score")
        ax.legend()
    ax.set_xlabel("step")
    ax.set_ylabel("value")
    ax.set_title("latent optimization")
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    _save(fig, path)


def plot_table(rows: list[ExperimentRow], path: str):
    """Mean Acc against bpp, one series per (channel, source)."""
    fig, ax = plt.subplots(figsize=(6, 4))
    series: dict[tuple[str, str], list[tuple[float, float]]] = {}
    for row in rows:
        if row.acc_mean is None:
            continue
        series.setdefault((row.channel, row.source), []).append((row.bpp, row.acc_mean))
    for (channel, source), pts in sorted(series.items()):
        pts.sort()
        ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o",
                lw=1.0, label=f"{channel}/{source}")
    ax.set_xlabel("bpp")
    ax.set_ylabel("mean Acc")
    ax.set_ylim(0.0, 1.05)
    ax.set_title("recovery accuracy vs payload")
    ax.grid(True, alpha=0.3)
    if series:
        ax.legend(fontsize=8)
    fig.tight_layout()
    _save(fig, path)


def plot_roc(report: PeReport, path: str):
    """Detection ROC from the threshold sweep, with PE and AUC in the title."""
    fig, ax = plt.subplots(figsize=(5, 5))
    order = np.argsort(report.p_fa, kind="stable")
    ax.plot(report.p_fa[order], 1.0 - report.p_md[order], lw=1.2)
    ax.plot([0, 1], [0, 1], ls="--", lw=0.8, color="gray")
    ax.set_xlabel("false alarm rate")
    ax.set_ylabel("detection rate")
    ax.set_title(f"steganalysis ROC (PE={report.pe:.3f}, AUC={report.auc:.3f})")
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1)
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    _save(fig, path)
