"""Figures written next to the CSV reports."""

from __future__ import annotations

import math
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

_RC = {
    "font.size": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 120,
}

# no Software/date metadata so re-rendering gives identical bytes
_PNG_META = {"Software": None}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, metadata=_PNG_META, bbox_inches="tight")
    plt.close(fig)
    return path


def rd_curves(report, path) -> Path:
    """One panel per sequence: rate proxy vs PSNR for the anchor and each variant."""
    seqs = report.sequences
    cols = min(len(seqs), 4)
    rows = math.ceil(len(seqs) / cols)
    with plt.rc_context(_RC):
        fig, axes = plt.subplots(rows, cols, figsize=(3.0 * cols, 2.4 * rows), squeeze=False)
        for ax, seq in zip(axes.flat, seqs):
            rates = [report.rates[(seq, qp)] for qp in report.qps]
            for label in ["anchor"] + list(report.variants):
                q = [report.psnr[(seq, qp)][label] for qp in report.qps]
                style = "k--o" if label == "anchor" else "-o"
                ax.plot(rates, q, style, ms=3, lw=1, label=label)
            ax.set_xscale("log")
            ax.set_title(seq, fontsize=8)
            ax.set_xlabel("rate proxy")
            ax.set_ylabel("PSNR (dB)")
        for ax in list(axes.flat)[len(seqs) :]:
            ax.axis("off")
        axes.flat[0].legend(frameon=False)
        fig.tight_layout()
        return _save(fig, path)


def gain_bars(report, path) -> Path:
    """Mean PSNR gain over the anchor per qp, grouped by variant."""
    qps = report.qps
    labels = list(report.variants)
    width = 0.8 / max(len(labels), 1)
    x = np.arange(len(qps))
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(4.5, 2.8))
        for i, label in enumerate(labels):
            ax.bar(x + i * width, [report.mean_gain(label, qp) for qp in qps], width, label=label)
        ax.axhline(0.0, color="k", lw=0.6)
        ax.set_xticks(x + width * (len(labels) - 1) / 2)
        ax.set_xticklabels([f"QP{qp}" for qp in qps])
        ax.set_ylabel("mean ΔPSNR (dB)")
        ax.legend(frameon=False)
        fig.tight_layout()
        return _save(fig, path)


def cross_qp_heatmap(matrix: np.ndarray, qps: Sequence[int], path) -> Path:
    lim = float(np.abs(matrix).max()) or 1.0
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(3.6, 3.0))
        im = ax.imshow(matrix, cmap="RdBu", vmin=-lim, vmax=lim)
        ax.set_xticks(range(len(qps)))
        ax.set_xticklabels([str(q) for q in qps])
        ax.set_yticks(range(len(qps)))
        ax.set_yticklabels([str(q) for q in qps])
        ax.set_xlabel("data QP")
        ax.set_ylabel("model QP")
        for i in range(len(qps)):
            for j in range(len(qps)):
                ax.text(j, i, f"{matrix[i, j]:.2f}", ha="center", va="center", fontsize=7)
        fig.colorbar(im, ax=ax, label="ΔPSNR (dB)")
        fig.tight_layout()
        return _save(fig, path)


def loss_curve(history: Sequence[float], path, title: str = "") -> Path:
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(4.0, 2.6))
        ax.semilogy(np.arange(1, len(history) + 1), history, "-", lw=1.2)
        ax.set_xlabel("epoch")
        ax.set_ylabel("training MSE")
        if title:
            ax.set_title(title, fontsize=9)
        fig.tight_layout()
        return _save(fig, path)
