"""Matplotlib rendering of the report figures, written next to the delimited
exports so every plotted number also exists as CSV."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")  # file output only; no display in the report path

import matplotlib.pyplot as plt
import numpy as np


def save_loss_traces(path, traces: dict) -> None:
    """Training-loss trace per restart, log-scaled loss axis.

    ``traces`` maps a restart label to a 1-d array of per-epoch losses.
    """
    fig, ax = plt.subplots(figsize=(7, 4.5))
    for label, trace in traces.items():
        trace = np.asarray(trace)
        if trace.size:
            ax.plot(np.arange(1, trace.size + 1), trace, lw=1.0, label=label)
    ax.set_xlabel("epoch")
    ax.set_ylabel("training loss (per-sample)")
    if any(np.asarray(t).size and np.all(np.asarray(t) > 0) for t in traces.values()):
        ax.set_yscale("log")
    if len(traces) <= 12:
        ax.legend(fontsize=8, ncol=2)
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def save_parity(path, y_true, y_pred, title: str = "") -> None:
    """Measured-versus-predicted scatter with the identity reference line."""
    y_true = np.asarray(y_true)
    y_pred = np.asarray(y_pred)
    fig, ax = plt.subplots(figsize=(5.5, 5.5))
    ax.scatter(y_true, y_pred, s=8, alpha=0.5, edgecolors="none")
    lim = [0.0, max(float(np.max(y_true)), float(np.max(y_pred))) * 1.05]
    ax.plot(lim, lim, "k--", lw=1.0)
    ax.set_xlim(lim)
    ax.set_ylim(lim)
    ax.set_xlabel("measured oil rate [m3/h]")
    ax.set_ylabel("predicted oil rate [m3/h]")
    if title:
        ax.set_title(title)
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def save_area_curves(path, u_grid, curves: dict, reference=None) -> None:
    """Learned area functions over the opening grid, one line per setting,
    plus the mechanistic reference curve."""
    fig, ax = plt.subplots(figsize=(7, 4.5))
    if reference is not None:
        ax.plot(u_grid, np.asarray(reference) * 1e4, "k--", lw=1.5,
                label="mechanistic reference")
    for label, values in curves.items():
        ax.plot(u_grid, np.asarray(values) * 1e4, lw=1.2, label=label)
    ax.set_xlabel("choke opening u")
    ax.set_ylabel("flow area [cm$^2$]")
    ax.legend(fontsize=8)
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
