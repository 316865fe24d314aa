"""Figure rendering for run directories.  Every figure is drawn from arrays that
are also written to CSV, so plots can be regenerated or redrawn elsewhere."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

__all__ = [
    "plot_trajectory",
    "plot_horizon",
    "plot_loss",
    "plot_relerr",
    "plot_fields",
    "plot_lstm",
]


def _save(fig, path) -> None:
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_trajectory(path, times, states, labels=None, pred_times=None, pred=None, title: str = "") -> None:
    fig, ax = plt.subplots(figsize=(6, 3.5))
    n = states.shape[1]
    labels = labels or [f"x{i + 1}" for i in range(n)]
    for i in range(n):
        line = ax.plot(times, states[:, i], label=labels[i])[0]
        if pred is not None:
            ax.plot(pred_times, pred[:, i], "--", color=line.get_color())
    ax.set_xlabel("t")
    ax.set_title(title)
    ax.legend(fontsize=8)
    _save(fig, path)


def plot_horizon(path, gap, direct_err, rollout_err, title: str = "") -> None:
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.semilogy(gap[1:], direct_err[1:], label="direct")
    ax.semilogy(gap[1:], rollout_err[1:], label="recursive")
    ax.set_xlabel("|t2 - t1|")
    ax.set_ylabel("error")
    ax.set_title(title)
    ax.legend()
    _save(fig, path)


def plot_loss(path, epochs, series: dict[str, np.ndarray], title: str = "") -> None:
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for name, vals in series.items():
        ax.semilogy(epochs, vals, label=name)
    ax.set_xlabel("epoch")
    ax.set_title(title)
    ax.legend()
    _save(fig, path)


def plot_relerr(path, times, series: dict[str, np.ndarray], title: str = "") -> None:
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for name, vals in series.items():
        ax.plot(times, vals, marker="o", ms=3, label=name)
    ax.set_xlabel("t [s]")
    ax.set_ylabel("relative error")
    ax.set_title(title)
    ax.legend()
    _save(fig, path)


def plot_fields(path, panels: list[tuple[str, np.ndarray]], title: str = "") -> None:
    """Row of ``eta`` images sharing one colour scale."""
    vmax = max(float(np.max(np.abs(p))) for _, p in panels) or 1.0
    fig, axes = plt.subplots(1, len(panels), figsize=(3 * len(panels), 3))
    axes = np.atleast_1d(axes)
    for ax, (name, img) in zip(axes, panels):
        im = ax.imshow(img, origin="lower", cmap="RdBu_r", vmin=-vmax, vmax=vmax)
        ax.set_title(name, fontsize=9)
        ax.set_xticks([])
        ax.set_yticks([])
    fig.colorbar(im, ax=list(axes), shrink=0.8)
    if title:
        fig.suptitle(title)
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_lstm(path, times, errors, twin_gap=None, twin_err=None, title: str = "") -> None:
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.semilogy(times, errors, label="LSTM rollout")
    if twin_gap is not None:
        ax.semilogy(twin_gap, twin_err, label="twin direct")
    ax.set_xlabel("horizon")
    ax.set_ylabel("error")
    ax.set_title(title)
    ax.legend()
    _save(fig, path)
