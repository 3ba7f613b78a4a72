"""PNG figures drawn next to the CSV outputs of the CLI."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_rmse(curves: dict, path, title="Open-loop position error") -> None:
    """``curves`` maps a label to ``(steps, mean, std)``; draws mean lines with std bands."""
    fig, ax = plt.subplots(figsize=(6, 4))
    for label, (steps, mean, std) in curves.items():
        mean, std = np.asarray(mean), np.asarray(std)
        ax.plot(steps, mean, marker="o", ms=3, label=label)
        ax.fill_between(steps, mean - std, mean + std, alpha=0.2)
    ax.set_xlabel("prediction step")
    ax.set_ylabel("RMSE [mm]")
    ax.set_title(title)
    ax.grid(alpha=0.3)
    ax.legend()
    _save(fig, path)


def plot_topology(curves: dict, path) -> None:
    fig, ax = plt.subplots(figsize=(6, 4))
    for label, agg in curves.items():
        ax.plot(agg["step"], 100 * np.asarray(agg["match_fraction_mean"]), marker="o", ms=3, label=label)
    ax.set_xlabel("prediction step")
    ax.set_ylabel("exact Gauss-code match [%]")
    ax.set_ylim(0, 100)
    ax.grid(alpha=0.3)
    ax.legend()
    _save(fig, path)


def plot_training(history, path) -> None:
    epochs = [r["epoch"] for r in history]
    fig, ax = plt.subplots(figsize=(6, 4))
    for key in ("L_total", "L_recon", "L_pred", "L_KL", "val_L_total"):
        ax.plot(epochs, [r[key] for r in history], label=key)
    ax.set_yscale("log")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.grid(alpha=0.3)
    ax.legend()
    _save(fig, path)


def plot_latency(stats, path) -> None:
    fig, ax = plt.subplots(figsize=(5, 4))
    names = [s.config for s in stats]
    ax.bar(names, [s.mean_ms for s in stats], yerr=[s.std_ms for s in stats], capsize=4)
    ax.set_yscale("log")
    ax.set_ylabel("time per step [ms]")
    ax.grid(alpha=0.3, axis="y")
    _save(fig, path)
