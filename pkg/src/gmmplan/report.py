"""Figure rendering for the CLI report paths (headless, file output only)."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def save_sweep_figure(path, components, test_nll) -> None:
    """Held-out NLL against mixture component count."""
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(components, test_nll, marker="o", color="tab:blue")
    ax.set_xlabel("mixture components")
    ax.set_ylabel("held-out NLL")
    ax.set_xticks(list(components))
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def save_training_figure(path, train_nll, heldout_nll) -> None:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    epochs = np.arange(1, len(train_nll) + 1)
    ax.plot(epochs, train_nll, label="train", color="tab:blue")
    if heldout_nll:
        ax.plot(epochs, heldout_nll, label="held out", color="tab:orange")
    ax.set_xlabel("epoch")
    ax.set_ylabel("NLL")
    ax.legend()
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def save_latency_figure(path, millis) -> None:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.hist(millis, bins=60, color="tab:blue", alpha=0.85)
    ax.axvline(float(np.mean(millis)), color="tab:red", label=f"mean {np.mean(millis):.3f} ms")
    ax.set_xlabel("forward-pass time (ms)")
    ax.set_ylabel("count")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def save_state_bound_figure(path, bounds) -> None:
    """Per-state collision bound profile along a trajectory."""
    fig, ax = plt.subplots(figsize=(5.5, 3.5))
    ax.plot(np.arange(len(bounds)), bounds, marker=".", color="tab:blue")
    ax.set_xlabel("trajectory state")
    ax.set_ylabel("collision bound")
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def save_optimization_figure(path, history) -> None:
    fig, ax = plt.subplots(figsize=(5.5, 3.5))
    ax.step(np.arange(len(history)), history, where="post", color="tab:blue")
    ax.set_xlabel("iteration")
    ax.set_ylabel("trajectory collision bound")
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def save_validation_figure(path, bounds, estimates, stderrs) -> None:
    """Bound vs Monte-Carlo estimate; conservative points sit above the line."""
    fig, ax = plt.subplots(figsize=(4.5, 4.5))
    ax.errorbar(estimates, bounds, xerr=3 * np.asarray(stderrs), fmt="o",
                color="tab:blue", ecolor="gray", capsize=2)
    top = max(1e-3, float(np.max(bounds)), float(np.max(estimates)))
    ax.plot([0, top], [0, top], color="tab:red", linestyle="--", label="bound = estimate")
    ax.set_xlabel("Monte-Carlo estimate")
    ax.set_ylabel("conservative bound")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
