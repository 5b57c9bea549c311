"""Figures written next to the CSV outputs (Agg backend, files only)."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def loss_history(path, history, title: str = "training loss") -> Path:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.semilogy(np.arange(len(history)), np.maximum(np.asarray(history), 1e-300))
    ax.set_xlabel("iteration")
    ax.set_ylabel("J")
    ax.set_title(title)
    return _save(fig, path)


def state_norms(path, times, norms) -> Path:
    """L2 norms of every datum against time; ``norms`` has shape (S+1, N)."""
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for j in range(norms.shape[1]):
        ax.plot(times, norms[:, j], label=f"datum {j}")
    ax.set_xlabel("t")
    ax.set_ylabel("||f(t)||")
    if norms.shape[1] <= 10:
        ax.legend(fontsize=7)
    return _save(fig, path)


def terminal_states(path, centers, states) -> Path:
    """Terminal states on a one-dimensional label set (one line per datum)."""
    fig, ax = plt.subplots(figsize=(5, 3.5))
    x = centers[:, 0]
    for j, f in enumerate(states):
        ax.plot(x, f, marker=".", label=f"datum {j}")
    ax.set_xlabel("y")
    ax.set_ylabel("f(y, T)")
    if len(states) <= 10:
        ax.legend(fontsize=7)
    return _save(fig, path)


def spectrum(path, eigenvalues, bound: float | None = None) -> Path:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.semilogy(np.arange(len(eigenvalues)), np.maximum(eigenvalues, 1e-300), "o")
    if bound is not None:
        ax.axhline(bound, color="k", ls="--", label="lower bound")
        ax.legend()
    ax.set_xlabel("index")
    ax.set_ylabel("eigenvalue")
    ax.set_title("Gramian spectrum")
    return _save(fig, path)


def obstruction(path, eps, residuals) -> Path:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ok = (eps > 0) & (residuals > 0)
    ax.loglog(eps[ok], residuals[ok], "o-")
    ax.set_xlabel("eps")
    ax.set_ylabel("||nu|| / eps")
    return _save(fig, path)


def hamiltonian(path, times, H) -> Path:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(times, H, marker=".")
    ax.set_xlabel("t")
    ax.set_ylabel("H")
    ax.set_title("Hamiltonian along the last sweep")
    return _save(fig, path)


def control_heatmap(path, values, times, title: str) -> Path:
    """Heat map of a(y, t) (rows: time nodes, columns: cells)."""
    fig, ax = plt.subplots(figsize=(5, 3.5))
    im = ax.imshow(values, aspect="auto", origin="lower",
                   extent=(0, values.shape[1], times[0], times[-1]), cmap="coolwarm")
    fig.colorbar(im, ax=ax)
    ax.set_xlabel("cell")
    ax.set_ylabel("t")
    ax.set_title(title)
    return _save(fig, path)
