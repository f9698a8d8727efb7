"""Figures written next to the CSV outputs (non-interactive Agg backend)."""

from __future__ import annotations

import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_sigma_decay(curves: dict, path, tol: float | None = 1e-5) -> Path:
    """Semilog plot of ``Sigma(r)``; ``curves`` maps a label to ``(r, Sigma)`` rows."""
    fig, ax = plt.subplots(figsize=(5.5, 4))
    for label, rows in curves.items():
        r, s = np.array(rows, dtype=float).T
        keep = s > 0
        ax.semilogy(r[keep], s[keep], label=label)
    if tol is not None:
        ax.axhline(tol, color="k", ls="--", lw=0.8, label=f"tol = {tol:g}")
    ax.set_xlabel("reduced dimension r")
    ax.set_ylabel(r"$\Sigma(r)$")
    ax.legend()
    ax.grid(True, which="both", alpha=0.3)
    return _save(fig, path)


def plot_objective_boxes(objectives: dict, path, ylabel: str = "objective") -> Path:
    """Box plot of the final objectives per algorithm (failed runs left out)."""
    fig, ax = plt.subplots(figsize=(5.5, 4))
    names = list(objectives)
    data = [[v for v in objectives[a] if not math.isnan(v)] for a in names]
    ax.boxplot(data)
    ax.set_xticks(range(1, len(names) + 1), names)
    ax.set_ylabel(ylabel)
    ax.grid(True, axis="y", alpha=0.3)
    return _save(fig, path)


def plot_ipm_trace(traces: dict, path) -> Path:
    """IPM iterations and average GMRES iterations over the penalty parameter.

    ``traces`` maps a label to rows with keys ``epsilon``, ``nli``, ``agmres``.
    """
    fig, (a1, a2) = plt.subplots(1, 2, figsize=(9, 3.8), sharex=True)
    for (label, rows), marker in zip(traces.items(), "os^vd"):
        if not rows:
            continue
        eps = [r["epsilon"] for r in rows]
        a1.semilogx(eps, [r["nli"] for r in rows], marker, label=label, mfc="none")
        a2.semilogx(eps, [r["agmres"] for r in rows], marker, label=label, mfc="none")
    for ax, lab in ((a1, "NLI"), (a2, "aGMRES")):
        ax.set_xlabel(r"$\varepsilon$")
        ax.set_ylabel(lab)
        ax.invert_xaxis()
        ax.grid(True, alpha=0.3)
    a1.legend()
    return _save(fig, path)


def plot_control(u, n_t: int, path, title: str = "") -> Path:
    """Control pattern as an image: time steps by sources."""
    U = np.asarray(u, dtype=float).reshape(n_t, -1)
    fig, ax = plt.subplots(figsize=(5, 3.5))
    im = ax.imshow(U, aspect="auto", cmap="Greys", vmin=0, vmax=1, interpolation="nearest")
    ax.set_xlabel("source")
    ax.set_ylabel("time step")
    if title:
        ax.set_title(title)
    fig.colorbar(im, ax=ax)
    return _save(fig, path)


def plot_residual_histories(histories, path) -> Path:
    fig, ax = plt.subplots(figsize=(5.5, 4))
    for mu, hist in histories:
        ax.semilogy(hist, lw=0.8, label=f"mu={mu:.0e}")
    ax.set_xlabel("GMRES iteration")
    ax.set_ylabel("relative residual")
    if len(histories) <= 12:
        ax.legend(fontsize=7)
    ax.grid(True, which="both", alpha=0.3)
    return _save(fig, path)
