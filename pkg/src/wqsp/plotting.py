"""Figures written next to the CSV/JSON outputs (Agg backend, PNG)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path):
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path, dpi=110, metadata={"Software": None})
    plt.close(fig)
    return path


def occupation_bar(result, path):
    """Occupation fraction per node, selected nodes highlighted."""
    nodes = result.nodes
    occ = [result.occupation[n] for n in nodes]
    chosen = set(result.selected)
    fig, ax = plt.subplots(figsize=(max(4.0, 0.18 * len(nodes) + 2), 3.2))
    ax.bar(range(len(nodes)), occ,
           color=["tab:red" if n in chosen else "tab:blue" for n in nodes])
    ax.set_xticks(range(len(nodes)))
    ax.set_xticklabels(nodes, rotation=90, fontsize=7 if len(nodes) > 20 else 9)
    ax.set_ylim(0, 1.05)
    ax.set_ylabel("occupation")
    ax.set_title(f"r = {result.r}")
    return _save(fig, path)


def placement_matrix(result, path):
    """Binary nodes x steps matrix of per-step winning sets."""
    P = result.indicator_matrix()
    fig, ax = plt.subplots(figsize=(6, max(2.5, 0.12 * len(result.nodes) + 1)))
    ax.imshow(P, aspect="auto", cmap="Greys", interpolation="nearest", vmin=0, vmax=1)
    if len(result.nodes) <= 30:
        ax.set_yticks(range(len(result.nodes)))
        ax.set_yticklabels(result.nodes, fontsize=8)
    ax.set_xlabel("hydraulic step")
    ax.set_ylabel("node")
    return _save(fig, path)


def metric_trace(traces, path):
    """``f(S_j)`` against the number of sensors for each (step, profile) run."""
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for (k, i), tr in sorted(traces.items()):
        ax.plot(range(len(tr.values)), tr.values, color="tab:blue", alpha=0.3, lw=0.8)
    ax.set_xlabel("number of sensors")
    ax.set_ylabel("f(S)")
    return _save(fig, path)


def step_values(values, path, deltas=None):
    """Per-step metric of the chosen set, with random-baseline deltas if given."""
    fig, axes = plt.subplots(1, 2 if deltas is not None else 1, figsize=(9 if deltas is not None else 5, 3.3))
    axes = np.atleast_1d(axes)
    axes[0].plot(range(len(values)), values, marker="o", ms=3)
    axes[0].set_xlabel("hydraulic step")
    axes[0].set_ylabel("f(S*)")
    if deltas is not None:
        d = np.asarray(deltas)
        for s in range(d.shape[1]):
            axes[1].plot(range(d.shape[0]), d[:, s], lw=0.8, alpha=0.7)
        axes[1].axhline(0.0, color="k", lw=0.8)
        axes[1].set_xlabel("hydraulic step")
        axes[1].set_ylabel("f(random) - f(S*)")
    return _save(fig, path)


def node_series(trajectory, nodes, path):
    """Concentration against time at the given nodes."""
    fig, ax = plt.subplots(figsize=(6, 3.5))
    t = np.asarray(trajectory.times) / 3600.0
    for n in nodes:
        ax.plot(t, trajectory.node_series(n), label=n, lw=1)
    ax.set_xlabel("time [h]")
    ax.set_ylabel("concentration [mg/L]")
    if len(nodes) <= 12:
        ax.legend(fontsize=7, ncol=2)
    return _save(fig, path)


def rmse_series(reports: dict, path):
    """Filter RMSE over time, one line per labelled run."""
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for label, rep in reports.items():
        ax.plot(np.asarray(rep.times) / 3600.0, rep.rmse, label=label, lw=1)
    ax.set_xlabel("time [h]")
    ax.set_ylabel("RMSE [mg/L]")
    ax.legend(fontsize=7)
    return _save(fig, path)
