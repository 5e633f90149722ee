"""Figures written next to the CLI's JSON output (matplotlib, Agg backend)."""

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
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_loss_curves(log: list[dict], path) -> Path:
    """Per-iteration training losses, one panel per logged quantity."""
    keys = [k for k in ("l_rec", "l_rec_adv", "l_dis", "critic", "l_adv") if any(k in e for e in log)]
    fig, axes = plt.subplots(len(keys), 1, figsize=(6, 1.8 * len(keys)), sharex=True, squeeze=False)
    for ax, key in zip(axes[:, 0], keys):
        its = [e["iteration"] for e in log if key in e]
        ax.plot(its, [e[key] for e in log if key in e], lw=1)
        ax.set_ylabel(key)
        ax.grid(alpha=0.3)
    axes[-1, 0].set_xlabel("iteration")
    return _save(fig, path)


def plot_evaluation(report: dict, path) -> Path:
    """Histograms of per-pair Dice, Jaccard and folding counts."""
    pairs = report["pairs"]
    fig, axes = plt.subplots(1, 3, figsize=(10, 3))
    for ax, key in zip(axes, ("dice", "jacc", "folding_count")):
        values = np.array([p[key] for p in pairs], dtype=float)
        ax.hist(values, bins=min(20, max(len(values), 1)))
        ax.set_title(f"{key} (mean {values.mean():.4g})" if len(values) else key)
        ax.set_xlabel(key)
    axes[0].set_ylabel("pairs")
    return _save(fig, path)


def plot_bench(rows: list[dict], path) -> Path:
    """Latency and parameter count against cascade count."""
    n = [r["cascades"] for r in rows]
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.plot(n, [r["latency_seconds"] for r in rows], "o-", label="latency")
    ax.set_xlabel("cascades")
    ax.set_ylabel("median latency (s)")
    ax.set_xticks(n)
    twin = ax.twinx()
    twin.plot(n, [r["param_count"] / 1e6 for r in rows], "s--", color="tab:orange", label="parameters")
    twin.set_ylabel("parameters (M)")
    fig.legend(loc="upper left", bbox_to_anchor=(0.15, 0.9))
    return _save(fig, path)
