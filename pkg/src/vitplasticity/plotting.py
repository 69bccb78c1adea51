"""Optional PNG figures rendered from the JSON reports.

The reports stay the canonical output; these functions only display them.
"""

from __future__ import annotations

import os
from collections import defaultdict
from typing import Iterable

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .transformer import KINDS  # noqa: E402

KIND_COLORS = {"LN1": "#7f7f7f", "MHA": "#d62728", "LN2": "#bcbd22", "FC1": "#1f77b4", "FC2": "#17becf"}
LINESTYLES = ("-", "--", ":", "-.")
GROUP_ORDER = [k.value for k in KINDS] + ["ALL", "HEAD"]


def _style(ax) -> None:
    ax.spines["right"].set_visible(False)
    ax.spines["top"].set_visible(False)


def _save(fig, path: str | os.PathLike) -> str:
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata={"Software": None})
    plt.close(fig)
    return str(path)


def plot_plasticity(report: dict, path: str | os.PathLike) -> str:
    """Rate-of-change distributions per kind (left) and site means over depth (right)."""
    by_kind = defaultdict(list)
    depth = defaultdict(list)
    for s in report["sites"]:
        by_kind[s["kind"]].extend(s["samples"])
        depth[s["kind"]].append((s["layer"], s["mean"]))
    kinds = [k.value for k in KINDS if k.value in by_kind]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.4))
    parts = ax1.violinplot([by_kind[k] for k in kinds], showmedians=True)
    for body, k in zip(parts["bodies"], kinds):
        body.set_facecolor(KIND_COLORS[k])
    ax1.set_xticks(range(1, len(kinds) + 1), kinds)
    ax1.axhline(1.0, color="k", lw=0.6, ls="--")
    ax1.set_ylabel("rate of change")
    for k in kinds:
        pts = sorted(depth[k])
        ax2.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", ms=3, color=KIND_COLORS[k], label=k)
    ax2.axhline(1.0, color="k", lw=0.6, ls="--")
    ax2.set_xlabel("layer")
    ax2.set_ylabel("mean plasticity")
    ax2.legend(frameon=False, fontsize=8)
    for ax in (ax1, ax2):
        _style(ax)
    return _save(fig, path)


def plot_bounds(report: dict, path: str | os.PathLike) -> str:
    """Upper bound per kind across depth, on a log scale."""
    depth = defaultdict(list)
    for s in report["sites"]:
        depth[s["kind"]].append((s["layer"], s["value"]))
    fig, ax = plt.subplots(figsize=(5.5, 3.4))
    for k in [k.value for k in KINDS if k.value in depth]:
        pts = sorted(depth[k])
        vals = np.maximum([p[1] for p in pts], 1e-300)
        ax.semilogy([p[0] for p in pts], vals, marker="o", ms=3, color=KIND_COLORS[k], label=k)
    ax.set_xlabel("layer")
    ax.set_ylabel("plasticity upper bound")
    ax.legend(frameon=False, fontsize=8)
    _style(ax)
    return _save(fig, path)


def plot_training(logs: Iterable[dict], path: str | os.PathLike) -> str:
    """Gradient norms per step (left) and validation loss per evaluation (right)."""
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.4))
    seen = defaultdict(int)
    for log in logs:
        group = log["config"]["group"]
        color = KIND_COLORS.get(group, "k")
        ls = LINESTYLES[seen[group] % len(LINESTYLES)]
        seen[group] += 1
        label = f"{group} lr={log['config']['lr']:g}"
        ax1.plot([s["step"] for s in log["steps"]], [s["grad_norm"] for s in log["steps"]], lw=0.8, ls=ls, color=color, label=label)
        ax2.plot([e["step"] for e in log["evals"]], [e["val_loss"] for e in log["evals"]], marker="o", ms=2, lw=0.8, ls=ls, color=color, label=label)
    ax1.set_xlabel("step")
    ax1.set_ylabel("gradient norm (pre-clip)")
    ax2.set_xlabel("step")
    ax2.set_ylabel("validation loss")
    ax2.legend(frameon=False, fontsize=7)
    for ax in (ax1, ax2):
        _style(ax)
    return _save(fig, path)


def plot_summary(summary: dict, path: str | os.PathLike) -> str:
    """Mean selected test accuracy per finetuned group."""
    groups = [g for g in GROUP_ORDER if g in summary["groups"]]
    means = [summary["groups"][g]["mean_test_accuracy"] for g in groups]
    fig, ax = plt.subplots(figsize=(5.5, 3.4))
    ax.bar(groups, means, color=[KIND_COLORS.get(g, "#555555") for g in groups])
    ax.set_ylabel("test accuracy (%)")
    lo = min(means) if means else 0.0
    ax.set_ylim(max(0.0, lo - 10.0), 100.0)
    _style(ax)
    return _save(fig, path)
