"""PNG figures rendered next to the CSV outputs."""

from __future__ import annotations

import os
import tempfile
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.stem}.", suffix=".png")
    os.close(fd)
    try:
        fig.savefig(tmp, dpi=110, bbox_inches="tight")
        os.replace(tmp, path)
    finally:
        plt.close(fig)
        if os.path.exists(tmp):
            os.unlink(tmp)
    return path


def _colors(n: int):
    return plt.cm.viridis(np.linspace(0.1, 0.9, max(n, 1)))


def lr_vs_loss(rows: Sequence[Sequence], path: str | Path, title: str = "") -> Path:
    """rows: (width, log2_lr, mean_loss, n_seeds)."""
    fig, ax = plt.subplots(figsize=(5, 3.6))
    widths = sorted({r[0] for r in rows})
    for c, w in zip(_colors(len(widths)), widths):
        pts = sorted((r[1], r[2]) for r in rows if r[0] == w and np.isfinite(r[2]))
        if pts:
            x, y = zip(*pts)
            ax.plot(x, y, "o-", color=c, ms=3, label=str(w))
    ax.set_xlabel("log2 learning rate")
    ax.set_ylabel("training loss")
    if title:
        ax.set_title(title)
    if widths:
        ax.legend(title="width", fontsize=7)
    return _save(fig, path)


def coord_sizes(rows: Sequence[Sequence], path: str | Path) -> Path:
    """rows: (activation, step, width, mean_metric, n_seeds); one panel per activation."""
    names = sorted({r[0] for r in rows})
    fig, axes = plt.subplots(1, max(len(names), 1), figsize=(3.2 * max(len(names), 1), 3), squeeze=False)
    for ax, name in zip(axes[0], names):
        steps = sorted({r[1] for r in rows if r[0] == name and r[1] > 0})
        for c, t in zip(_colors(len(steps)), steps):
            pts = sorted((r[2], r[3]) for r in rows if r[0] == name and r[1] == t and r[3] > 0)
            if pts:
                x, y = zip(*pts)
                ax.loglog(x, y, "o-", color=c, ms=3, label=f"t={t}")
        ax.set_title(name, fontsize=8)
        ax.set_xlabel("width")
    axes[0][0].set_ylabel("std of x_t - x_0")
    axes[0][0].legend(fontsize=6)
    return _save(fig, path)


def width_scan(widths: Sequence[int], mean_loss: dict[int, Sequence[float]], path: str | Path) -> Path:
    fig, ax = plt.subplots(figsize=(5, 3.6))
    steps = sorted(mean_loss)
    for c, t in zip(_colors(len(steps)), steps):
        ax.plot(widths, mean_loss[t], "o-", color=c, ms=3, label=f"step {t}")
    ax.set_xscale("log", base=2)
    ax.set_xlabel("width")
    ax.set_ylabel("training loss")
    ax.legend(fontsize=7)
    return _save(fig, path)


def primer_curves(alpha: Sequence[float], curves: dict[str, Sequence[float]], path: str | Path) -> Path:
    fig, ax = plt.subplots(figsize=(5, 3.6))
    for c, (label, ys) in zip(_colors(len(curves)), curves.items()):
        ax.plot(alpha, ys, color=c, label=label)
    ax.set_xlabel("alpha")
    ax.set_ylabel("expected loss")
    ax.legend(fontsize=7)
    return _save(fig, path)


def law_sizes(checks, path: str | Path) -> Path:
    fig, ax = plt.subplots(figsize=(5, 3.6))
    for c, chk in zip(_colors(len(checks)), checks):
        ax.loglog(chk.n_list, chk.sizes, "o-", color=c, ms=3,
                  label=f"{chk.kind} ({'corr' if chk.correlated else 'indep'}) slope {chk.slope:.2f}")
    ax.set_xlabel("n")
    ax.set_ylabel("entry size of Av")
    ax.legend(fontsize=6)
    return _save(fig, path)
