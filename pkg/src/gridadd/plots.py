"""SVG renderings of the analysis exports."""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .analysis import ActionTrace, AttentionRuleMap, PCARecord  # noqa: E402
from .evaluation import HaltingRecord  # noqa: E402


def _save(fig, path: str | Path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)
    return path


def plot_action_trace(trace: ActionTrace, path: str | Path) -> Path:
    fig, (ax, gx) = plt.subplots(1, 2, figsize=(9, max(3, 0.3 * len(trace.symbols))), gridspec_kw={"width_ratios": [1, 2]})
    ax.imshow(trace.probs, cmap="Blues", vmin=0, vmax=1, aspect="auto")
    ax.set_xticks(range(3), ["TLU", "NLP", "NOP"])
    ax.set_yticks(range(len(trace.symbols)), trace.symbols)
    ax.set_title("action probabilities")
    grid = trace.grid
    gx.set_xlim(-0.5, len(grid[0]) - 0.5)
    gx.set_ylim(len(grid) - 0.5, -0.5)
    for i, row in enumerate(grid):
        for j, sym in enumerate(row):
            gx.text(j, i, "" if sym == "_" else sym, ha="center", va="center", fontsize=12)
    gx.set_xticks(np.arange(len(grid[0]) + 1) - 0.5, minor=True)
    gx.set_yticks(np.arange(len(grid) + 1) - 0.5, minor=True)
    gx.grid(which="minor", color="0.7")
    gx.tick_params(which="both", length=0, labelbottom=False, labelleft=False)
    gx.set_title("resulting grid")
    return _save(fig, path)


def plot_attention(amap: AttentionRuleMap, path: str | Path) -> Path:
    panels = list(amap.terms.items()) + [("weights", amap.weights)]
    fig, axes = plt.subplots(1, len(panels), figsize=(2.4 * len(panels), 2.6))
    for ax, (name, m) in zip(axes, panels):
        lim = np.abs(m).max() or 1.0
        ax.imshow(m, cmap="viridis" if name == "weights" else "RdBu_r", vmin=0 if name == "weights" else -lim, vmax=lim)
        ax.set_title(name)
        ax.set_xticks([])
        ax.set_yticks([])
    fig.suptitle(f"head {amap.head} at {amap.position}")
    return _save(fig, path)


def plot_pca(records: Sequence[PCARecord], path: str | Path) -> Path:
    fig, ax = plt.subplots(figsize=(5, 5))
    cmap = plt.get_cmap("tab10")
    for d in "0123456789":
        pts = [(r.pc1, r.pc2) for r in records if r.digit == d]
        if pts:
            xs, ys = zip(*pts)
            ax.scatter(xs, ys, s=6, color=cmap(int(d)), label=d)
    ax.set_xlabel("PC1")
    ax.set_ylabel("PC2")
    ax.legend(markerscale=3, fontsize=7, ncol=2)
    return _save(fig, path)


def plot_halting(records: Sequence[HaltingRecord], path: str | Path) -> Path:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    terms = [r.terms for r in records]
    ax.errorbar(terms, [r.mean_steps for r in records], yerr=[r.std_steps for r in records], marker="o", label="steps")
    ax.set_xlabel("number of terms")
    ax.set_ylabel("steps before halting")
    ax2 = ax.twinx()
    ax2.plot(terms, [r.char_acc for r in records], "s--", color="C1", label="char acc")
    ax2.plot(terms, [r.seq_acc for r in records], "^--", color="C2", label="seq acc")
    ax2.set_ylim(0, 1.05)
    ax2.set_ylabel("accuracy")
    fig.legend(loc="lower left", fontsize=7)
    return _save(fig, path)


def plot_training_steps(curves: Mapping[str, Sequence[tuple[float, float]]], path: str | Path) -> Path:
    """Mean halting steps per epoch for each named run."""
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for name, pts in curves.items():
        if pts:
            xs, ys = zip(*pts)
            ax.plot(xs, ys, label=name)
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean recurrent steps")
    ax.legend(fontsize=7)
    return _save(fig, path)
