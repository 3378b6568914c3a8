"""Figure rendering for the report paths.

Every eval/train command drops PNG figures next to its NDJSON/TSV output:
loss curves, trajectory panels (2-d outputs), remove-series heatmaps and
per-level bars.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def loss_curve(history, out_path):
    """history: list of {epoch, train_loss, val_loss}."""
    epochs = [h["epoch"] for h in history]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(epochs, [h["train_loss"] for h in history], label="train", lw=1.5)
    if any(np.isfinite(h.get("val_loss", np.nan)) for h in history):
        ax.plot(epochs, [h["val_loss"] for h in history], label="validation", lw=1.5)
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.legend(frameon=False)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_path, dpi=130)
    plt.close(fig)
    return out_path


def trajectory_panel(scenes, forecasts, out_path, max_scenes=4):
    """2-d trajectories: input history (light), truth (solid), mean (dashed)."""
    n = min(len(scenes), max_scenes)
    if n == 0:
        return None
    fig, axes = plt.subplots(1, n, figsize=(4 * n, 4), squeeze=False)
    cmap = plt.get_cmap("tab10")
    for k in range(n):
        ax = axes[0, k]
        rec, fc = scenes[k], forecasts[k]
        for s in range(rec.x.shape[0]):
            color = cmap(s % 10)
            ax.plot(rec.x[s, :, 0], rec.x[s, :, 1], color=color, alpha=0.35, lw=1)
            ax.plot(rec.y[s, :, 0], rec.y[s, :, 1], color=color, lw=1.8)
            ax.plot(fc.mean[s, :, 0], fc.mean[s, :, 1], color=color, lw=1.4, ls="--")
            ax.scatter([rec.y[s, -1, 0]], [rec.y[s, -1, 1]], color=color, s=12)
        ax.set_title(f"scene {rec.scene_id}")
        ax.set_aspect("equal", adjustable="datalim")
        ax.grid(alpha=0.25)
    fig.suptitle("history (light) / truth (solid) / predicted mean (dashed)")
    fig.tight_layout()
    fig.savefig(out_path, dpi=130)
    plt.close(fig)
    return out_path


def remove_grid_heatmap(cells, out_path, metric="ade"):
    """Heatmap of a metric over the removal grid (two removal axes)."""
    combos = [tuple(c["removed"]) for c in cells]
    if not combos or len(combos[0]) != 2:
        return None
    k0 = max(c[0] for c in combos) + 1
    k1 = max(c[1] for c in combos) + 1
    grid = np.full((k0, k1), np.nan)
    for cell in cells:
        a, b = cell["removed"]
        grid[a, b] = cell["metrics"][metric]
    fig, ax = plt.subplots(figsize=(1.1 * k1 + 2, 1.0 * k0 + 1.5))
    im = ax.imshow(grid, cmap="viridis")
    for a in range(k0):
        for b in range(k1):
            ax.text(b, a, f"{grid[a, b]:.3g}", ha="center", va="center",
                    color="white", fontsize=8)
    ax.set_xlabel("removed from class 2")
    ax.set_ylabel("removed from class 1")
    ax.set_title(f"{metric} under series removal")
    fig.colorbar(im, ax=ax, shrink=0.8)
    fig.tight_layout()
    fig.savefig(out_path, dpi=130)
    plt.close(fig)
    return out_path


def per_level_bars(table, out_path):
    """Bar chart of RMSE and NLL per aggregation level."""
    levels = sorted(table)
    fig, axes = plt.subplots(1, 2, figsize=(9, 4))
    for ax, key in zip(axes, ("rmse", "nll")):
        ax.bar([str(lv) for lv in levels], [table[lv][key] for lv in levels],
               color="tab:blue", width=0.6)
        ax.set_xlabel("aggregation level (0 = root)")
        ax.set_ylabel(key)
        ax.grid(alpha=0.25, axis="y")
    fig.tight_layout()
    fig.savefig(out_path, dpi=130)
    plt.close(fig)
    return out_path
