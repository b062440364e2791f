"""Report emitters: delimited text outputs plus matplotlib figures.

Every figure is rendered straight to a file next to the delimited output;
nothing opens a window (Agg backend).
"""

from __future__ import annotations

from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .core import FlowField, PointCloud


def write_quiver_text(path, cloud: PointCloud, flow: FlowField) -> None:
    """One `x y z dx dy dz` line per point."""
    arr = np.concatenate([cloud.positions, flow.vectors], axis=1)
    np.savetxt(path, arr, fmt="%.9g")


def plot_flow_quiver(path, cloud: PointCloud, flow: FlowField,
                     title: str = "predicted scene flow") -> None:
    """Top-down (XY) quiver rendering of the flow field."""
    fig, ax = plt.subplots(figsize=(7, 7))
    p = cloud.positions
    v = flow.vectors
    mag = np.linalg.norm(v, axis=1)
    q = ax.quiver(p[:, 0], p[:, 1], v[:, 0], v[:, 1], mag,
                  angles="xy", scale_units="xy", scale=1.0, cmap="viridis",
                  width=0.003)
    fig.colorbar(q, ax=ax, label="|flow| (m)")
    ax.set_xlabel("x (m)")
    ax.set_ylabel("y (m)")
    ax.set_title(title)
    ax.set_aspect("equal")
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)


def plot_training_curves(path, log_lines: Sequence[str],
                         eval_epe: Sequence[float] = ()) -> None:
    """Loss/EPE curves from `step loss epe lr` log lines."""
    rows = np.array([[float(x) for x in line.split()] for line in log_lines])
    fig, axes = plt.subplots(1, 2, figsize=(10, 4))
    axes[0].plot(rows[:, 0], rows[:, 1], lw=0.8)
    axes[0].set_xlabel("step")
    axes[0].set_ylabel("loss")
    axes[0].set_yscale("log")
    axes[1].plot(rows[:, 0], rows[:, 2], lw=0.8, label="train batch EPE")
    if len(eval_epe):
        steps_per_epoch = len(log_lines) / len(eval_epe)
        xs = [(i + 1) * steps_per_epoch for i in range(len(eval_epe))]
        axes[1].plot(xs, eval_epe, "o-", label="held-out EPE")
    axes[1].set_xlabel("step")
    axes[1].set_ylabel("EPE (m)")
    axes[1].legend()
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)


def plot_segmentation(path, cloud: PointCloud, labels: np.ndarray) -> None:
    """Top-down scatter colored by cluster id (-1 in light gray)."""
    fig, ax = plt.subplots(figsize=(7, 7))
    p = cloud.positions
    noise = labels < 0
    ax.scatter(p[noise, 0], p[noise, 1], s=4, c="0.8", label="unclustered")
    ax.scatter(p[~noise, 0], p[~noise, 1], s=6, c=labels[~noise], cmap="tab10")
    ax.set_xlabel("x (m)")
    ax.set_ylabel("y (m)")
    ax.set_title("motion segmentation")
    ax.set_aspect("equal")
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)
