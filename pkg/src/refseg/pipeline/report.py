"""Figure rendering for the train/eval/infer report paths.

All figures go to files (Agg backend); no interactive display.
"""

from __future__ import annotations

import os

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from ..metrics import MetricsReport, PRECISION_THRESHOLDS


def save_loss_curves(log_lines: list, path: str) -> None:
    """Per-step loss components from the tab-separated training log."""
    rows = [line.split("\t") for line in log_lines[1:]]
    steps = [int(r[0]) for r in rows]
    fig, ax = plt.subplots(figsize=(7, 4.5))
    for idx, label in ((1, "mask"), (2, "referring"), (3, "diversity"), (4, "total")):
        ax.plot(steps, [float(r[idx]) for r in rows], label=label, linewidth=1.2)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend(frameon=False)
    ax.set_title("training loss")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_metrics_figure(report: MetricsReport, path: str) -> None:
    labels = ["oIoU", "mIoU"] + [f"P@{z:g}" for z in PRECISION_THRESHOLDS] + \
        ["mAP", "J", "F", "J&F"]
    values = [report.overall_iou, report.mean_iou] + \
        [report.precision_at[z] for z in PRECISION_THRESHOLDS] + \
        [report.map, report.j, report.f, report.jf]
    fig, ax = plt.subplots(figsize=(8, 4))
    bars = ax.bar(labels, values, color="#4878a8")
    ax.set_ylim(0, 1.05)
    ax.bar_label(bars, fmt="%.2f", fontsize=8)
    ax.set_ylabel("score")
    ax.set_title("evaluation metrics")
    plt.setp(ax.get_xticklabels(), rotation=30, ha="right")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_iou_histogram(ious: list, path: str) -> None:
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.hist(ious, bins=np.linspace(0, 1, 21), color="#6a9a58", edgecolor="white")
    ax.set_xlabel("per-frame IoU")
    ax.set_ylabel("frames")
    ax.set_title("IoU distribution")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_overlay(frames: np.ndarray, masks: np.ndarray, path: str,
                 gt_masks: np.ndarray | None = None) -> None:
    """Panel of frames with the predicted mask tinted red (and GT contoured)."""
    t = frames.shape[0]
    fig, axes = plt.subplots(1, t, figsize=(3 * t, 3.2), squeeze=False)
    for ti in range(t):
        ax = axes[0, ti]
        img = frames[ti].astype(np.float64) / 255.0
        tint = img.copy()
        m = masks[ti].astype(bool)
        tint[m] = 0.45 * img[m] + 0.55 * np.array([1.0, 0.15, 0.15])
        ax.imshow(tint)
        if gt_masks is not None:
            ax.contour(gt_masks[ti], levels=[0.5], colors="yellow", linewidths=1.0)
        ax.set_title(f"frame {ti}", fontsize=9)
        ax.axis("off")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
