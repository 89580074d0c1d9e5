"""Figure and report rendering for the CLI: detection overlays, loss
curves, per-category metric bars, and the CSV files they sit next to."""

from __future__ import annotations

import csv

import matplotlib

matplotlib.use("Agg")
import matplotlib.patches as patches
import matplotlib.pyplot as plt
import numpy as np

_BOX_COLORS = ["#ff4444", "#44dd44", "#4488ff", "#ffcc00", "#dd44dd", "#44dddd"]


def draw_detections(image: np.ndarray, detections, out_path, query: str | None = None, category_names=None):
    """Write the image with boxes, labels, and scores drawn on top.

    An empty detection list writes an unmodified copy of the image instead
    of a rendered figure.
    """
    if not detections:
        from PIL import Image

        Image.fromarray(image).save(out_path)
        return

    h, w = image.shape[:2]
    fig, ax = plt.subplots(figsize=(max(4, w / 64), max(4, h / 64)))
    ax.imshow(image)
    for i, det in enumerate(detections):
        color = _BOX_COLORS[(det.category_id - 1) % len(_BOX_COLORS)]
        b = det.box
        ax.add_patch(
            patches.Rectangle(
                (b.x1, b.y1), b.width, b.height, fill=False, edgecolor=color, linewidth=2
            )
        )
        name = (
            category_names.get(det.category_id, str(det.category_id))
            if category_names
            else str(det.category_id)
        )
        ax.text(
            b.x1,
            max(b.y1 - 2, 0),
            f"{name} {det.score:.2f}",
            color="white",
            fontsize=8,
            bbox={"facecolor": color, "alpha": 0.8, "pad": 1, "edgecolor": "none"},
        )
    if query:
        ax.set_title(query, fontsize=10)
    ax.set_axis_off()
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)


def plot_loss_curve(history: list[dict], out_path):
    """Total loss plus components over steps."""
    steps = [h["step"] for h in history]
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(steps, [h["total"] for h in history], label="total", linewidth=1.5)
    for key in ("rpn_cls", "rpn_reg", "box_cls", "box_reg"):
        ax.plot(steps, [h[key] for h in history], label=key, linewidth=0.8, alpha=0.7)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)


def plot_metric_bars(table: dict[str, float], out_path, title: str = ""):
    """Bar chart for a name -> value metric table."""
    fig, ax = plt.subplots(figsize=(max(4, 0.9 * len(table)), 4))
    names = list(table)
    values = [table[n] for n in names]
    ax.bar(range(len(names)), values, color="#4488cc")
    ax.set_xticks(range(len(names)))
    ax.set_xticklabels(names, rotation=30, ha="right", fontsize=8)
    ax.set_ylim(0, 1.05)
    if title:
        ax.set_title(title, fontsize=10)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)


def plot_ablation(rows: list[dict], metric_keys: list[str], out_path):
    """Grouped bars: one cluster per variant, one bar per metric."""
    done = [r for r in rows if r.get("status") == "ok"]
    if not done:
        return
    labels = [r["variant"] for r in done]
    fig, ax = plt.subplots(figsize=(max(5, 1.2 * len(done)), 4))
    width = 0.8 / len(metric_keys)
    xs = np.arange(len(done))
    for j, key in enumerate(metric_keys):
        vals = [r.get(key) if r.get(key) is not None else 0.0 for r in done]
        ax.bar(xs + j * width, vals, width=width, label=key)
    ax.set_xticks(xs + width * (len(metric_keys) - 1) / 2)
    ax.set_xticklabels(labels, rotation=30, ha="right", fontsize=7)
    ax.set_ylim(0, 1.05)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)


def write_history_csv(history: list[dict], path):
    if not history:
        return
    keys = list(history[0])
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=keys)
        writer.writeheader()
        writer.writerows(history)


def write_rows_csv(rows: list[dict], path):
    if not rows:
        return
    keys: list[str] = []
    for row in rows:
        for k in row:
            if k not in keys:
                keys.append(k)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=keys)
        writer.writeheader()
        writer.writerows(rows)
