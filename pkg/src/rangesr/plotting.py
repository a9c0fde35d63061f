"""Figures written next to the delimited reports."""

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

plt.rcParams.update({
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 150,
    "savefig.bbox": "tight",
})


def plot_class_iou(results, path, title="Per-class IoU"):
    """Grouped bars, one group per class and one bar per configuration."""
    classes = list(results[0].class_iou())
    n = len(results)
    x = np.arange(len(classes))
    width = 0.8 / max(n, 1)
    fig, ax = plt.subplots(figsize=(max(4.0, 0.6 * len(classes) + 1.5), 3.0))
    for i, r in enumerate(results):
        ious = r.class_iou()
        vals = [0.0 if ious.get(c) is None or np.isnan(ious.get(c)) else ious[c] for c in classes]
        ax.bar(x + (i - (n - 1) / 2) * width, vals, width, label=f"{r.name} ({r.miou:.3f})")
    ax.set_xticks(x)
    ax.set_xticklabels(classes, rotation=45, ha="right")
    ax.set_ylim(0, 1)
    ax.set_ylabel("IoU")
    ax.set_title(title)
    ax.legend(fontsize=7, frameon=False)
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_training_curves(records, path):
    epochs = [r["epoch"] for r in records]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(8, 3))
    for name in records[0]["losses"]:
        ax1.plot(epochs, [r["losses"][name] for r in records], label=name)
    ax1.set_xlabel("epoch")
    ax1.set_ylabel("loss")
    ax1.set_yscale("log")
    ax1.legend(fontsize=7, frameon=False)
    vals = [r.get("val_miou") for r in records]
    if any(v is not None for v in vals):
        ax2.plot(epochs, [np.nan if v is None else v for v in vals], color="k")
    ax2.set_xlabel("epoch")
    ax2.set_ylabel("val mIoU")
    ax2b = ax2.twinx()
    ax2b.plot(epochs, [r["lr"] for r in records], color="tab:orange", lw=0.8)
    ax2b.set_ylabel("lr", color="tab:orange")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_range_image(img, path, labels=None):
    rows = 2 if labels is not None else 1
    fig, axes = plt.subplots(rows, 1, figsize=(10, 1.2 * rows + 0.4), squeeze=False)
    rng = np.where(img.valid, img.range, np.nan)
    im = axes[0, 0].imshow(rng, aspect="auto", cmap="viridis", interpolation="nearest")
    axes[0, 0].set_title("range [m]")
    fig.colorbar(im, ax=axes[0, 0], fraction=0.02)
    if labels is not None:
        lab = np.where(labels.labels == labels.ignore_index, np.nan, labels.labels)
        axes[1, 0].imshow(lab, aspect="auto", cmap="tab20", interpolation="nearest")
        axes[1, 0].set_title("labels")
    for ax in axes[:, 0]:
        ax.set_xticks([])
        ax.set_yticks([])
    fig.savefig(path)
    plt.close(fig)
    return path
