"""Figures written next to the delimited reports. Non-interactive backend only."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 120,
    "savefig.bbox": "tight",
}


def new_figure(ncols: int = 1, width: float = 4.5, height: float = 3.0):
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, ncols, figsize=(width * ncols, height))
    return fig, axes


def save(fig, path) -> None:
    with plt.rc_context(STYLE):
        fig.savefig(path, metadata={"Software": None})
    plt.close(fig)


def plot_training_curves(records: list[dict], path) -> None:
    """Step loss on the left; per-epoch val accuracy (raw and EMA) on the right."""
    steps = [r for r in records if r["kind"] == "step"]
    epochs = [r for r in records if r["kind"] == "epoch"]
    fig, (ax_l, ax_a) = new_figure(ncols=2)
    ax_l.plot([r["step"] for r in steps], [r["loss"] for r in steps], lw=0.8, color="tab:blue")
    ax_l.set_xlabel("step")
    ax_l.set_ylabel("train loss")
    ax_l.set_yscale("log")
    for key, label, style in (("val_top1", "val top-1", "-"), ("ema_top1", "EMA top-1", "--"), ("val_top5", "val top-5", ":")):
        pts = [(r["epoch"], r[key]) for r in epochs if r.get(key) is not None]
        if pts:
            x, y = zip(*pts)
            ax_a.plot(x, y, style, lw=1.0, label=label)
    ax_a.set_xlabel("epoch")
    ax_a.set_ylabel("accuracy")
    ax_a.set_ylim(-0.02, 1.02)
    if ax_a.lines:
        ax_a.legend(frameon=False)
    save(fig, path)


def plot_class_counts(names: list[str], counts: list[int], path, entropy: float | None = None) -> None:
    fig, ax = new_figure(width=max(4.5, 0.12 * len(names)))
    ax.bar(range(len(counts)), counts, width=0.8, color="tab:gray")
    ax.set_xlabel("class")
    ax.set_ylabel("images")
    if len(names) <= 30:
        ax.set_xticks(range(len(names)), names, rotation=90)
    if entropy is not None:
        ax.set_title(f"normalized entropy {entropy:.4f}")
    save(fig, path)


def plot_scan_bench(rows: list[dict], path) -> None:
    """Seconds per call against sequence length, one line per implementation."""
    fig, ax = new_figure()
    for name in sorted({r["impl"] for r in rows}):
        pts = sorted((r["length"], r["seconds"]) for r in rows if r["impl"] == name)
        x, y = zip(*pts)
        ax.plot(x, y, "o-", ms=3, lw=1.0, label=name)
    ax.set_xscale("log", base=2)
    ax.set_yscale("log")
    ax.set_xlabel("sequence length")
    ax.set_ylabel("seconds per call")
    ax.legend(frameon=False)
    save(fig, path)
