"""Report figures: convergence traces, contrast comparison and rendered views."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# no version or timestamp in the files, so reruns give identical bytes
_PNG_META = {"Software": None}


def _save(fig, path) -> None:
    fig.savefig(path, dpi=110, metadata=_PNG_META)
    plt.close(fig)


def plot_trace(t, G, chart_error, path, title: str = "") -> None:
    """Objective and per-chart mean absolute error against iteration.

    ``chart_error`` is (T, M), one column per chart group.
    """
    t, G = np.asarray(t), np.asarray(G, dtype=float)
    err = np.asarray(chart_error, dtype=float).reshape(len(t), -1)
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(10, 3.8))
    ax1.semilogy(t, np.maximum(G, 1e-16), marker="o", ms=3)
    ax1.set_xlabel("iteration")
    ax1.set_ylabel("G")
    ax1.grid(alpha=0.3)
    for m in range(err.shape[1]):
        ax2.plot(t, err[:, m], lw=1, label=f"chart {m}")
    ax2.set_xlabel("iteration")
    ax2.set_ylabel("mean |e| per chart")
    ax2.grid(alpha=0.3)
    if err.shape[1] <= 12:
        ax2.legend(fontsize=7, ncol=2)
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    _save(fig, path)


def plot_contrast(reports: dict, path) -> None:
    """Bar charts of ANSI and RMS contrast per lighting condition."""
    names = list(reports)
    ansi = [reports[n].ansi_ratio for n in names]
    rms = [reports[n].rms_contrast for n in names]
    finite = [a for a in ansi if np.isfinite(a)]
    cap = 1.1 * max(finite) if finite else 1.0
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(8, 3.5))
    bars = ax1.bar(names, [a if np.isfinite(a) else cap for a in ansi], color="0.4")
    for b, a in zip(bars, ansi):
        label = "inf" if not np.isfinite(a) else f"{a:.1f}:1"
        ax1.annotate(label, (b.get_x() + b.get_width() / 2, b.get_height()),
                     ha="center", va="bottom", fontsize=8)
    ax1.set_ylabel("checker contrast (white:black)")
    ax2.bar(names, rms, color="0.6")
    ax2.set_ylabel("RMS contrast")
    fig.tight_layout()
    _save(fig, path)


def plot_views(images: dict, path) -> None:
    """Rendered views side by side, titled by their keys."""
    n = len(images)
    fig, axes = plt.subplots(1, n, figsize=(3.2 * n, 2.8), squeeze=False)
    for ax, (name, img) in zip(axes[0], images.items()):
        ax.imshow(np.asarray(img), interpolation="nearest")
        ax.set_title(name, fontsize=9)
        ax.axis("off")
    fig.tight_layout()
    _save(fig, path)
