"""Figure rendering for evaluation outputs.

Matplotlib is imported lazily with the Agg backend so scoring pipelines can
run headless and without the plotting dependency loaded.
"""

from __future__ import annotations

from typing import Mapping, Sequence


def _plt():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def plot_rejection_curves(
    curves: Mapping[str, Sequence[tuple[float, float]]], out_path: str, title: str = ""
) -> None:
    """One line per labeled curve: rejection fraction vs mean retained quality."""
    plt = _plt()
    fig, ax = plt.subplots(figsize=(6, 4))
    for label, points in curves.items():
        xs = [p[0] for p in points]
        ys = [p[1] for p in points]
        ax.plot(xs, ys, label=label, linewidth=1.5)
    ax.set_xlabel("rejection fraction")
    ax.set_ylabel("mean retained quality")
    if title:
        ax.set_title(title)
    ax.legend(fontsize=8)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_path, dpi=150)
    plt.close(fig)


def plot_metric_matrix(
    matrix: Mapping[str, Mapping[str, float]], metric: str, out_path: str
) -> None:
    """Grouped bars: one group per signal, one bar per dataset."""
    plt = _plt()
    signals = sorted(matrix)
    datasets = sorted({d for row in matrix.values() for d in row})
    fig, ax = plt.subplots(figsize=(max(6, 1.2 * len(signals)), 4))
    width = 0.8 / max(1, len(datasets))
    for j, dataset in enumerate(datasets):
        xs = [i + j * width for i in range(len(signals))]
        ys = [matrix[s].get(dataset, float("nan")) for s in signals]
        ax.bar(xs, ys, width=width, label=dataset)
    ax.set_xticks([i + 0.4 - width / 2 for i in range(len(signals))])
    ax.set_xticklabels(signals, rotation=30, ha="right", fontsize=8)
    ax.set_ylabel(metric)
    ax.axhline(0.0, color="black", linewidth=0.8)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(out_path, dpi=150)
    plt.close(fig)
