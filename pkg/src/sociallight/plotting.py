"""Optional PNG rendering of training curves. Only imported when plots are requested."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

PANELS = (
    ("mean_return", "mean return"),
    ("avg_speed", "avg speed (m/s)"),
    ("avg_intersection_delay", "intersection delay (s)"),
)


def plot_curves(curves: dict[str, list[dict]], path) -> Path:
    """One panel per curve column, one line per method. ``curves[m]`` are rows keyed by column name."""
    fig, axes = plt.subplots(1, len(PANELS), figsize=(4.2 * len(PANELS), 3.4))
    for ax, (key, label) in zip(axes, PANELS):
        for method, rows in curves.items():
            xs = [r["episode"] for r in rows if r.get(key) is not None]
            ys = [r[key] for r in rows if r.get(key) is not None]
            ax.plot(xs, ys, label=method, linewidth=1.0)
        ax.set_xlabel("episode")
        ax.set_ylabel(label)
        ax.grid(alpha=0.3)
    axes[0].legend(fontsize=8)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path
