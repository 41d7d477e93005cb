"""Raster figures from the curve and projection CSVs."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from ..evaluation import read_curve_csv, read_projection_csv  # noqa: E402


def plot_curve(curve_csv, out_path) -> Path:
    curve = read_curve_csv(curve_csv)
    fig, ax = plt.subplots(figsize=(4.5, 3.5))
    ax.plot(curve.tpr, curve.ccr, marker="o", ms=3)
    ax.set_xlabel("TPR (known detection)")
    ax.set_ylabel("CCR")
    ax.set_xlim(0, 1.02)
    ax.set_ylim(0, 1.02)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return Path(out_path)


def plot_projection(projection_csv, out_path) -> Path:
    proj = read_projection_csv(projection_csv)
    tags = sorted({t for _, _, t in proj.points})
    cmap = plt.get_cmap("tab20", max(len(tags), 1))
    fig, ax = plt.subplots(figsize=(5, 4.5))
    for i, tag in enumerate(tags):
        xs = [x for x, _, t in proj.points if t == tag]
        ys = [y for _, y, t in proj.points if t == tag]
        ax.scatter(xs, ys, s=6, color=cmap(i), label=tag, alpha=0.7)
    ax.set_title(f"embedding projection ({proj.method})")
    ax.legend(fontsize=6, markerscale=2, loc="best")
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return Path(out_path)


def emit_plots(source_dir, out_dir) -> dict:
    """Write ``ccr_curve.png`` and ``projection.png`` for the CSVs found in ``source_dir``.

    Raises FileNotFoundError when neither CSV exists.
    """
    source_dir, out_dir = Path(source_dir), Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    made = {}
    if (source_dir / "curve.csv").exists():
        made["ccr_curve_png"] = plot_curve(source_dir / "curve.csv", out_dir / "ccr_curve.png")
    if (source_dir / "projection.csv").exists():
        made["projection_png"] = plot_projection(source_dir / "projection.csv", out_dir / "projection.png")
    if not made:
        raise FileNotFoundError(f"no curve.csv or projection.csv in {source_dir}")
    return made
