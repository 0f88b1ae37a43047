"""Figures rendered from rounds.csv files. Only the report command imports this."""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

PANELS = (
    ("accuracy", "accuracy (%)"),
    ("n_modes_localopt", "modes (local optima)"),
    ("top100_mean", "top-100 mean reward"),
    ("unique_fraction", "unique fraction"),
)


def read_rounds(path) -> dict[str, np.ndarray]:
    """Columns of a rounds.csv as float arrays; blank cells become NaN."""
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ValueError(f"{path}: no rows")
    out = {}
    for key in rows[0]:
        out[key] = np.array([float(r[key]) if r[key] != "" else np.nan for r in rows])
    return out


def _style(ax):
    ax.spines["top"].set_visible(False)
    ax.spines["right"].set_visible(False)
    ax.grid(alpha=0.3, linewidth=0.5)


def _eval_points(cols, key):
    mask = ~np.isnan(cols[key])
    return cols["round"][mask], cols[key][mask]


def plot_run(rounds_csv, out_dir, title: str = "") -> list[Path]:
    """Training curves and the acceptance-rate trace of one run."""
    cols = read_rounds(rounds_csv)
    out_dir = Path(out_dir)
    written = []

    fig, axes = plt.subplots(1, len(PANELS), figsize=(4 * len(PANELS), 3.2))
    for ax, (key, label) in zip(axes, PANELS):
        x, y = _eval_points(cols, key)
        ax.plot(x, y, lw=1.5)
        ax.set_xlabel("round")
        ax.set_ylabel(label)
        _style(ax)
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    path = out_dir / "curves.png"
    fig.savefig(path, dpi=120)
    plt.close(fig)
    written.append(path)

    acc = cols["accept_rate"]
    if not np.all(np.isnan(acc)):
        fig, ax = plt.subplots(figsize=(5, 3.2))
        ax.plot(cols["round"], acc, lw=0.6, alpha=0.5, label="per round")
        w = max(1, len(acc) // 20)
        smooth = np.convolve(np.nan_to_num(acc), np.ones(w) / w, mode="valid")
        ax.plot(cols["round"][w - 1 :], smooth, lw=1.5, label=f"{w}-round mean")
        ax.set_xlabel("round")
        ax.set_ylabel("acceptance rate")
        ax.set_ylim(0, 1)
        ax.legend(frameon=False)
        _style(ax)
        fig.tight_layout()
        path = out_dir / "accept_rate.png"
        fig.savefig(path, dpi=120)
        plt.close(fig)
        written.append(path)
    return written


def plot_comparison(runs: dict[str, list[Path]], out_dir) -> list[Path]:
    """Seed-mean curves (with min/max band) for each variant, one panel per metric."""
    out_dir = Path(out_dir)
    fig, axes = plt.subplots(1, len(PANELS), figsize=(4 * len(PANELS), 3.2))
    for name, paths in runs.items():
        per_seed = [read_rounds(p) for p in paths]
        for ax, (key, label) in zip(axes, PANELS):
            x, _ = _eval_points(per_seed[0], key)
            ys = np.array([_eval_points(c, key)[1] for c in per_seed])
            line, = ax.plot(x, ys.mean(0), lw=1.5, label=name)
            ax.fill_between(x, ys.min(0), ys.max(0), color=line.get_color(), alpha=0.2, lw=0)
            ax.set_xlabel("round")
            ax.set_ylabel(label)
    for ax in axes:
        _style(ax)
    axes[0].legend(frameon=False)
    fig.tight_layout()
    path = out_dir / "comparison.png"
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return [path]
