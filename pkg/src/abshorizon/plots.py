"""Figures for run directories: learning curves, sweep coverage, transfer comparison."""
from __future__ import annotations

import csv
import os
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def read_metrics(path: str | os.PathLike) -> dict[str, list]:
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.DictReader(fh))
    cols: dict[str, list] = {k: [] for k in (rows[0].keys() if rows else [])}
    for row in rows:
        for k, v in row.items():
            cols[k].append(float(v) if v not in ("", None) else None)
    return cols


def _eval_points(cols):
    pts = [(f, r) for f, r in zip(cols["frames"], cols["eval_return"]) if r is not None]
    return [p[0] for p in pts], [p[1] for p in pts]


def plot_run(out_dir: str | os.PathLike, pattern: str = "metrics_seed*.csv") -> Path | None:
    """Transitions learned, known states and evaluation return against frames, one line per seed."""
    out = Path(out_dir)
    files = sorted(out.glob(pattern))
    if not files:
        return None
    fig, axes = plt.subplots(1, 3, figsize=(13, 3.6))
    for f in files:
        cols = read_metrics(f)
        label = f"seed {int(cols['seed'][0])}" if cols["seed"] else f.stem
        axes[0].plot(cols["frames"], cols["actions"], label=label)
        axes[1].plot(cols["frames"], cols["known_states"], label=label)
        axes[2].plot(*_eval_points(cols), marker="o", ms=3, label=label)
    for ax, title in zip(axes, ("reliable transitions", "known abstract states", "evaluation return")):
        ax.set_xlabel("frames")
        ax.set_title(title)
        ax.grid(alpha=0.3)
    axes[0].legend(frameon=False, fontsize=8)
    fig.tight_layout()
    path = out / (pattern.split("_seed")[0] + ".png")
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_sweep(out_dir: str | os.PathLike) -> Path | None:
    out = Path(out_dir)
    dirs = sorted(out.glob("scale_*"), key=lambda p: float(p.name.split("_", 1)[1]))
    if not dirs:
        return None
    fig, ax = plt.subplots(figsize=(6, 4))
    for d, color in zip(dirs, plt.cm.viridis([i / max(1, len(dirs) - 1) for i in range(len(dirs))])):
        for i, f in enumerate(sorted(d.glob("metrics_seed*.csv"))):
            cols = read_metrics(f)
            frac = [k / cols["known_states"][-1] for k in cols["known_states"]]
            ax.plot(cols["frames"], frac, color=color, alpha=0.8,
                    label=f"scale {d.name.split('_', 1)[1]}" if i == 0 else None)
    ax.set_xlabel("frames")
    ax.set_ylabel("known states / final")
    ax.legend(frameon=False)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    path = out / "sweep.png"
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_transfer(reports, path: str | os.PathLike) -> Path:
    fig, ax = plt.subplots(figsize=(5, 3.6))
    seeds = [r.seed for r in reports]
    xs = range(len(reports))
    ax.bar([x - 0.2 for x in xs], [r.transfer.achieved_return for r in reports], 0.4, label="transfer")
    ax.bar([x + 0.2 for x in xs], [r.baseline_best for r in reports], 0.4, label="flat, 100x frames")
    oracle = [r.oracle_value for r in reports if r.oracle_value is not None]
    if oracle:
        ax.axhline(oracle[0], color="k", ls="--", lw=1, label="optimal")
    ax.set_xticks(list(xs))
    ax.set_xticklabels([f"seed {s}" for s in seeds])
    ax.set_ylabel("return")
    ax.legend(frameon=False, fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)
