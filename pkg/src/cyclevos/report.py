"""Tables and figures for ablation runs.

Tables are lists of flat dicts; they are written as CSV and as GitHub
markdown.  Figures use the Agg backend and are only ever saved to files.
"""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.dpi": 110,
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
}
ARM_COLORS = {"baseline": "#7f7f7f", "cyclic": "#1f77b4"}


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "on" if v else "off"
    if isinstance(v, (float, np.floating)):
        return f"{v:.4f}"
    return "" if v is None else str(v)


def write_csv(path, rows: list[dict]) -> Path:
    path = Path(path)
    cols = list(rows[0]) if rows else []
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols)
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
    return path


def markdown_table(rows: list[dict], cols: list[str] | None = None) -> str:
    if not rows:
        return "_(empty)_\n"
    cols = cols or list(rows[0])
    lines = ["| " + " | ".join(cols) + " |", "|" + "---|" * len(cols)]
    lines += ["| " + " | ".join(_fmt(r.get(c)) for c in cols) + " |" for r in rows]
    return "\n".join(lines) + "\n"


def mean_rows(rows: list[dict], keys: list[str], values: list[str]) -> list[dict]:
    """Average ``values`` over all rows sharing ``keys``; order of first appearance is kept."""
    groups: dict = {}
    for r in rows:
        groups.setdefault(tuple(r[k] for k in keys), []).append(r)
    out = []
    for key, grp in groups.items():
        row = dict(zip(keys, key))
        for v in values:
            row[v] = float(np.mean([g[v] for g in grp]))
        row["n"] = len(grp)
        out.append(row)
    return out


def _save(fig, path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def read_loss_csv(path) -> dict[int, float]:
    per_epoch: dict[int, list[float]] = {}
    with open(path, newline="") as fh:
        for r in csv.DictReader(fh):
            per_epoch.setdefault(int(r["epoch"]), []).append(float(r["total"]))
    return {e: float(np.mean(v)) for e, v in sorted(per_epoch.items())}


def plot_losses(curves: dict[str, dict[int, float]], path) -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5, 3.2))
        for name, curve in sorted(curves.items()):
            arm = name.split("-")[0]
            ax.plot(list(curve), list(curve.values()), lw=1, color=ARM_COLORS.get(arm), alpha=0.8, label=name)
        ax.set_xlabel("epoch")
        ax.set_ylabel("mean total loss")
        ax.legend(fontsize=7, ncol=2)
        return _save(fig, path)


def plot_bars(rows: list[dict], group: str, value: str, path, title: str = "") -> Path:
    """Mean with per-seed dots for each ``group`` value."""
    names = list(dict.fromkeys(r[group] for r in rows))
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(1.2 + 0.9 * len(names), 3.2))
        for i, n in enumerate(names):
            vals = [r[value] for r in rows if r[group] == n]
            ax.bar(i, np.mean(vals), color="#9ecae1", edgecolor="#3182bd")
            ax.plot([i] * len(vals), vals, "k.", ms=4)
        ax.set_xticks(range(len(names)), [str(n) for n in names])
        ax.set_ylabel(value)
        ax.set_title(title)
        return _save(fig, path)


def plot_strategy(rows: list[dict], path) -> Path:
    kinds = list(dict.fromkeys(r["strategy"] for r in rows))
    x = np.arange(len(kinds))
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5, 3.2))
        for j, arm in enumerate(("baseline", "cyclic")):
            means = [np.mean([r[arm] for r in rows if r["strategy"] == k]) for k in kinds]
            ax.bar(x + (j - 0.5) * 0.38, means, 0.38, color=ARM_COLORS[arm], label=arm)
        ax.set_xticks(x, kinds)
        ax.set_ylabel("J&F")
        ax.legend()
        return _save(fig, path)


def plot_alpha(rows: list[dict], path, chosen: float | None = None) -> Path:
    rows = [r for r in rows if r["alpha"] > 0]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 3))
        ax.semilogx([r["alpha"] for r in rows], [r["JF"] for r in rows], "o-", ms=3)
        if chosen:
            ax.axvline(chosen, color="r", lw=0.8, ls="--")
        ax.set_xlabel("correction rate")
        ax.set_ylabel("validation J&F")
        return _save(fig, path)


def plot_timing(timing: dict, path) -> Path:
    ns = np.array([r["N"] for r in timing["rows"]], dtype=float)
    ov = np.array([r["overhead"] for r in timing["rows"]]) * 1e3
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 3))
        ax.plot(ns, ov, "o", label="measured")
        ax.plot(ns, (timing["slope"] * ns + timing["intercept"]) * 1e3, "-", lw=1, label=f"fit, R²={timing['r2']:.3f}")
        ax.set_xlabel("correction iterations")
        ax.set_ylabel("overhead per frame (ms)")
        ax.legend()
        return _save(fig, path)


def plot_heatmaps(panels: list[tuple[str, np.ndarray, np.ndarray]], path) -> Path:
    """One column per (title, frame CHW, heat HW) with the heat overlaid on the frame."""
    n = max(len(panels), 1)
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, n, figsize=(2.2 * n, 2.4), squeeze=False)
        for ax, (title, frame, heat) in zip(axes[0], panels):
            ax.imshow(np.transpose(frame, (1, 2, 0)))
            ax.imshow(heat, cmap="inferno", alpha=0.6)
            ax.set_title(title, fontsize=7)
        for ax in axes[0]:
            ax.axis("off")
        return _save(fig, path)
