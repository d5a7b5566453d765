"""Report figures rendered to files with the non-interactive Agg backend."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.figsize": (6.0, 3.6),
    "figure.dpi": 100,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "font.size": 9,
    "legend.fontsize": 8,
    "legend.frameon": False,
    # fixed metadata keeps PNG bytes stable across reruns
    "savefig.dpi": 100,
}


def _save(fig, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path


def _num(v) -> float:
    if v is None or v == "":
        return float("nan")
    return float(v)


def training_curves(log: Sequence[dict], path: Path, title: str = "") -> Path:
    """Loss terms, ranking threshold and validation RMSE per epoch."""
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, 3, figsize=(10.0, 3.2))
        ep = [int(r["epoch"]) for r in log]
        for key in ("l_cls", "l_reg_T", "l_pl", "l_sup_S", "l_unlabeled"):
            vals = np.array([_num(r[key]) for r in log])
            if np.nanmax(np.abs(vals), initial=0.0) > 0:
                axes[0].plot(ep, vals, label=key)
        axes[0].set_yscale("symlog", linthresh=1e-2)
        axes[0].set_xlabel("epoch")
        axes[0].set_title("loss terms")
        axes[0].legend()
        axes[1].plot(ep, [_num(r["threshold_r"]) for r in log], label="r")
        axes[1].plot(ep, [_num(r["kept_fraction"]) for r in log], label="kept fraction")
        axes[1].set_ylim(-0.05, 1.05)
        axes[1].set_xlabel("epoch")
        axes[1].set_title("pseudo-label filter")
        axes[1].legend()
        axes[2].plot(ep, [_num(r["val_rmse_total"]) for r in log], label="total")
        axes[2].plot(ep, [_num(r["val_rmse_building"]) for r in log], label="building balanced")
        axes[2].set_xlabel("epoch")
        axes[2].set_ylabel("RMSE [m]")
        axes[2].set_title("validation")
        axes[2].legend()
        if title:
            fig.suptitle(title)
        return _save(fig, path)


def ablation_bars(rows: Sequence[dict], path: Path, metric: str = "rmse_total") -> Path:
    """Horizontal bars of one metric per ablation row, with seed std as error bars."""
    with plt.rc_context(STYLE):
        names = [r["row"] for r in rows]
        means = np.array([_num(r.get(f"{metric}_mean")) for r in rows])
        stds = np.array([_num(r.get(f"{metric}_std")) for r in rows])
        fig, ax = plt.subplots(figsize=(6.0, 0.35 * len(rows) + 1.2))
        y = np.arange(len(rows))
        ax.barh(y, means, xerr=np.nan_to_num(stds), color="0.6", edgecolor="0.2")
        ax.set_yticks(y, names)
        ax.invert_yaxis()
        ax.set_xlabel(f"{metric} [m]")
        return _save(fig, path)


def height_histogram(heights: np.ndarray, path: Path, edges: Sequence[float] | None = None) -> Path:
    """Log-count histogram of pixel heights, optionally with bin edges overlaid."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        h = np.asarray(heights).ravel()
        ax.hist(h, bins=100, color="0.5", log=True)
        for e in edges or []:
            ax.axvline(e, color="C3", lw=0.8)
        ax.set_xlabel("height [m]")
        ax.set_ylabel("pixels")
        return _save(fig, path)


def bin_masses(table: Sequence[dict], path: Path) -> Path:
    """Empirical mass per height class next to the halving target."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        k = np.arange(len(table))
        ax.bar(k - 0.2, [r["mass"] for r in table], width=0.4, label="empirical")
        target = [0.5 ** (i + 1) for i in range(len(table) - 1)] + [0.5 ** (len(table) - 1)]
        ax.bar(k + 0.2, target, width=0.4, label="halving target", color="0.7")
        ax.set_xticks(k)
        ax.set_xlabel("class")
        ax.set_ylabel("mass")
        ax.legend()
        return _save(fig, path)
