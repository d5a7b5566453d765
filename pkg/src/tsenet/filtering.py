"""Batch-wide confidence ranking and the decaying ranking threshold."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

R_FLOOR = 0.5


def rank_batch(confidences) -> np.ndarray:
    """Normalized ranks in ``[0, 1)`` over every pixel of the batch jointly.

    The lowest confidence gets rank 0; equal confidences keep flat
    (map, row, column) order.  Output has the input's shape.
    """
    conf = np.asarray(confidences, dtype=np.float64)
    flat = conf.ravel()
    if flat.size == 0:
        raise ValueError("rank_batch: empty batch")
    order = np.argsort(flat, kind="stable")
    ranks = np.empty(flat.size)
    ranks[order] = np.arange(flat.size)
    return (ranks / flat.size).reshape(conf.shape)


def make_mask(ranks: np.ndarray, r: float) -> np.ndarray:
    """Keep pixels whose normalized rank is strictly above ``r``."""
    return (np.asarray(ranks) > r).astype(np.float64)


@dataclass(frozen=True)
class ThresholdState:
    """Ranking threshold after ``t`` decay steps from ``r0``.

    ``r`` is recomputed as ``max(r0 * decay**t, 0.5)``, which is the closed
    form of the recurrence ``r <- max(r * decay, 0.5)`` and avoids drift from
    repeated multiplication.
    """

    r: float = 1.0
    decay: float = 0.9
    t: int = 0
    r0: float = 1.0

    def __post_init__(self):
        if not 0.0 < self.decay <= 1.0:
            raise ValueError(f"threshold decay must lie in (0, 1], got {self.decay}")
        if not R_FLOOR <= self.r <= 1.0:
            raise ValueError(f"threshold must lie in [{R_FLOOR}, 1], got {self.r}")


def threshold_step(state: ThresholdState) -> ThresholdState:
    t = state.t + 1
    r = max(state.r0 * state.decay**t, R_FLOOR)
    return ThresholdState(r, state.decay, t, state.r0)


def fixed_threshold(r: float = R_FLOOR) -> ThresholdState:
    return ThresholdState(r=r, decay=1.0, t=0, r0=r)


def default_decay(total_epochs: int) -> float:
    """Decay that reaches the 0.5 floor after ``ceil(total_epochs / 2)`` steps."""
    half = math.ceil(max(total_epochs, 1) / 2)
    lam = 0.5 ** (1.0 / half)
    while lam**half > R_FLOOR:
        lam = math.nextafter(lam, 0.0)
    return lam


def mask_diagnostics(conf: np.ndarray, mask: np.ndarray) -> dict:
    kept = mask > 0
    n = kept.size
    return {
        "kept_fraction": float(kept.sum() / n) if n else 0.0,
        "conf_kept": float(conf[kept].mean()) if kept.any() else float("nan"),
        "conf_dropped": float(conf[~kept].mean()) if (~kept).any() else float("nan"),
    }
