"""Height-estimation metrics: pixel RMSEs, LoD1 building heights and their errors."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .scenes import CLASS_NAMES

RELATIVE_GUARD_M = 0.5


def rmse(pred, gt, mask=None) -> float | None:
    """Root mean squared error over selected pixels; ``None`` if nothing is selected."""
    pred, gt = np.asarray(pred, dtype=np.float64), np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"rmse: prediction {pred.shape} vs ground truth {gt.shape}")
    d = pred - gt
    if mask is not None:
        d = d[np.asarray(mask, dtype=bool)]
    if d.size == 0:
        return None
    return math.sqrt(float(np.sum(d * d)) / d.size)


def lower_median(values) -> float:
    """Median with the lower-middle order statistic for even counts."""
    v = np.sort(np.asarray(values, dtype=np.float64).ravel())
    return float(v[(v.size - 1) // 2])


def building_heights(pred, gt, instances) -> list[tuple[float, float]]:
    """(predicted, true) LoD1 height per building instance, ids ascending."""
    pred, gt, inst = np.asarray(pred), np.asarray(gt), np.asarray(instances)
    out = []
    for b in np.unique(inst):
        if b == 0:
            continue
        sel = inst == b
        out.append((lower_median(pred[sel]), lower_median(gt[sel])))
    return out


def bucket_table(pairs: Sequence[tuple[float, float]], bucket_width: float = 10.0) -> list[dict]:
    """Per-bucket building RMSE, bucketing by true height in steps of ``bucket_width``."""
    if not pairs:
        return []
    arr = np.asarray(pairs, dtype=np.float64)
    idx = np.floor(arr[:, 1] / bucket_width).astype(int)
    rows = []
    for k in np.unique(idx):
        sel = idx == k
        d = arr[sel, 0] - arr[sel, 1]
        rows.append({
            "lower": float(k * bucket_width),
            "upper": float((k + 1) * bucket_width),
            "count": int(sel.sum()),
            "rmse": math.sqrt(float(np.mean(d * d))),
        })
    return rows


def balanced_building_rmse(pairs, bucket_width: float = 10.0) -> float | None:
    """Unweighted mean of per-height-bucket building RMSEs."""
    table = bucket_table(pairs, bucket_width)
    if not table:
        return None
    return float(np.mean([row["rmse"] for row in table]))


def relative_error(pairs, guard: float = RELATIVE_GUARD_M) -> tuple[float | None, int]:
    """Mean |pred - true| / true over buildings; also returns the count excluded by ``guard``."""
    arr = np.asarray(pairs, dtype=np.float64).reshape(-1, 2)
    keep = arr[:, 1] >= guard
    excluded = int((~keep).sum())
    if not keep.any():
        return None, excluded
    a = arr[keep]
    return float(np.mean(np.abs(a[:, 0] - a[:, 1]) / a[:, 1])), excluded


@dataclass
class MetricReport:
    rmse_total: float | None
    rmse_per_class: dict[str, float | None]
    rmse_building_balanced: float | None
    building_relative: float | None
    buckets: list[dict] = field(default_factory=list)
    n_buildings: int = 0
    relative_excluded: int = 0
    bucket_width: float = 10.0

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"

    def csv_row(self) -> dict:
        row = {"rmse_total": self.rmse_total}
        row.update({f"rmse_{k}": v for k, v in self.rmse_per_class.items()})
        row["rmse_building_balanced"] = self.rmse_building_balanced
        row["building_relative"] = self.building_relative
        return row


def evaluate(preds: Sequence[np.ndarray], scenes, bucket_width: float = 10.0) -> MetricReport:
    """Metrics for predicted height maps against a list of scenes."""
    if len(preds) != len(scenes):
        raise ValueError(f"{len(preds)} predictions for {len(scenes)} scenes")
    pred = np.stack([np.asarray(p, dtype=np.float64) for p in preds])
    gt = np.stack([s.heights for s in scenes])
    sem = np.stack([s.semantics for s in scenes])
    pairs = []
    for p, s in zip(preds, scenes):
        pairs.extend(building_heights(p, s.heights, s.instances))
    rel, excluded = relative_error(pairs) if pairs else (None, 0)
    return MetricReport(
        rmse_total=rmse(pred, gt),
        rmse_per_class={name: rmse(pred, gt, sem == cls) for cls, name in CLASS_NAMES.items()},
        rmse_building_balanced=balanced_building_rmse(pairs, bucket_width),
        building_relative=rel,
        buckets=bucket_table(pairs, bucket_width),
        n_buildings=len(pairs),
        relative_excluded=excluded,
        bucket_width=bucket_width,
    )
