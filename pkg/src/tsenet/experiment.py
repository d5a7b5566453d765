"""Run-level plumbing shared by the CLI and the acceptance suite.

A run reads a dataset from disk, fits the height bins on labeled heights,
trains one variant, restores the best-validation weights and scores the
evaluation split.  Everything written under the run directory is a pure
function of the config and seed.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import RunConfig
from .discretize import BinScheme, make_scheme
from .metrics import MetricReport
from .networks import save_checkpoint
from .pipeline import LOG_COLUMNS, evaluate_net, init_state, train_loop
from .scenes import DatasetManifest, Scene, load_manifest, load_split, make_splits

logger = logging.getLogger(__name__)


class DataError(RuntimeError):
    """Dataset missing, unreadable or inconsistent with the config."""


@dataclass
class RunData:
    labeled: list[Scene]
    unlabeled: list[Scene]
    val: list[Scene]
    test: list[Scene]
    manifest: DatasetManifest
    h_max: float

    def split(self, name: str) -> list[Scene]:
        if name not in ("labeled", "unlabeled", "val", "test"):
            raise DataError(f"unknown split {name!r}")
        return getattr(self, name)


def resplit(manifest: DatasetManifest, labeled_fraction: float) -> DatasetManifest:
    """Re-derive the split tags for another labeled fraction.

    The permutation is regenerated from the manifest seed exactly as at
    generation time, so val/test stay fixed and labeled sets are nested.
    """
    if labeled_fraction == manifest.labeled_fraction:
        return manifest
    n = len(manifest.scenes)
    split_seed = np.random.SeedSequence(manifest.seed).spawn(n + 1)[-1]
    fresh = make_splits(n, labeled_fraction, np.random.default_rng(split_seed),
                        seed=manifest.seed, h_max=manifest.h_max)
    old_eval = {s["image"] for s in manifest.scenes if s["split"] in ("val", "test")}
    new_eval = {s["image"] for s in fresh.scenes if s["split"] in ("val", "test")}
    if old_eval != new_eval:
        raise DataError("manifest splits do not match its seed; regenerate the dataset")
    return fresh


_CACHE: dict[tuple, RunData] = {}


def load_run_data(root: str | Path, labeled_fraction: float) -> RunData:
    """Read every split of the dataset at ``root``; results are memoized per process."""
    root = Path(root)
    try:
        manifest = load_manifest(root)
    except (FileNotFoundError, ValueError, KeyError, json.JSONDecodeError) as exc:
        raise DataError(str(exc)) from None
    key = (str(root.resolve()), manifest.to_json(), labeled_fraction)
    if key in _CACHE:
        return _CACHE[key]
    try:
        manifest = resplit(manifest, labeled_fraction)
        parts = {name: load_split(root, manifest, name) for name in ("labeled", "unlabeled", "val", "test")}
    except (OSError, ValueError) as exc:
        raise DataError(str(exc)) from None
    if not parts["val"] or not parts["test"]:
        raise DataError(f"dataset at {root} has an empty validation or test split")
    data = RunData(**parts, manifest=manifest, h_max=manifest.h_max)
    _CACHE[key] = data
    return data


def fit_scheme(cfg: RunConfig, data: RunData, seed: int) -> BinScheme:
    """Bins from labeled heights (HBC) or from the fixed ``[0, h_max]`` range (UD, SID)."""
    heights = np.concatenate([s.heights.ravel() for s in data.labeled])
    if cfg.bins.hbc_samples and heights.size > cfg.bins.hbc_samples:
        rng = np.random.default_rng(np.random.SeedSequence([seed, 3]))
        heights = rng.choice(heights, cfg.bins.hbc_samples, replace=False)
    return make_scheme(cfg.bins.strategy, cfg.bins.num_classes, samples=heights, h_min=0.0, h_max=data.h_max)


@dataclass
class RunOutcome:
    seed: int
    report: MetricReport
    log: list[dict]
    scheme: BinScheme
    best_epoch: int
    inference: str


def _fmt(v):
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return ""
    if isinstance(v, float):
        return repr(v)
    return v


def write_csv(path: Path, rows: list[dict], columns: list[str]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _fmt(row.get(k)) for k in columns})


def write_log(path: Path, outcomes: list[RunOutcome]) -> None:
    """Training log of every seed, one row per epoch, seed in the first column."""
    rows = [{"seed": o.seed, **row} for o in outcomes for row in o.log]
    write_csv(path, rows, ["seed"] + LOG_COLUMNS)


def run_once(cfg: RunConfig, data: RunData, seed: int,
             checkpoint_dir: Path | None = None) -> RunOutcome:
    """Train one seed, evaluate the best-validation inference network on ``cfg.eval.split``."""
    scheme = fit_scheme(cfg, data, seed)
    state = init_state(cfg, scheme, seed)
    val = data.val[:cfg.eval.val_scenes] if cfg.eval.val_scenes > 0 else data.val
    result = train_loop(state, data.labeled, data.unlabeled, val, cfg, seed, checkpoint_dir=checkpoint_dir)
    if checkpoint_dir is not None:
        save_checkpoint(checkpoint_dir / "last.tsew", state.networks())
    net = state.inference_net()
    result.restore_best(net)
    report = evaluate_net(net, data.split(cfg.eval.split), cfg)
    return RunOutcome(seed, report, result.log, scheme, state.best.epoch, state.wiring.inference)


def run_seeds(cfg: RunConfig) -> list[int]:
    """Seeds of a repeated run: ``seed, seed + 1, ...``."""
    if cfg.seeds < 1:
        raise ValueError(f"seeds must be at least 1, got {cfg.seeds}")
    return [cfg.seed + i for i in range(cfg.seeds)]


def mean_metrics(reports: list[MetricReport]) -> dict:
    """Mean and population std over seeds of every scalar metric."""
    out: dict[str, float | None] = {}
    rows = [r.csv_row() for r in reports]
    for k in rows[0]:
        vals = [row[k] for row in rows if row[k] is not None]
        out[f"{k}_mean"] = float(np.mean(vals)) if vals else None
        out[f"{k}_std"] = float(np.std(vals)) if vals else None
    return out
