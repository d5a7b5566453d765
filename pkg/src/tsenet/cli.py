"""Command-line entry point: ``tsenet generate | train | ablate | eval | bins``.

Configuration is one JSON document (``--config``) plus dotted overrides such
as ``--schedule.epochs=20``.  ``TSE_SEED`` in the environment replaces the
config seed.  Exit codes: 0 success, 2 config error, 3 data error,
4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import re
import shutil
import sys
import time
from pathlib import Path

import numpy as np

from . import plotting
from .config import ConfigError, RunConfig, load_config
from .discretize import bin_table
from .experiment import (
    DataError,
    fit_scheme,
    load_run_data,
    mean_metrics,
    run_once,
    run_seeds,
    write_csv,
    write_log,
)
from .metrics import MetricReport
from .networks import (
    MultiTaskNet,
    RegressorNet,
    checkpoint_prefixes,
    load_into,
    read_checkpoint,
)
from .pipeline import (
    ABLATION_ROWS,
    LOG_COLUMNS,
    PIPELINES,
    NumericError,
    apply_ablation,
    canonical_pipeline,
    evaluate_net,
    select_pipeline_variant,
)
from .scenes import CLASS_NAMES, SceneConfig, generate_dataset

logger = logging.getLogger("tsenet")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
VARIANTS = {"supervised": "supervised", "tse": "regcls.-reg. (TSE)"}
HIST_EDGES = [0.0, 1.0, 5.0, 10.0, 20.0, 50.0, 100.0 + 1e-9]


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config document")
    common.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="tsenet", description=__doc__.split("\n")[0])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", parents=[common], help="write a synthetic scene dataset")
    g.add_argument("--out", help="dataset directory (default: paths.dataset)")
    g.add_argument("--scenes", type=int)
    g.add_argument("--labeled-fraction", type=float)

    t = sub.add_parser("train", parents=[common], help="train one variant over one or more seeds")
    t.add_argument("--variant", help="supervised, tse, or any pipeline name of the ablation table")
    t.add_argument("--labeled-fraction", type=float)
    t.add_argument("--seeds", type=int)
    t.add_argument("--run-name")

    a = sub.add_parser("ablate", parents=[common], help="run the ablation matrix")
    a.add_argument("--rows", help="comma-separated subset of rows (default: all)")
    a.add_argument("--labeled-fraction", type=float)
    a.add_argument("--seeds", type=int)
    a.add_argument("--run-name")

    e = sub.add_parser("eval", parents=[common], help="score a checkpoint on a split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--network", help="checkpoint prefix to load (default: the variant's inference net)")
    e.add_argument("--split", help="labeled, unlabeled, val or test")
    e.add_argument("--out", help="directory for metrics.json / metrics.csv")
    e.add_argument("--labeled-fraction", type=float)

    b = sub.add_parser("bins", parents=[common], help="fit and report height classes")
    b.add_argument("--strategy", choices=["UD", "SID", "HBC"])
    b.add_argument("--num-classes", type=int)
    b.add_argument("--labeled-fraction", type=float)
    b.add_argument("--out", help="directory for bins.csv / bins.json / figures")
    return p


_DOTTED = re.compile(r"^--([A-Za-z_]+(?:\.[A-Za-z_]+)+)(?:=(.*))?$")


def parse_overrides(extra: list[str]) -> dict[str, str]:
    """``--a.b=v`` and ``--a.b v`` pairs; anything else is a config error."""
    out: dict[str, str] = {}
    i = 0
    while i < len(extra):
        m = _DOTTED.match(extra[i])
        if not m:
            raise ConfigError(f"unrecognized argument {extra[i]!r}")
        key, value = m.group(1), m.group(2)
        if value is None:
            if i + 1 >= len(extra):
                raise ConfigError(f"override {key} has no value")
            i += 1
            value = extra[i]
        out[key] = value
        i += 1
    return out


def resolve_config(args: argparse.Namespace, extra: list[str]) -> RunConfig:
    overrides = parse_overrides(extra)
    flag_keys = {
        "labeled_fraction": "splits.labeled_fraction",
        "seeds": "seeds",
        "run_name": "paths.run_name",
        "scenes": "generator.scenes",
        "strategy": "bins.strategy",
        "num_classes": "bins.num_classes",
        "split": "eval.split",
    }
    for attr, key in flag_keys.items():
        value = getattr(args, attr, None)
        if value is not None:
            overrides[key] = value
    variant = getattr(args, "variant", None)
    if variant:
        try:
            overrides["variant.pipeline"] = VARIANTS.get(variant.lower(), None) or canonical_pipeline(variant)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if PIPELINES[overrides["variant.pipeline"]][0] != "regcls":
            overrides.setdefault("variant.pl", "false")
            overrides.setdefault("variant.ranking", "false")
    return load_config(args.config, overrides)


def _prepare_dir(path: Path, force: bool) -> Path:
    if path.exists() and any(path.iterdir()):
        if not force:
            raise ConfigError(f"{path} exists and is not empty; pass --force to overwrite")
        shutil.rmtree(path)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _run_dir(cfg: RunConfig, tag: str, force: bool) -> Path:
    name = cfg.paths.run_name or f"{time.strftime('%Y%m%d-%H%M%S')}-{tag}"
    return _prepare_dir(Path(cfg.paths.output) / name, force)


def _slug(name: str) -> str:
    return re.sub(r"[^A-Za-z0-9]+", "-", name).strip("-").lower()


def _write_config(run_dir: Path, cfg: RunConfig) -> None:
    (run_dir / "config.json").write_text(cfg.to_json())


# ----------------------------------------------------------------------------
# subcommands


def cmd_generate(cfg: RunConfig, args) -> int:
    out = _prepare_dir(Path(args.out or cfg.paths.dataset), args.force)
    g = cfg.generator
    scene_cfg = SceneConfig(size=g.size, buildings=tuple(g.buildings), trees=tuple(g.trees))
    try:
        manifest = generate_dataset(out, g.scenes, g.seed, cfg.splits.labeled_fraction, scene_cfg)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    data = load_run_data(out, cfg.splits.labeled_fraction)
    scenes = data.labeled + data.unlabeled + data.val + data.test
    heights = np.concatenate([s.heights.ravel() for s in scenes])
    sem = np.concatenate([s.semantics.ravel() for s in scenes])
    counts, _ = np.histogram(heights, bins=HIST_EDGES)
    summary = {
        "scenes": len(scenes),
        "splits": manifest.counts(),
        "pixel_histogram": [
            {"lower": lo, "upper": min(hi, 100.0), "fraction": float(c / heights.size)}
            for lo, hi, c in zip(HIST_EDGES[:-1], HIST_EDGES[1:], counts)
        ],
        "class_shares": {name: float(np.mean(sem == cls)) for cls, name in CLASS_NAMES.items()},
        "median_height": float(np.median(heights)),
        "p999_height": float(np.percentile(heights, 99.9)),
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    plotting.height_histogram(heights, out / "height_histogram.png")
    print(f"wrote {len(scenes)} scenes to {out}  splits {manifest.counts()}")
    for row in summary["pixel_histogram"]:
        print(f"  [{row['lower']:5.1f}, {row['upper']:5.1f}) m  {100 * row['fraction']:6.2f}%")
    print("  class shares " + ", ".join(f"{k} {100 * v:.1f}%" for k, v in summary["class_shares"].items()))
    return EXIT_OK


def _train_variant(cfg: RunConfig, data, run_dir: Path, tag: str) -> dict:
    outcomes = []
    for seed in run_seeds(cfg):
        ckpt = run_dir / "checkpoints" / f"{tag}seed_{seed}"
        outcome = run_once(cfg, data, seed, checkpoint_dir=ckpt)
        logger.info("%s seed %d: test rmse %.4f (best epoch %d)", tag or "run", seed,
                    outcome.report.rmse_total, outcome.best_epoch)
        plotting.training_curves(outcome.log, run_dir / "figures" / f"{tag}curves_seed_{seed}.png",
                                 title=f"{cfg.variant.pipeline}, seed {seed}")
        outcomes.append(outcome)
    return {"outcomes": outcomes, "summary": mean_metrics([o.report for o in outcomes])}


def _metrics_doc(cfg: RunConfig, result: dict) -> dict:
    return {
        "pipeline": cfg.variant.pipeline,
        "inference_network": result["outcomes"][0].inference,
        "split": cfg.eval.split,
        "seeds": [
            {"seed": o.seed, "best_epoch": o.best_epoch, "bin_edges": list(o.scheme.edges),
             **json.loads(o.report.to_json())}
            for o in result["outcomes"]
        ],
        "mean": result["summary"],
    }


def cmd_train(cfg: RunConfig, args) -> int:
    data = load_run_data(cfg.paths.dataset, cfg.splits.labeled_fraction)
    run_dir = _run_dir(cfg, _slug(cfg.variant.pipeline), args.force)
    _write_config(run_dir, cfg)
    result = _train_variant(cfg, data, run_dir, "")
    write_log(run_dir / "log.csv", result["outcomes"])
    doc = _metrics_doc(cfg, result)
    (run_dir / "metrics.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    rows = [{"seed": o.seed, **o.report.csv_row()} for o in result["outcomes"]]
    write_csv(run_dir / "metrics.csv", rows, list(rows[0]))
    s = result["summary"]
    print(f"{run_dir}: test rmse_total {s['rmse_total_mean']:.4f} +- {s['rmse_total_std']:.4f}, "
          f"building balanced {s['rmse_building_balanced_mean']:.4f}")
    return EXIT_OK


def cmd_ablate(cfg: RunConfig, args) -> int:
    rows = [r.strip() for r in args.rows.split(",")] if args.rows else list(ABLATION_ROWS)
    configs = {}
    for row in rows:
        try:
            configs[row] = apply_ablation(cfg, row)
        except (ValueError, KeyError) as exc:
            raise ConfigError(f"ablation row {row!r}: {exc}") from None
    data = load_run_data(cfg.paths.dataset, cfg.splits.labeled_fraction)
    run_dir = _run_dir(cfg, "ablation", args.force)
    _write_config(run_dir, cfg)
    table, docs, outcomes = [], {}, []
    for row, row_cfg in configs.items():
        tag = _slug(row) + "_"
        result = _train_variant(row_cfg, data, run_dir, tag)
        outcomes += [(row, o) for o in result["outcomes"]]
        docs[row] = _metrics_doc(row_cfg, result)
        table.append({"row": row, **result["summary"]})
        print(f"{row:22s} total {result['summary']['rmse_total_mean']:.4f}  "
              f"balanced {result['summary']['rmse_building_balanced_mean']:.4f}")
    columns = list(table[0])
    write_csv(run_dir / "ablation.csv", table, columns)
    log_rows = [{"row": row, "seed": o.seed, **r} for row, o in outcomes for r in o.log]
    write_csv(run_dir / "log.csv", log_rows, ["row", "seed"] + LOG_COLUMNS)
    (run_dir / "metrics.json").write_text(json.dumps(docs, indent=2, sort_keys=True) + "\n")
    plotting.ablation_bars(table, run_dir / "figures" / "ablation_total.png", "rmse_total")
    plotting.ablation_bars(table, run_dir / "figures" / "ablation_building_balanced.png",
                           "rmse_building_balanced")
    return EXIT_OK


def _network_from_records(records: dict, prefix: str, cfg: RunConfig) -> RegressorNet:
    rng = np.random.default_rng(0)
    widths = tuple(cfg.model.widths)
    key = f"{prefix}/cls_head.w"
    if key in records:
        net = MultiTaskNet(rng, records[key].shape[1], widths=widths, height_scale=cfg.model.height_scale)
    else:
        net = RegressorNet(rng, widths=widths, height_scale=cfg.model.height_scale)
    load_into(net, records, prefix)
    return net


def cmd_eval(cfg: RunConfig, args) -> int:
    path = Path(args.checkpoint)
    try:
        records = read_checkpoint(path)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read checkpoint: {exc}") from None
    prefix = args.network or PIPELINES[canonical_pipeline(cfg.variant.pipeline)][2]
    if prefix not in checkpoint_prefixes(records):
        raise DataError(f"checkpoint has no {prefix!r} network; available prefixes: "
                        f"{checkpoint_prefixes(records)}")
    try:
        net = _network_from_records(records, prefix, cfg)
    except ValueError as exc:
        raise ConfigError(f"checkpoint does not match model config: {exc}") from None
    data = load_run_data(cfg.paths.dataset, cfg.splits.labeled_fraction)
    scenes = data.split(cfg.eval.split)
    if not scenes:
        raise DataError(f"split {cfg.eval.split!r} is empty")
    report: MetricReport = evaluate_net(net, scenes, cfg)
    out = Path(args.out) if args.out else path.parent / f"eval_{prefix}_{cfg.eval.split}"
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.json").write_text(report.to_json())
    write_csv(out / "metrics.csv", [report.csv_row()], list(report.csv_row()))
    print(f"{prefix} on {cfg.eval.split}: rmse_total {report.rmse_total:.4f}, "
          f"building balanced {report.rmse_building_balanced}")
    return EXIT_OK


def cmd_bins(cfg: RunConfig, args) -> int:
    data = load_run_data(cfg.paths.dataset, cfg.splits.labeled_fraction)
    try:
        scheme = fit_scheme(cfg, data, cfg.seed)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    heights = np.concatenate([s.heights.ravel() for s in data.labeled])
    table = bin_table(scheme, heights)
    out = Path(args.out) if args.out else Path(cfg.paths.output) / f"bins_{cfg.bins.strategy}_{cfg.bins.num_classes}"
    out.mkdir(parents=True, exist_ok=True)
    write_csv(out / "bins.csv", table, ["class", "lower", "upper", "mass"])
    doc = {"strategy": scheme.strategy, "num_classes": scheme.num_classes, "h_min": scheme.h_min,
           "h_max": scheme.h_max, "edges": list(scheme.edges), "classes": table}
    (out / "bins.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    plotting.bin_masses(table, out / "bin_masses.png")
    plotting.height_histogram(heights, out / "height_histogram.png", scheme.edges)
    print(f"{scheme.strategy} N={scheme.num_classes} fitted on {heights.size} labeled pixels")
    for row in table:
        print(f"  class {row['class']}: [{row['lower']:8.3f}, {row['upper']:8.3f})  mass {row['mass']:.4f}")
    return EXIT_OK


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "ablate": cmd_ablate, "eval": cmd_eval, "bins": cmd_bins}


def main(argv: list[str] | None = None) -> int:
    parser = _parser()
    args, extra = parser.parse_known_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args, extra)
        select_pipeline_variant(cfg)
        run_seeds(cfg)
    except (ConfigError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
