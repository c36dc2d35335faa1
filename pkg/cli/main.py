"""Command line: train-source, adapt, evaluate, gen-scenario, sweep, split.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric divergence.
"""
import argparse
import json
import sys
from pathlib import Path
from typing import Optional, Sequence

import pandas as pd
from pydantic import ValidationError

from adaptation.metrics import evaluate
from adaptation.pipeline import adapt, baseline_naive_selftrain, train_source
from adaptation.sweep import sweep
from common.errors import (ConfigurationError, DataError, DataIOError, NumericDivergenceError,
                           TasfarError)
from common.logger import get_logger, new_run_id
from config.adaptation import AdaptationConfig
from config.settings import OUTPUT_DIR
from ingest.csv_loader import load_csv
from ingest.split import SplitRule, holdout_split, split_by_predicate
from ingest.synthetic import ScenarioSpec, gen_scenario
from model.regressor import forward
from storage.artifacts import (write_dataset_csv, write_density_map_csv, write_json,
                               write_manifest, write_predictions_csv, write_pseudo_labels_csv,
                               write_tables)
from storage.model_file import load_meta, load_model, save_meta, save_model

logger = get_logger("cli")


def _config(args) -> AdaptationConfig:
    config = AdaptationConfig.from_json(args.config) if args.config else AdaptationConfig()
    if args.seed is not None:
        config = config.updated(seed=args.seed)
    return config


def _header(path: str) -> list[str]:
    if not Path(path).exists():
        raise DataIOError(f"file not found: {path}")
    return list(pd.read_csv(path, nrows=0).columns)


def _load_for_model(model_path: str, csv_path: str, require_labels: bool, tag: str):
    """Load a CSV with the feature columns and transform the model was trained with."""
    meta = load_meta(model_path) or {}
    label_names = meta.get("label_names") or []
    present = set(_header(csv_path))
    labels = [n for n in label_names if n in present]
    if require_labels and len(labels) != len(label_names):
        raise DataError(f"{Path(csv_path).name} lacks label columns {sorted(set(label_names) - present)}")
    transform = meta.get("transform")
    return load_csv(csv_path, label_columns=labels,
                    feature_columns=meta.get("feature_names"),
                    standardize=transform if transform is not None else False, tag=tag)


# ── Commands ──────────────────────────────────────────────────────────────────

def cmd_train_source(args) -> int:
    config = _config(args)
    data = load_csv(args.data, label_columns=args.labels, tag="source")
    train_data, calibration = holdout_split(data, args.calibration_fraction, config.seed)
    model, history = train_source(train_data, config)
    out = Path(args.out_dir)
    model_path = save_model(model, out / "source_model.bin")
    save_meta(model_path, data)
    cal_path = write_dataset_csv(calibration, out / "calibration.csv")
    write_json({"model": str(model_path), "calibration": str(cal_path),
                "train_rows": len(train_data), "calibration_rows": len(calibration),
                "loss_history": history, "config": config.model_dump()},
               out / "train_manifest.json")
    return 0


def cmd_adapt(args) -> int:
    config = _config(args)
    source_model = load_model(args.model)
    target = _load_for_model(args.model, args.target, False, "target")
    calibration = _load_for_model(args.model, args.calibration, True, "calibration")
    test = None
    if args.test:
        if not target.has_labels:
            raise DataError("--test needs a labeled target file")
        target, test = holdout_split(target, args.test, config.seed)

    out = Path(args.out_dir)
    run = adapt if args.method == "tasfar" else baseline_naive_selftrain
    try:
        outcome = run(source_model, target, config, calibration, test)
    except NumericDivergenceError as e:
        if e.report is not None:
            write_manifest(e.report, out / "manifest.json")
        raise

    meta = load_meta(args.model)
    model_path = save_model(outcome.target_model, out / "adapted_model.bin")
    artifacts = {"model": str(model_path)}
    if meta is not None:
        artifacts["model_meta"] = str(save_meta(model_path, calibration))
    artifacts["pseudo_labels"] = str(write_pseudo_labels_csv(
        outcome.pseudo_labels, out / "pseudo_labels.csv", calibration.label_names))
    for d, dmap in enumerate(outcome.density_maps):
        name = "density_map.csv" if len(outcome.density_maps) == 1 else f"density_map_{d}.csv"
        artifacts[name.removesuffix(".csv")] = str(write_density_map_csv(dmap, out / name))
    artifacts["predictions"] = str(write_predictions_csv(
        target,
        forward(source_model, target.features), forward(outcome.target_model, target.features),
        outcome.target_predictions, [p.input_index for p in outcome.split.confident],
        out / "predictions.csv", calibration.label_names))
    if test is not None:
        artifacts["predictions_test"] = str(write_predictions_csv(
            test,
            forward(source_model, test.features), forward(outcome.target_model, test.features),
            outcome.test_predictions, [p.input_index for p in outcome.test_split.confident],
            out / "predictions_test.csv", calibration.label_names))
    report = outcome.report.model_copy(update={"artifacts": artifacts})
    write_manifest(report, out / "manifest.json")
    print(json.dumps(report.reductions, indent=2, sort_keys=True, default=str))
    return 0


def cmd_evaluate(args) -> int:
    model = load_model(args.model)
    data = _load_for_model(args.model, args.data, True, "evaluate")
    metrics = evaluate(model, data).model_dump()
    if args.out:
        write_json(metrics, args.out)
    print(json.dumps(metrics, indent=2, sort_keys=True))
    return 0


def cmd_gen_scenario(args) -> int:
    if args.spec:
        spec = ScenarioSpec.from_json(args.spec)
    else:
        preset = ScenarioSpec.concentrated if args.preset == "concentrated" else ScenarioSpec.no_gap
        spec = preset(seed=args.seed or 0)
    source, target = gen_scenario(spec)
    out = Path(args.out_dir)
    write_dataset_csv(source, out / "source.csv")
    write_dataset_csv(target, out / "target.csv")
    (out / "scenario.json").write_text(spec.to_json(), encoding="utf-8")
    return 0


def cmd_sweep(args) -> int:
    config = _config(args)
    source_model = load_model(args.model)
    target = _load_for_model(args.model, args.target, True, "target")
    calibration = _load_for_model(args.model, args.calibration, True, "calibration")
    tables = sweep(source_model, target, calibration, config,
                   grid_cells=args.grid_cells, segments=args.segments, etas=args.etas)
    paths = write_tables(tables, args.out_dir)
    for name, df in tables.items():
        logger.info(f"{name} table ({len(df)} rows) → {paths[name]}")
    return 0


def cmd_split(args) -> int:
    data = load_csv(args.data, label_columns=args.labels, standardize=False)
    source, target = split_by_predicate(data, args.column, SplitRule(op=args.op, value=args.value))
    out = Path(args.out_dir)
    write_dataset_csv(source, out / "source.csv")
    write_dataset_csv(target, out / "target.csv")
    return 0


# ── Parser ────────────────────────────────────────────────────────────────────

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=str, default=None, help="AdaptationConfig JSON")
    common.add_argument("--seed", type=int, default=None, help="Override config seed")
    common.add_argument("--out-dir", type=str, default=OUTPUT_DIR, help="Output directory")

    parser = argparse.ArgumentParser(prog="tasfar",
                                     description="Source-free adaptation of regression models")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train-source", parents=[common], help="Fit a source model on labeled CSV")
    p.add_argument("--data", required=True)
    p.add_argument("--labels", nargs="+", required=True, help="Label column names")
    p.add_argument("--calibration-fraction", type=float, default=0.2)
    p.set_defaults(func=cmd_train_source)

    p = sub.add_parser("adapt", parents=[common], help="Adapt a model to unlabeled target data")
    p.add_argument("--model", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--calibration", required=True, help="Labeled source calibration CSV")
    p.add_argument("--method", choices=["tasfar", "naive"], default="tasfar")
    p.add_argument("--test", type=float, default=None,
                   help="Hold out this fraction of a labeled target for testing")
    p.set_defaults(func=cmd_adapt)

    p = sub.add_parser("evaluate", parents=[common], help="Metrics of a model on labeled CSV")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", default=None, help="Write metrics JSON here")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("gen-scenario", parents=[common], help="Synthetic source/target CSVs")
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--spec", help="ScenarioSpec JSON")
    group.add_argument("--preset", choices=["concentrated", "no_gap"])
    p.set_defaults(func=cmd_gen_scenario)

    p = sub.add_parser("sweep", parents=[common], help="Grid / segment / eta parameter tables")
    p.add_argument("--model", required=True)
    p.add_argument("--target", required=True, help="Labeled target CSV")
    p.add_argument("--calibration", required=True)
    p.add_argument("--grid-cells", type=int, nargs="+", default=[200, 100, 50, 20])
    p.add_argument("--segments", type=int, nargs="+", default=[10, 20, 40, 80])
    p.add_argument("--etas", type=float, nargs="+", default=[0.5, 0.7, 0.8, 0.9, 0.95])
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("split", parents=[common], help="Split a CSV on a column predicate")
    p.add_argument("--data", required=True)
    p.add_argument("--labels", nargs="*", default=[])
    p.add_argument("--column", required=True)
    p.add_argument("--op", choices=["<", "<=", ">", ">=", "==", "!="], required=True)
    p.add_argument("--value", type=float, required=True)
    p.set_defaults(func=cmd_split)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    new_run_id()
    try:
        return args.func(args)
    except TasfarError as e:
        logger.error(f"{args.command} failed: {type(e).__name__}: {e}")
        return e.exit_code
    except FileNotFoundError as e:
        logger.error(f"{args.command} failed: {e}")
        return DataError.exit_code
    except ValidationError as e:
        logger.error(f"{args.command} failed: invalid value: {e}")
        return ConfigurationError.exit_code


if __name__ == "__main__":
    sys.exit(main())
