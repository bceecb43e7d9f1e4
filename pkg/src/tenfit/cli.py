"""Command-line interface.

Subcommands cover the full pipeline: ingest a CSV into a tensor dataset,
fit/predict/evaluate single models, export factor analyses, compare
decompositions, and run multi-iteration experiments and OOD sweeps from
config files. Failures exit nonzero with a machine-readable JSON object on
stderr.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from .core import CATEGORICAL, ORDINAL, build_design_space, encode_observations
from .cpd import CPDModel
from .errors import ContractError, SchemaError, TenfitError
from .harness import run_experiment, run_sweep
from .metrics import component_expression_export, fms, regression_metrics
from .modelio import load_dataset, load_model, save_model, write_dataset
from .optim import TrainConfig, fit


def _read_csv_records(path) -> tuple[list[dict], list[str]]:
    with Path(path).open("r", newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if not reader.fieldnames:
            raise SchemaError(f"{path}: missing CSV header")
        return list(reader), list(reader.fieldnames)


def _is_numeric_column(records, name) -> bool:
    for record in records:
        try:
            float(record[name])
        except (TypeError, ValueError):
            return False
    return True


def _split_csv_list(text) -> list[str]:
    return [t.strip() for t in text.split(",") if t.strip()] if text else []


def cmd_ingest(args) -> int:
    records, fieldnames = _read_csv_records(args.data)
    if args.outcome not in fieldnames:
        raise SchemaError(f"outcome column {args.outcome!r} not in CSV header")
    axis_names = [n for n in fieldnames if n != args.outcome]
    ordinal = set(_split_csv_list(args.ordinal))
    categorical = set(_split_csv_list(args.categorical))
    for name in ordinal | categorical:
        if name not in axis_names:
            raise SchemaError(f"declared axis {name!r} not in CSV header")
    if ordinal & categorical:
        raise SchemaError(f"axes listed as both kinds: {sorted(ordinal & categorical)}")

    kinds = {}
    for name in axis_names:
        if name in ordinal:
            kinds[name] = ORDINAL
        elif name in categorical:
            kinds[name] = CATEGORICAL
        else:
            kinds[name] = ORDINAL if _is_numeric_column(records, name) else CATEGORICAL

    space = build_design_space(records, axis_names, args.outcome, kinds)
    obs = encode_observations(records, space, duplicates=args.duplicates)
    manifest = write_dataset(obs, args.out)
    manifest.update(
        {
            "n_observations": obs.n,
            "shape": list(space.shape()),
            "n_cells": space.n_cells(),
        }
    )
    print(json.dumps(manifest, indent=2))
    return 0


def _train_config(args, space) -> TrainConfig:
    if args.smooth_modes:
        smooth_modes = tuple(space.axis_position(n) for n in _split_csv_list(args.smooth_modes))
    else:
        smooth_modes = space.ordinal_modes()
    return TrainConfig(
        rank=args.rank,
        epochs=args.epochs,
        lr=args.lr,
        smooth_weight=args.lambda_smooth,
        smooth_modes=smooth_modes,
        seed=args.seed,
        restarts=args.restarts,
        patience=args.patience,
        val_fraction=args.val_fraction,
    )


def cmd_fit(args) -> int:
    space, obs = load_dataset(args.obs)
    cfg = _train_config(args, space)
    model, report = fit(
        space.shape(),
        obs,
        cfg,
        args.model,
        n_init_groups=args.groups,
        conv_channels=args.channels,
        hidden_units=args.hidden,
    )
    save_model(model, args.out)
    report_path = Path(args.out).with_suffix(".report.json")
    report_path.write_text(json.dumps(report.to_json()), encoding="utf-8")
    print(
        json.dumps(
            {
                "model": str(args.out),
                "report": str(report_path),
                "final_loss": report.final_loss,
                "restart": report.restart,
                "epochs_run": report.epochs_run,
            },
            indent=2,
        )
    )
    return 0


def _read_indices_csv(path, space) -> np.ndarray:
    names = [a.name for a in space.axes]
    with Path(path).open("r", newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = [n for n in names if n not in (reader.fieldnames or [])]
        if missing:
            raise SchemaError(f"indices CSV is missing columns {missing}")
        rows = [[int(r[n]) for n in names] for r in reader]
    return np.asarray(rows, dtype=np.int64).reshape(len(rows), space.ndim)


def cmd_predict(args) -> int:
    model = load_model(args.model)
    indices = _read_indices_csv(args.indices, model.space)
    preds = model.predict(indices) if indices.size else np.zeros(0)
    if args.denormalize:
        if model.normalizer is None:
            raise ContractError("model carries no normalizer; cannot denormalize")
        preds = model.normalizer.denormalize(preds)
    names = [a.name for a in model.space.axes]
    with Path(args.out).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(names + ["prediction"])
        for row, p in zip(indices, np.atleast_1d(preds)):
            writer.writerow([int(i) for i in row] + [repr(float(p))])
    print(json.dumps({"predictions": str(args.out), "n": int(indices.shape[0])}, indent=2))
    return 0


def cmd_evaluate(args) -> int:
    model = load_model(args.model)
    space, obs = load_dataset(args.test)
    if space.shape() != model.shape:
        raise ContractError(
            f"test-space shape {space.shape()} != model shape {model.shape}"
        )
    preds = model.predict(obs.indices)
    report = regression_metrics(obs.values, preds)
    Path(args.out).write_text(json.dumps(report.to_json(), indent=2), encoding="utf-8")
    print(json.dumps(report.to_json(), indent=2))
    return 0


def cmd_factors(args) -> int:
    model = load_model(args.model)
    if not isinstance(model, CPDModel):
        raise ContractError("factor export needs a linear model (cpd or cpd_s)")
    manifest = component_expression_export(
        model.factors,
        model.space,
        args.out,
        quantile=args.quantile,
        normalized=args.normalized,
    )
    print(json.dumps(manifest, indent=2))
    return 0


def cmd_fms(args) -> int:
    model_a = load_model(args.a)
    model_b = load_model(args.b)
    for label, model in (("--a", model_a), ("--b", model_b)):
        if not isinstance(model, CPDModel):
            raise ContractError(f"{label} must be a linear model (cpd or cpd_s)")
    comparison = fms(model_a.factors, model_b.factors)
    Path(args.out).write_text(json.dumps(comparison.to_json(), indent=2), encoding="utf-8")
    print(json.dumps(comparison.to_json(), indent=2))
    return 0


def cmd_experiment(args) -> int:
    config = json.loads(Path(args.config).read_text(encoding="utf-8"))
    summary = run_experiment(config, args.out)
    print(json.dumps({"out": str(args.out), "failures": len(summary["failures"])}, indent=2))
    return 0


def cmd_sweep(args) -> int:
    config = json.loads(Path(args.config).read_text(encoding="utf-8"))
    run_sweep(config, args.out)
    print(json.dumps({"out": str(args.out)}, indent=2))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tenfit",
        description="Tensor-completion surrogate modeling for discrete design spaces.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="convert a dataset CSV into a tensor dataset directory")
    p.add_argument("--data", required=True, help="input CSV with axis columns and one outcome")
    p.add_argument("--outcome", required=True, help="outcome column name")
    p.add_argument("--ordinal", default="", help="comma-separated ordinal columns")
    p.add_argument("--categorical", default="", help="comma-separated categorical columns")
    p.add_argument("--duplicates", choices=("mean", "error"), default="mean")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("fit", help="train one model on a dataset directory")
    p.add_argument("--obs", required=True, help="dataset directory from ingest")
    p.add_argument("--model", required=True, choices=("cpd", "cpd_s", "costco"))
    p.add_argument("--rank", type=int, required=True)
    p.add_argument("--epochs", type=int, default=3000)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--lambda-smooth", dest="lambda_smooth", type=float, default=0.1)
    p.add_argument("--smooth-modes", dest="smooth_modes", default="", help="axis names (default: ordinal axes)")
    p.add_argument("--restarts", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--patience", type=int, default=None)
    p.add_argument("--val-fraction", dest="val_fraction", type=float, default=0.0)
    p.add_argument("--groups", type=int, default=3, help="costco: initialization groups")
    p.add_argument("--channels", type=int, default=8, help="costco: conv channels")
    p.add_argument("--hidden", type=int, default=16, help="costco: dense width")
    p.add_argument("--out", required=True, help="model JSON path")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("predict", help="predict at index tuples listed in a CSV")
    p.add_argument("--model", required=True)
    p.add_argument("--indices", required=True, help="CSV with one 0-based index column per axis")
    p.add_argument("--denormalize", action="store_true", help="emit original outcome units")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="score a model against a test dataset directory")
    p.add_argument("--model", required=True)
    p.add_argument("--test", required=True, help="dataset directory holding the test rows")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("factors", help="export per-mode component magnitudes")
    p.add_argument("--model", required=True)
    p.add_argument("--normalized", action="store_true", help="l2-normalize columns first")
    p.add_argument("--quantile", type=float, default=0.75)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_factors)

    p = sub.add_parser("fms", help="factor match score between two linear models")
    p.add_argument("--a", required=True)
    p.add_argument("--b", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fms)

    p = sub.add_parser("experiment", help="run a multi-iteration experiment config")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_experiment)

    p = sub.add_parser("sweep", help="run an OOD sample-count sweep config")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (TenfitError, TypeError, FileNotFoundError, json.JSONDecodeError, KeyError) as exc:
        payload = {"error": type(exc).__name__, "message": str(exc)}
        print(json.dumps(payload), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
