"""JSON/CSV persistence for schemas, observations, and fitted models.

Floats are emitted through Python's shortest-round-trip repr, so every load
is bit-exact against the arrays that were saved.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from .core import Axis, DesignSpace, Normalizer, ObservationSet
from .cpd import CPDModel, FactorSet, SmoothnessConfig
from .errors import ContractError, SchemaError
from .neural import ConvHead, EmbeddingBank, NeuralModel

SCHEMA_FILENAME = "schema.json"
OBSERVATIONS_FILENAME = "obs.csv"
NORMALIZER_FILENAME = "normalizer.json"


def schema_to_json(space: DesignSpace) -> dict:
    return {
        "axes": [
            {"name": a.name, "kind": a.kind, "values": list(a.values)} for a in space.axes
        ],
        "outcome": space.outcome_name,
    }


def schema_from_json(payload: dict) -> DesignSpace:
    try:
        axes = tuple(
            Axis(name=a["name"], kind=a["kind"], values=tuple(a["values"]))
            for a in payload["axes"]
        )
        return DesignSpace(axes=axes, outcome_name=payload["outcome"])
    except (KeyError, TypeError) as exc:
        raise SchemaError(f"malformed schema JSON: {exc}") from exc


def write_schema(space: DesignSpace, path) -> None:
    Path(path).write_text(json.dumps(schema_to_json(space), indent=2), encoding="utf-8")


def read_schema(path) -> DesignSpace:
    return schema_from_json(json.loads(Path(path).read_text(encoding="utf-8")))


def write_normalizer(normalizer: Normalizer, path) -> None:
    payload = {"y_min": normalizer.y_min, "y_max": normalizer.y_max}
    Path(path).write_text(json.dumps(payload, indent=2), encoding="utf-8")


def read_normalizer(path) -> Normalizer:
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    return Normalizer(y_min=float(payload["y_min"]), y_max=float(payload["y_max"]))


def write_observations_csv(obs: ObservationSet, path) -> None:
    """0-based index columns (named after the axes) plus a value column."""
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow([a.name for a in obs.space.axes] + ["value"])
        for row, value in zip(obs.indices, obs.values):
            writer.writerow([int(i) for i in row] + [repr(float(value))])


def read_observations_csv(path, space: DesignSpace, normalizer: Normalizer) -> ObservationSet:
    with Path(path).open("r", newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        names = [a.name for a in space.axes]
        missing = [n for n in (*names, "value") if n not in (reader.fieldnames or [])]
        if missing:
            raise SchemaError(f"observations CSV is missing columns {missing}")
        indices, values = [], []
        for row in reader:
            indices.append([int(row[n]) for n in names])
            values.append(float(row["value"]))
    return ObservationSet(
        space=space,
        indices=np.asarray(indices, dtype=np.int64).reshape(len(values), space.ndim),
        values=np.asarray(values, dtype=float),
        normalizer=normalizer,
    )


def write_dataset(obs: ObservationSet, out_dir) -> dict:
    """Persist an ingested dataset as schema.json + obs.csv + normalizer.json."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_schema(obs.space, out / SCHEMA_FILENAME)
    write_observations_csv(obs, out / OBSERVATIONS_FILENAME)
    write_normalizer(obs.normalizer, out / NORMALIZER_FILENAME)
    return {
        "schema": str(out / SCHEMA_FILENAME),
        "observations": str(out / OBSERVATIONS_FILENAME),
        "normalizer": str(out / NORMALIZER_FILENAME),
    }


def load_dataset(path):
    """Read (space, observations) from an ingest directory."""
    root = Path(path)
    if not root.is_dir():
        raise SchemaError(f"dataset path {root} is not an ingest directory")
    space = read_schema(root / SCHEMA_FILENAME)
    normalizer = read_normalizer(root / NORMALIZER_FILENAME)
    obs = read_observations_csv(root / OBSERVATIONS_FILENAME, space, normalizer)
    return space, obs


def _array_to_json(array: np.ndarray) -> dict:
    array = np.asarray(array, dtype=float)
    return {"shape": list(array.shape), "data": array.ravel().tolist()}


def _array_from_json(payload: dict) -> np.ndarray:
    return np.asarray(payload["data"], dtype=float).reshape(payload["shape"])


def save_model(model, path) -> None:
    """Write a fitted model (linear or neural) as a single JSON file."""
    payload = {
        "format_version": 1,
        "kind": model.kind,
        "rank": model.rank,
        "shape": list(model.shape),
        "schema": schema_to_json(model.space),
        "normalizer": (
            {"y_min": model.normalizer.y_min, "y_max": model.normalizer.y_max}
            if model.normalizer is not None
            else None
        ),
    }
    if isinstance(model, CPDModel):
        payload["smoothness"] = {
            "weight": model.smoothness.weight,
            "modes": list(model.smoothness.modes),
        }
        payload["params"] = {"factors": [_array_to_json(f) for f in model.factors.factors]}
    elif isinstance(model, NeuralModel):
        head = model.head
        payload["config"] = {
            "n_init_groups": model.bank.n_groups,
            "conv_channels": head.channels,
            "hidden_units": head.hidden_units,
        }
        payload["params"] = {
            "embeddings": [
                [_array_to_json(e) for e in group] for group in model.bank.groups
            ],
            "mode_kernels": _array_to_json(head.mode_kernels),
            "mode_bias": _array_to_json(head.mode_bias),
            "rank_kernels": _array_to_json(head.rank_kernels),
            "rank_bias": _array_to_json(head.rank_bias),
            "dense_w": _array_to_json(head.dense_w),
            "dense_b": _array_to_json(head.dense_b),
            "out_w": _array_to_json(head.out_w),
            "out_b": _array_to_json(head.out_b),
        }
    else:
        raise ContractError(f"cannot serialize model type {type(model).__name__}")
    Path(path).write_text(json.dumps(payload), encoding="utf-8")


def load_model(path):
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    kind = payload.get("kind")
    space = schema_from_json(payload["schema"])
    norm = payload.get("normalizer")
    normalizer = Normalizer(float(norm["y_min"]), float(norm["y_max"])) if norm else None

    if kind in ("cpd", "cpd_s"):
        factors = FactorSet([_array_from_json(f) for f in payload["params"]["factors"]])
        smooth = payload.get("smoothness", {})
        return CPDModel(
            kind=kind,
            factors=factors,
            space=space,
            normalizer=normalizer,
            smoothness=SmoothnessConfig(
                weight=float(smooth.get("weight", 0.0)),
                modes=tuple(smooth.get("modes", ())),
            ),
        )
    if kind == "costco":
        params = payload["params"]
        bank = EmbeddingBank(
            [[_array_from_json(e) for e in group] for group in params["embeddings"]]
        )
        head = ConvHead(
            mode_kernels=_array_from_json(params["mode_kernels"]),
            mode_bias=_array_from_json(params["mode_bias"]),
            rank_kernels=_array_from_json(params["rank_kernels"]),
            rank_bias=_array_from_json(params["rank_bias"]),
            dense_w=_array_from_json(params["dense_w"]),
            dense_b=_array_from_json(params["dense_b"]),
            out_w=_array_from_json(params["out_w"]),
            out_b=_array_from_json(params["out_b"]),
        )
        return NeuralModel(bank=bank, head=head, space=space, normalizer=normalizer)
    raise ContractError(f"unknown model kind {kind!r} in {path}")
