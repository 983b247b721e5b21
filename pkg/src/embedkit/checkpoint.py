"""Checkpoint serialization: one JSON document per model.

Floats are printed with 17 significant digits, which uniquely identifies a
float64, so save -> load -> save produces byte-identical files.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .encoder import EncoderParams, LoraAdapter
from .errors import CheckpointVersionError, ParseError
from .fileio import atomic_write_text

FORMAT_VERSION = 1

_FIELDS = ("format_version", "d_in", "d_out", "rank", "W", "b", "A", "B",
           "scaling", "theta_per_task", "rng_seed")


@dataclass
class Checkpoint:
    params: EncoderParams
    theta_per_task: dict[str, float]
    rng_seed: int


def _fmt(value) -> str:
    if isinstance(value, bool):
        raise TypeError("unexpected bool in checkpoint payload")
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return format(float(value), ".17g")
    if isinstance(value, str):
        return json.dumps(value)
    if isinstance(value, np.ndarray):
        return _fmt(value.tolist())
    if isinstance(value, (list, tuple)):
        return "[" + ", ".join(_fmt(v) for v in value) + "]"
    if isinstance(value, Mapping):
        items = sorted(value.items())
        return "{" + ", ".join(f"{json.dumps(k)}: {_fmt(v)}" for k, v in items) + "}"
    raise TypeError(f"cannot serialize {type(value).__name__}")


def checkpoint_to_json(params: EncoderParams, theta_per_task: Mapping[str, float],
                       rng_seed: int) -> str:
    adapter = params.adapter
    doc = {
        "format_version": FORMAT_VERSION,
        "d_in": params.d_in,
        "d_out": params.d_out,
        "rank": 0 if adapter is None else adapter.rank,
        "W": params.W,
        "b": params.b,
        "A": np.zeros((0, 0)) if adapter is None else adapter.A,
        "B": np.zeros((0, 0)) if adapter is None else adapter.B,
        "scaling": 1.0 if adapter is None else adapter.scaling,
        "theta_per_task": {k: float(v) for k, v in theta_per_task.items()},
        "rng_seed": int(rng_seed),
    }
    body = ",\n".join(f"  {json.dumps(k)}: {_fmt(doc[k])}" for k in _FIELDS)
    return "{\n" + body + "\n}\n"


def save_checkpoint(params: EncoderParams, theta_per_task: Mapping[str, float],
                    path, rng_seed: int = 0) -> None:
    atomic_write_text(path, checkpoint_to_json(params, theta_per_task, rng_seed))


def load_checkpoint(path) -> Checkpoint:
    with open(path, "r", encoding="utf-8") as fh:
        text = fh.read()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"checkpoint {path}: {exc}") from exc
    if not isinstance(doc, dict) or "format_version" not in doc:
        raise ParseError(f"checkpoint {path}: missing format_version")
    if doc["format_version"] != FORMAT_VERSION:
        raise CheckpointVersionError(
            f"checkpoint {path} has format_version {doc['format_version']}, "
            f"this reader supports {FORMAT_VERSION}"
        )
    missing = [k for k in _FIELDS if k not in doc]
    if missing:
        raise ParseError(f"checkpoint {path}: missing fields {missing}")
    try:
        w = np.asarray(doc["W"], dtype=np.float64)
        b = np.asarray(doc["b"], dtype=np.float64)
        rank = int(doc["rank"])
        adapter = None
        if rank > 0:
            adapter = LoraAdapter(
                A=np.asarray(doc["A"], dtype=np.float64),
                B=np.asarray(doc["B"], dtype=np.float64),
                scaling=float(doc["scaling"]),
            )
        params = EncoderParams(W=w, b=b, adapter=adapter)
        thetas = {str(k): float(v) for k, v in doc["theta_per_task"].items()}
        return Checkpoint(params=params, theta_per_task=thetas,
                          rng_seed=int(doc["rng_seed"]))
    except (TypeError, ValueError) as exc:
        raise ParseError(f"checkpoint {path}: {exc}") from exc
