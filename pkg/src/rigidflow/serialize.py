"""Text formats: dataset JSONL, evaluation reports, candidate records.

Floats are written with 17 significant digits so every value round-trips
bit-exactly, and keys keep a fixed order so identical inputs give identical
bytes.
"""

from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np

from .errors import SchemaMismatch
from .scene import FullPose, MinimaSet, Minimum, SystemSpec

DATASET_SCHEMA = "rigidflow-dataset/1"
REPORT_SCHEMA = "rigidflow-report/1"
CANDIDATES_SCHEMA = "rigidflow-candidates/1"


def dumps(obj) -> str:
    """Compact JSON with ``.17g`` floats; non-finite floats become ``null``."""
    if obj is None or isinstance(obj, (bool, np.bool_)):
        return "null" if obj is None else ("true" if obj else "false")
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        return format(x, ".17g") if math.isfinite(x) else "null"
    if isinstance(obj, str):
        return json.dumps(obj)
    if isinstance(obj, dict):
        return "{" + ",".join(f"{json.dumps(str(k))}:{dumps(v)}" for k, v in obj.items()) + "}"
    if isinstance(obj, np.ndarray):
        return dumps(obj.tolist())
    if isinstance(obj, (list, tuple)):
        return "[" + ",".join(dumps(v) for v in obj) + "]"
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def _check_schema(record: dict, expected: str, where) -> None:
    found = record.get("schema", "<missing>")
    if found != expected:
        raise SchemaMismatch(f"{where}: schema {found!r} does not match expected {expected!r}")


# ------------------------------------------------------------------ dataset


def dataset_record(sys: SystemSpec, minima: MinimaSet) -> dict:
    return {
        "schema": DATASET_SCHEMA,
        "system": sys.to_dict(),
        "minima": {
            "e_min": minima.e_min,
            "entries": [{"pose": m.pose.to_dict(), "energy": m.energy, "e_rel": m.e_rel} for m in minima.minima],
        },
    }


def parse_dataset_record(record: dict, where="dataset") -> tuple[SystemSpec, MinimaSet]:
    _check_schema(record, DATASET_SCHEMA, where)
    sys = SystemSpec.from_dict(record["system"])
    m = record["minima"]
    minima = tuple(Minimum(FullPose.from_dict(e["pose"]), float(e["energy"]), float(e["e_rel"])) for e in m["entries"])
    return sys, MinimaSet(sys.system_id, minima, float(m["e_min"]))


def write_dataset(path, dataset) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for sys, minima in dataset:
            fh.write(dumps(dataset_record(sys, minima)) + "\n")


def read_dataset(path) -> list[tuple[SystemSpec, MinimaSet]]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if line.strip():
                out.append(parse_dataset_record(json.loads(line), f"{path}:{lineno}"))
    return out


# ------------------------------------------------------------------ reports


def write_report(path, report) -> None:
    Path(path).write_text(dumps({"schema": REPORT_SCHEMA, **report.to_dict()}) + "\n", encoding="utf-8")


def write_reports(path, reports) -> None:
    body = {"schema": REPORT_SCHEMA, "cells": [r.to_dict() for r in reports]}
    Path(path).write_text(dumps(body) + "\n", encoding="utf-8")


def write_table(path, text: str) -> None:
    Path(path).write_text(text, encoding="utf-8")


# --------------------------------------------------------------- candidates


def candidate_record(system_id: str, seed_index: int, pose: FullPose, trace=None) -> dict:
    rec = {"schema": CANDIDATES_SCHEMA, "system_id": system_id, "seed_index": seed_index, "pose": pose.to_dict()}
    if trace is not None:
        rec["trace"] = [{"t": p.t.tolist(), "R": p.R.tolist()} for p in trace]
    return rec


def write_jsonl(path, records) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rec in records:
            fh.write(dumps(rec) + "\n")
