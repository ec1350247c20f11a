"""JSON and CSV report writing.

Floats are written with 17 significant digits so every value survives a
round trip exactly; non-finite floats become the strings ``"inf"``,
``"-inf"`` and ``"nan"`` (plain JSON has no spelling for them).  Key order is
the insertion order of the report dict, so identical runs give
byte-identical files.  Run metadata that changes between runs (timestamp,
wall-clock) goes to a separate ``*.meta.json`` file.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import math
from importlib import resources
from pathlib import Path

import numpy as np

NONFINITE = {"inf": math.inf, "-inf": -math.inf, "nan": math.nan}


def to_plain(obj):
    """Convert dataclasses, numpy scalars/arrays and tuples into JSON-ready Python objects."""
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        return {f.name: to_plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, dict):
        return {("null" if k is None else str(k)): to_plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [to_plain(v) for v in obj.tolist()]
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        return float(obj)
    return obj


def _fmt_float(x: float) -> str:
    if math.isnan(x):
        return '"nan"'
    if math.isinf(x):
        return '"inf"' if x > 0 else '"-inf"'
    s = format(x, ".17g")
    if not any(ch in s for ch in ".en"):
        s += ".0"
    return s


def dumps(obj, indent: int = 2, _level: int = 0) -> str:
    """Serialize a plain object; floats use 17 significant digits."""
    pad = " " * (indent * (_level + 1))
    end = " " * (indent * _level)
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f"{pad}{json.dumps(str(k))}: {dumps(v, indent, _level + 1)}" for k, v in obj.items()]
        return "{\n" + ",\n".join(items) + "\n" + end + "}"
    if isinstance(obj, list):
        if not obj:
            return "[]"
        if all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in obj):
            return "[" + ", ".join(_fmt_float(v) if isinstance(v, float) else str(v) for v in obj) + "]"
        return "[\n" + ",\n".join(pad + dumps(v, indent, _level + 1) for v in obj) + "\n" + end + "]"
    if isinstance(obj, bool) or obj is None:
        return json.dumps(obj)
    if isinstance(obj, float):
        return _fmt_float(obj)
    if isinstance(obj, int):
        return str(obj)
    return json.dumps(obj)


def _revive(obj):
    if isinstance(obj, dict):
        return {k: _revive(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_revive(v) for v in obj]
    if isinstance(obj, str) and obj in NONFINITE:
        return NONFINITE[obj]
    return obj


def loads(text: str):
    """Inverse of :func:`dumps`, restoring non-finite floats."""
    return _revive(json.loads(text))


def load_schema() -> dict:
    return json.loads(resources.files("insider_val").joinpath("schemas/report.schema.json").read_text())


def validate(report: dict) -> None:
    """Validate a plain report against the shipped JSON schema."""
    import jsonschema

    jsonschema.validate(json.loads(dumps(report)), load_schema())


def write_json(report: dict, path, meta: dict | None = None) -> Path:
    path = Path(path)
    text = dumps(report) + "\n"
    path.write_text(text)
    if meta is not None:
        path.with_suffix(".meta.json").write_text(dumps(to_plain(meta)) + "\n")
    return path


CSV_COLUMNS = ("t", "wealth", "oracle", "density")


def write_csv(rows, path, columns=CSV_COLUMNS) -> Path:
    """Write rows of floats with 17 significant digits under a fixed header."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(columns)
        for row in rows:
            w.writerow([format(float(v), ".17g") for v in row])
    return path
