"""Versioned CSV files.

The first line of every file is ``# spatial-sir-csv v1 <kind>``; readers
reject other versions.  Floats are written with ``repr`` so values round-trip
exactly and reruns produce byte-identical files.
"""
from __future__ import annotations

import csv
import math
from pathlib import Path

__all__ = ["SCHEMA_VERSION", "SchemaError", "write_csv", "read_csv", "format_value"]

SCHEMA_VERSION = "v1"
_MAGIC = "# spatial-sir-csv"


class SchemaError(ValueError):
    pass


def format_value(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, float) or type(v).__name__.startswith("float"):
        v = float(v)
        return repr(v) if math.isfinite(v) else ("nan" if math.isnan(v) else ("inf" if v > 0 else "-inf"))
    return str(v)


def write_csv(path, kind: str, columns, rows) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        fh.write(f"{_MAGIC} {SCHEMA_VERSION} {kind}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            if len(row) != len(columns):
                raise SchemaError(f"row has {len(row)} fields, expected {len(columns)}")
            w.writerow([format_value(v) for v in row])
    return path


def read_csv(path, kind: str | None = None) -> tuple[list[str], list[dict]]:
    """Return ``(columns, rows)``; rows are dicts of strings."""
    with open(path, newline="") as fh:
        first = fh.readline().rstrip("\n").split()
        if len(first) < 4 or " ".join(first[:2]) != _MAGIC:
            raise SchemaError(f"{path}: missing schema header")
        if first[2] != SCHEMA_VERSION:
            raise SchemaError(f"{path}: unsupported schema version {first[2]!r}")
        if kind is not None and first[3] != kind:
            raise SchemaError(f"{path}: expected kind {kind!r}, found {first[3]!r}")
        reader = csv.reader(fh)
        columns = next(reader)
        rows = [dict(zip(columns, r)) for r in reader]
    return columns, rows
