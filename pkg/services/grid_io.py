"""
services/grid_io.py

SweepGrid serialization.

CSV layout:
    # {"kind": ..., "provenance": {...}, "axes": [...], "columns": [...]}
    <axis names...>,<columns...>,error
    one row per cell, row-major (last axis fastest)

Floats are written with repr so they reload bit-exactly; infinities are the
literals ``inf``/``-inf``; a column a cell does not have is an empty field.
JSON mirrors SweepGrid.to_dict with non-finite floats as the strings "inf",
"-inf" and "nan" and absent values as null.
"""

from __future__ import annotations

import csv
import io
import math
from pathlib import Path
from typing import Any, Literal, Optional

import orjson

from core.errors import DatasetFormatError
from services.sweep import GridAxis, GridCell, SweepGrid, empty_grid
from utils.atomic_persistence import write_bytes_atomic


GridFormat = Literal["csv", "json"]

_NON_FINITE = {"inf": math.inf, "-inf": -math.inf, "nan": math.nan}


def _encode(value: Any) -> Any:
    if isinstance(value, float) and not math.isfinite(value):
        return repr(value)
    if isinstance(value, dict):
        return {k: _encode(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_encode(v) for v in value]
    return value


def _decode_float(value: Any) -> float:
    if isinstance(value, str):
        return _NON_FINITE[value]
    return float(value)


def _header(grid: SweepGrid) -> dict[str, Any]:
    return {
        "kind": grid.kind,
        "provenance": grid.provenance,
        "axes": [a.to_dict() for a in grid.axes],
        "columns": grid.columns,
    }


def _cell_record(grid: SweepGrid, cell: GridCell) -> dict[str, Any]:
    return {
        "index": list(cell.index),
        "values": [float(cell.values[name]) if name in cell.values else None for name in grid.columns],
        "error": cell.error,
    }


def dumps_grid(grid: SweepGrid, fmt: GridFormat = "csv") -> bytes:
    if fmt == "json":
        doc = {**_header(grid), "cells": [_cell_record(grid, c) for c in grid.cells]}
        return orjson.dumps(_encode(doc), option=orjson.OPT_INDENT_2) + b"\n"

    buf = io.StringIO()
    buf.write("# " + orjson.dumps(_encode(_header(grid))).decode("utf-8") + "\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow([a.name for a in grid.axes] + grid.columns + ["error"])
    for cell in grid.cells:
        coords = [repr(float(cell.coords[a.name])) for a in grid.axes]
        values = ["" if name not in cell.values else repr(float(cell.values[name])) for name in grid.columns]
        writer.writerow(coords + values + [cell.error or ""])
    return buf.getvalue().encode("utf-8")


def emit(grid: SweepGrid, fmt: GridFormat, path: Path | str) -> Path:
    """Write the grid atomically; I/O errors carry the path."""
    return write_bytes_atomic(dumps_grid(grid, fmt), path)


def _axes_from(header: dict[str, Any]) -> list[GridAxis]:
    return [
        GridAxis(name=a["name"], values=tuple(_decode_float(v) for v in a["values"]), scale=a.get("scale", "linear"))
        for a in header["axes"]
    ]


def _blank_grid(header: dict[str, Any]) -> SweepGrid:
    grid = empty_grid(header["kind"], _axes_from(header), dict(header["provenance"]))
    grid.columns = list(header["columns"])
    return grid


def _loads_json(raw: bytes) -> SweepGrid:
    doc = orjson.loads(raw)
    grid = _blank_grid(doc)
    if len(doc["cells"]) != len(grid.cells):
        raise DatasetFormatError(f"expected {len(grid.cells)} cells, found {len(doc['cells'])}")
    for cell, record in zip(grid.cells, doc["cells"]):
        if tuple(record["index"]) != cell.index:
            raise DatasetFormatError(f"cell {record['index']} out of order")
        cell.values = {
            name: _decode_float(v) for name, v in zip(grid.columns, record["values"]) if v is not None
        }
        cell.error = record["error"]
    return grid


def _loads_csv(raw: bytes) -> SweepGrid:
    text = raw.decode("utf-8")
    first, _, body = text.partition("\n")
    if not first.startswith("# "):
        raise DatasetFormatError("missing grid header line", line=1)
    grid = _blank_grid(orjson.loads(first[2:]))
    reader = csv.reader(io.StringIO(body))
    columns = next(reader, None)
    n_axes = len(grid.axes)
    if columns is None or columns[n_axes:-1] != grid.columns:
        raise DatasetFormatError("column header does not match the grid header", line=2)
    rows = [row for row in reader if row]
    if len(rows) != len(grid.cells):
        raise DatasetFormatError(f"expected {len(grid.cells)} rows, found {len(rows)}")
    for line, (cell, row) in enumerate(zip(grid.cells, rows), start=3):
        coords = [float(v) for v in row[:n_axes]]
        expected = [cell.coords[a.name] for a in grid.axes]
        if any(c != e and not (math.isnan(c) and math.isnan(e)) for c, e in zip(coords, expected)):
            raise DatasetFormatError(f"coordinates {coords} out of order", line=line)
        cell.values = {name: float(v) for name, v in zip(grid.columns, row[n_axes:-1]) if v != ""}
        cell.error = row[-1] or None
    return grid


def loads_grid(raw: bytes, fmt: GridFormat) -> SweepGrid:
    return _loads_json(raw) if fmt == "json" else _loads_csv(raw)


def load_grid(path: Path | str, fmt: Optional[GridFormat] = None) -> SweepGrid:
    path = Path(path)
    fmt = fmt or ("json" if path.suffix.lower() == ".json" else "csv")
    return loads_grid(path.read_bytes(), fmt)
