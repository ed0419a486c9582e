"""File formats for grid arrays.

CSV: header ``i,j,x,y,value``, one line per cell, ``i`` (action) varying slowest,
0-based indices.  JSON: ``{"n_x": .., "n_y": .., "values": [...]}`` with the
values flattened in the same row-major order.  Floats are written with 17
significant digits so a write/read cycle reproduces every double exactly.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from .grid import GridError, GridSpec, as_array

CSV_HEADER = ("i", "j", "x", "y", "value")


def fmt(v: float) -> str:
    return format(float(v), ".17g")


def write_grid_csv(path, a, grid: GridSpec) -> Path:
    arr = as_array(a)
    grid.check_shape(arr)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        fh.write(",".join(CSV_HEADER) + "\n")
        for i in range(grid.n_x):
            xs = fmt(grid.x_hat[i])
            for j in range(grid.n_y):
                fh.write(f"{i},{j},{xs},{fmt(grid.y_hat[j])},{fmt(arr[i, j])}\n")
    return path


def read_grid_csv(path) -> tuple[np.ndarray, GridSpec]:
    with Path(path).open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != CSV_HEADER:
            raise GridError(f"{path}: expected header {','.join(CSV_HEADER)}")
        rows = [(int(r[0]), int(r[1]), float(r[4])) for r in reader if r]
    if not rows:
        raise GridError(f"{path}: no data rows")
    n_x = max(r[0] for r in rows) + 1
    n_y = max(r[1] for r in rows) + 1
    if len(rows) != n_x * n_y:
        raise GridError(f"{path}: {len(rows)} rows do not fill a {n_x}x{n_y} grid")
    arr = np.full((n_x, n_y), np.nan)
    for i, j, v in rows:
        arr[i, j] = v
    if np.isnan(arr).any():
        raise GridError(f"{path}: duplicate or missing cells")
    return arr, GridSpec(n_x, n_y)


def grid_to_json(a, grid: GridSpec) -> dict:
    arr = as_array(a)
    grid.check_shape(arr)
    return {"n_x": grid.n_x, "n_y": grid.n_y, "values": [float(v) for v in arr.ravel()]}


def grid_from_json(obj: dict) -> tuple[np.ndarray, GridSpec]:
    grid = GridSpec(obj["n_x"], obj["n_y"])
    values = np.asarray(obj["values"], dtype=float)
    if values.size != grid.n_x * grid.n_y:
        raise GridError(f"expected {grid.n_x * grid.n_y} values, got {values.size}")
    return values.reshape(grid.shape), grid


def write_json(path, obj) -> Path:
    # Python's float repr is the shortest round-tripping form.
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    return path


def read_json(path):
    return json.loads(Path(path).read_text())
