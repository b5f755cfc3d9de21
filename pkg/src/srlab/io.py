"""Matrix and plan file formats (CSV without header, or JSON arrays of arrays)."""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from .ot_core import TransportPlan


def read_matrix(path) -> np.ndarray:
    path = Path(path)
    if path.suffix.lower() == ".json":
        data = json.loads(path.read_text())
    else:
        with path.open(newline="") as fh:
            data = [[float(x) for x in row] for row in csv.reader(fh) if row]
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"{path}: expected a rectangular 2-D matrix")
    return arr


def write_matrix(matrix, path) -> None:
    path = Path(path)
    matrix = np.asarray(matrix, dtype=np.float64)
    if path.suffix.lower() == ".json":
        path.write_text(json.dumps(matrix.tolist()))
        return
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        for row in matrix:
            writer.writerow([repr(float(x)) for x in row])


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json") if path.suffix.lower() != ".json" else path.with_suffix(".meta.json")


def write_plan(plan: TransportPlan, path) -> Path:
    """Write the plan matrix and its ``{converged, iterations, final_residual}`` sidecar."""
    write_matrix(plan.values, path)
    side = sidecar_path(path)
    side.write_text(json.dumps(plan.sidecar(), indent=2))
    return side
