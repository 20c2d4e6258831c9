"""Habitat maps as plain (P2) 8-bit graymaps.

Scaling rule, shared by the writer and anyone re-deriving pixels from the
CSV: ``level = 1 + floor(254 * (v - min) / (max - min) + 0.5)``; a constant
map is level 128 everywhere. Level 0 marks raster positions with no cell.
"""

from __future__ import annotations

import csv
import math
from typing import Optional

import numpy as np

from .grid import CovariateGrid

NO_DATA = 0
CONSTANT_LEVEL = 128


def scale_levels(values) -> np.ndarray:
    v = np.asarray(values, dtype=float)
    lo, hi = float(np.min(v)), float(np.max(v))
    if not hi > lo:
        return np.full(v.shape, CONSTANT_LEVEL, dtype=np.int64)
    return 1 + np.floor(254.0 * (v - lo) / (hi - lo) + 0.5).astype(np.int64)


def raster_layout(grid: CovariateGrid):
    """Row/column of each cell; north (largest lat) on top.

    Without coordinates cells fill a near-square raster in file order.
    """
    if grid.lon is not None and grid.lat is not None:
        xs = np.unique(np.round(grid.lon, 9))
        ys = np.unique(np.round(grid.lat, 9))[::-1]
        col = np.searchsorted(xs, np.round(grid.lon, 9))
        row = np.searchsorted(-ys, -np.round(grid.lat, 9))
        return row, col, ys.size, xs.size
    ncol = int(math.ceil(math.sqrt(grid.m)))
    nrow = int(math.ceil(grid.m / ncol))
    idx = np.arange(grid.m)
    return idx // ncol, idx % ncol, nrow, ncol


def render_pgm(values, grid: CovariateGrid, comment: Optional[str] = None) -> str:
    row, col, nrow, ncol = raster_layout(grid)
    img = np.full((nrow, ncol), NO_DATA, dtype=np.int64)
    img[row, col] = scale_levels(values)
    lines = ["P2"]
    if comment:
        lines.append(f"# {comment}")
    lines.append(f"{ncol} {nrow}")
    lines.append("255")
    lines.extend(" ".join(str(int(p)) for p in r) for r in img)
    return "\n".join(lines) + "\n"


def write_pgm(values, grid: CovariateGrid, path, comment: Optional[str] = None) -> None:
    with open(path, "w", newline="\n") as fh:
        fh.write(render_pgm(values, grid, comment))


def read_pgm(path) -> np.ndarray:
    tokens = []
    with open(path) as fh:
        for line in fh:
            if line.startswith("#"):
                continue
            tokens.extend(line.split())
    if tokens[0] != "P2":
        raise ValueError("not a plain PGM file")
    ncol, nrow = int(tokens[1]), int(tokens[2])
    return np.array([int(t) for t in tokens[4:4 + ncol * nrow]]).reshape(nrow, ncol)


def write_map_csv(values, grid: CovariateGrid, path, header_comment: Optional[str] = None,
                  label: str = "intensity") -> None:
    row, col, _, _ = raster_layout(grid)
    with open(path, "w", newline="") as fh:
        if header_comment:
            fh.write(f"# {header_comment}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "row", "col", label])
        for i in range(grid.m):
            w.writerow([int(grid.ids[i]), int(row[i]), int(col[i]), repr(float(values[i]))])


def write_presence_sidecar(grid: CovariateGrid, path, header_comment: Optional[str] = None) -> None:
    row, col, _, _ = raster_layout(grid)
    with open(path, "w", newline="") as fh:
        if header_comment:
            fh.write(f"# {header_comment}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "row", "col", "count"])
        for i in np.flatnonzero(grid.counts > 0):
            w.writerow([int(grid.ids[i]), int(row[i]), int(col[i]), int(grid.counts[i])])
