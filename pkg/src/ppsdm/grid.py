"""Gridded study areas: covariates, quadrature weights and presence counts.

A study area is discretised into ``m`` cells. Every cell carries a quadrature
weight ``w`` (its area), a habitat feature vector ``x``, optional bias
features ``z`` (``z_*`` columns), optional accessibility features ``v``
(``v_*`` columns) and the number of presence records that fall in it.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import GridParseError, GridValidationError

RESERVED = ("id", "presence", "w", "lon", "lat", "region", "distance")


@dataclass(frozen=True)
class Cell:
    id: int
    lon: float
    lat: float
    w: float
    x: np.ndarray
    z: np.ndarray
    v: np.ndarray
    presence_count: int


@dataclass(frozen=True)
class FeatureTransform:
    """Column-wise standardisation ``(x - mean) / sd``.

    Coefficient vectors are laid out as ``(intercept, slope_1, ..., slope_p)``.
    """

    mean: np.ndarray
    sd: np.ndarray

    @classmethod
    def fit(cls, X: np.ndarray) -> "FeatureTransform":
        X = np.asarray(X, dtype=float)
        if X.shape[1] == 0:
            return cls(np.zeros(0), np.ones(0))
        mean = X.mean(axis=0)
        sd = X.std(axis=0)
        sd = np.where(sd > 1e-12 * np.maximum(1.0, np.abs(mean)), sd, 1.0)
        return cls(mean, sd)

    @classmethod
    def identity(cls, p: int) -> "FeatureTransform":
        return cls(np.zeros(p), np.ones(p))

    def apply(self, X: np.ndarray) -> np.ndarray:
        return (np.asarray(X, dtype=float) - self.mean) / self.sd

    def to_original(self, coef: np.ndarray) -> np.ndarray:
        coef = np.asarray(coef, dtype=float)
        slopes = coef[1:] / self.sd
        return np.concatenate([[coef[0] - slopes @ self.mean], slopes])

    def to_standard(self, coef: np.ndarray) -> np.ndarray:
        coef = np.asarray(coef, dtype=float)
        slopes = coef[1:] * self.sd
        return np.concatenate([[coef[0] + coef[1:] @ self.mean], slopes])

    def jacobian(self) -> np.ndarray:
        """Linear map taking standardised coefficients to original ones."""
        p = len(self.mean)
        A = np.zeros((p + 1, p + 1))
        A[0, 0] = 1.0
        A[0, 1:] = -self.mean / self.sd
        A[1:, 1:] = np.diag(1.0 / self.sd)
        return A


@dataclass
class CovariateGrid:
    w: np.ndarray
    X: np.ndarray
    counts: np.ndarray
    area: float = float("nan")
    ids: Optional[np.ndarray] = None
    Z: Optional[np.ndarray] = None
    V: Optional[np.ndarray] = None
    U: Optional[np.ndarray] = None
    lon: Optional[np.ndarray] = None
    lat: Optional[np.ndarray] = None
    region: Optional[np.ndarray] = None
    distance: Optional[np.ndarray] = None
    x_names: Sequence[str] = ()
    z_names: Sequence[str] = ()
    v_names: Sequence[str] = ()
    u_names: Sequence[str] = ()
    _x_transform: Optional[FeatureTransform] = field(default=None, repr=False)

    def __post_init__(self):
        self.w = np.asarray(self.w, dtype=float).reshape(-1)
        m = self.w.shape[0]
        self.X = np.asarray(self.X, dtype=float).reshape(m, -1)
        self.counts = np.asarray(self.counts).reshape(-1)
        for name in ("Z", "V", "U"):
            arr = getattr(self, name)
            arr = np.zeros((m, 0)) if arr is None else np.asarray(arr, dtype=float).reshape(m, -1)
            setattr(self, name, arr)
        if self.ids is None:
            self.ids = np.arange(m)
        self.ids = np.asarray(self.ids, dtype=np.int64)
        if math.isnan(self.area):
            self.area = float(self.w.sum())
        if not self.x_names:
            self.x_names = tuple(f"x{j + 1}" for j in range(self.p))
        if not self.z_names:
            self.z_names = tuple(f"z_{j + 1}" for j in range(self.Z.shape[1]))
        if not self.v_names:
            self.v_names = tuple(f"v_{j + 1}" for j in range(self.V.shape[1]))
        if not self.u_names:
            self.u_names = tuple(f"u_{j + 1}" for j in range(self.U.shape[1]))
        self.validate()

    # -- shape -------------------------------------------------------------
    @property
    def m(self) -> int:
        return self.w.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]

    @property
    def n(self) -> int:
        return int(self.counts.sum())

    @property
    def presence(self) -> "PresenceSet":
        return PresenceSet.from_counts(self.ids, self.counts)

    def validate(self) -> None:
        if self.m < 1:
            raise GridValidationError("grid has no cells")
        if np.any(~np.isfinite(self.w)) or np.any(self.w <= 0):
            i = int(np.flatnonzero(~(self.w > 0) | ~np.isfinite(self.w))[0])
            raise GridValidationError(f"row {i}: column 'w' must be positive and finite, got {self.w[i]}")
        if np.any(self.counts < 0) or not np.all(np.equal(np.mod(self.counts, 1), 0)):
            i = int(np.flatnonzero((self.counts < 0) | (np.mod(self.counts, 1) != 0))[0])
            raise GridValidationError(f"row {i}: column 'presence' must be a nonnegative integer")
        self.counts = self.counts.astype(np.int64)
        for name, arr in (("x", self.X), ("z", self.Z), ("v", self.V), ("u", self.U)):
            bad = ~np.isfinite(arr)
            if bad.any():
                i, j = (int(k) for k in np.argwhere(bad)[0])
                raise GridValidationError(f"row {i}: {name} feature {j} is not finite")
        if len(np.unique(self.ids)) != self.m:
            raise GridValidationError("duplicate cell ids")
        if abs(self.w.sum() - self.area) > 1e-9 * self.area:
            raise GridValidationError(
                f"quadrature weights sum to {self.w.sum()!r} but the area is {self.area!r}"
            )

    # -- features ----------------------------------------------------------
    @property
    def x_transform(self) -> FeatureTransform:
        if self._x_transform is None:
            self._x_transform = FeatureTransform.fit(self.X)
        return self._x_transform

    def design(self, standardize: bool = True) -> np.ndarray:
        """Habitat design matrix ``[1, x]`` (m, p + 1)."""
        X = self.x_transform.apply(self.X) if standardize else self.X
        return np.column_stack([np.ones(self.m), X])

    def transform(self, standardize: bool = True) -> FeatureTransform:
        return self.x_transform if standardize else FeatureTransform.identity(self.p)

    def cell(self, i: int) -> Cell:
        return Cell(
            id=int(self.ids[i]),
            lon=float(self.lon[i]) if self.lon is not None else float("nan"),
            lat=float(self.lat[i]) if self.lat is not None else float("nan"),
            w=float(self.w[i]),
            x=self.X[i].copy(),
            z=self.Z[i].copy(),
            v=self.V[i].copy(),
            presence_count=int(self.counts[i]),
        )

    def with_counts(self, counts: np.ndarray) -> "CovariateGrid":
        """Copy of the grid carrying a different presence realisation."""
        g = CovariateGrid(
            w=self.w, X=self.X, counts=np.asarray(counts), area=self.area, ids=self.ids,
            Z=self.Z, V=self.V, U=self.U, lon=self.lon, lat=self.lat, region=self.region,
            distance=self.distance, x_names=self.x_names, z_names=self.z_names,
            v_names=self.v_names, u_names=self.u_names,
        )
        g._x_transform = self._x_transform
        return g

    def subset(self, idx) -> "CovariateGrid":
        idx = np.asarray(idx)
        pick = lambda a: None if a is None else np.asarray(a)[idx]  # noqa: E731
        return CovariateGrid(
            w=self.w[idx], X=self.X[idx], counts=self.counts[idx], ids=self.ids[idx],
            Z=self.Z[idx], V=self.V[idx], U=self.U[idx], lon=pick(self.lon), lat=pick(self.lat),
            region=pick(self.region), distance=pick(self.distance), x_names=self.x_names,
            z_names=self.z_names, v_names=self.v_names, u_names=self.u_names,
        )


@dataclass(frozen=True)
class PresenceSet:
    indices: np.ndarray  # cell ids with at least one record
    counts: np.ndarray  # records per listed cell

    @classmethod
    def from_counts(cls, ids, counts) -> "PresenceSet":
        counts = np.asarray(counts, dtype=np.int64)
        keep = counts > 0
        return cls(np.asarray(ids)[keep], counts[keep])

    @property
    def n(self) -> int:
        return int(self.counts.sum())


def pseudo_responses(grid: CovariateGrid) -> np.ndarray:
    """Presence count divided by quadrature weight, zero for background cells."""
    return grid.counts / grid.w


# ---------------------------------------------------------------------------
# CSV ingestion
# ---------------------------------------------------------------------------


@dataclass
class GridSchema:
    """Column mapping for :func:`load_grid`.

    ``x``/``z``/``v``/``u`` default to prefix rules: ``z_*`` bias, ``v_*``
    accessibility, ``u_*`` detection-scale covariates, every other numeric
    column is a habitat feature.
    """

    id: str = "id"
    presence: str = "presence"
    w: str = "w"
    lon: str = "lon"
    lat: str = "lat"
    region: str = "region"
    distance: str = "distance"
    x: Optional[Sequence[str]] = None
    z: Optional[Sequence[str]] = None
    v: Optional[Sequence[str]] = None
    u: Optional[Sequence[str]] = None
    ignore: Sequence[str] = ()
    area: Optional[float] = None


def _read_rows(path: Path):
    with open(path, newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    reader = csv.reader(lines)
    try:
        header = [h.strip() for h in next(reader)]
    except StopIteration:
        raise GridParseError(f"{path}: empty file") from None
    rows = [r for r in reader if r and any(c.strip() for c in r)]
    return header, rows


def _number(value: str, row: int, col: str) -> float:
    try:
        out = float(value)
    except ValueError:
        raise GridParseError(f"row {row}, column '{col}': not a number: {value!r}") from None
    if not math.isfinite(out):
        raise GridValidationError(f"row {row}, column '{col}': non-finite value {value!r}")
    return out


def load_grid(path, schema: Optional[GridSchema] = None, area: Optional[float] = None) -> CovariateGrid:
    """Read a grid CSV (``#`` comment lines are skipped).

    When the weight column is absent every cell gets ``area / m``. Row numbers
    in error messages count data rows from 1.
    """
    schema = schema or GridSchema()
    area = area if area is not None else schema.area
    path = Path(path)
    if not path.exists():
        raise GridParseError(f"{path}: no such file")
    header, rows = _read_rows(path)
    col = {name: j for j, name in enumerate(header)}
    for required in (schema.id, schema.presence):
        if required not in col:
            raise GridParseError(f"{path}: missing required column '{required}'")
    has_w = schema.w in col
    if not has_w and area is None:
        raise GridParseError(f"{path}: no '{schema.w}' column and no area given")

    special = {schema.id, schema.presence, schema.w, schema.lon, schema.lat,
               schema.region, schema.distance, *schema.ignore}

    def by_prefix(prefix):
        return [h for h in header if h.startswith(prefix) and h not in special]

    z_cols = list(schema.z) if schema.z is not None else by_prefix("z_")
    v_cols = list(schema.v) if schema.v is not None else by_prefix("v_")
    u_cols = list(schema.u) if schema.u is not None else by_prefix("u_")
    taken = special | set(z_cols) | set(v_cols) | set(u_cols)
    x_cols = list(schema.x) if schema.x is not None else [h for h in header if h not in taken]
    for c in x_cols + z_cols + v_cols + u_cols:
        if c not in col:
            raise GridParseError(f"{path}: missing column '{c}'")
    if not x_cols:
        raise GridParseError(f"{path}: no habitat feature columns")

    m = len(rows)
    if m == 0:
        raise GridValidationError(f"{path}: no data rows")

    def numeric(names):
        out = np.empty((m, len(names)))
        for i, r in enumerate(rows, start=1):
            if len(r) != len(header):
                raise GridParseError(f"row {i}: expected {len(header)} fields, got {len(r)}")
            for k, name in enumerate(names):
                out[i - 1, k] = _number(r[col[name]], i, name)
        return out

    ids_f = numeric([schema.id])[:, 0]
    if np.any(ids_f != np.round(ids_f)):
        i = int(np.flatnonzero(ids_f != np.round(ids_f))[0]) + 1
        raise GridParseError(f"row {i}, column '{schema.id}': id must be an integer")
    ids = ids_f.astype(np.int64)
    seen: dict[int, int] = {}
    for i, v in enumerate(ids, start=1):
        if int(v) in seen:
            raise GridValidationError(f"row {i}, column '{schema.id}': duplicate id {v} (first at row {seen[int(v)]})")
        seen[int(v)] = i
    counts = numeric([schema.presence])[:, 0]
    bad = (counts < 0) | (counts != np.round(counts))
    if bad.any():
        i = int(np.flatnonzero(bad)[0]) + 1
        raise GridValidationError(f"row {i}, column '{schema.presence}': must be a nonnegative integer")
    if has_w:
        w = numeric([schema.w])[:, 0]
        bad = w <= 0
        if bad.any():
            i = int(np.flatnonzero(bad)[0]) + 1
            raise GridValidationError(f"row {i}, column '{schema.w}': weight must be positive, got {w[i - 1]}")
        total = float(w.sum())
        if area is None:
            area = total
    else:
        w = np.full(m, float(area) / m)

    def optional(name):
        return numeric([name])[:, 0] if name in col else None

    region = optional(schema.region)
    grid = CovariateGrid(
        w=w, X=numeric(x_cols), counts=counts.astype(np.int64), area=float(area), ids=ids,
        Z=numeric(z_cols), V=numeric(v_cols), U=numeric(u_cols),
        lon=optional(schema.lon), lat=optional(schema.lat),
        region=None if region is None else region.astype(np.int64),
        distance=optional(schema.distance),
        x_names=tuple(x_cols), z_names=tuple(z_cols), v_names=tuple(v_cols), u_names=tuple(u_cols),
    )
    return grid


def write_grid(grid: CovariateGrid, path, header_comment: Optional[str] = None) -> None:
    """Write ``grid`` in the format :func:`load_grid` reads."""
    cols = ["id", "presence", "w"]
    data = [grid.ids, grid.counts, grid.w]
    for name, arr in (("lon", grid.lon), ("lat", grid.lat), ("region", grid.region),
                      ("distance", grid.distance)):
        if arr is not None:
            cols.append(name)
            data.append(arr)
    for names, M in ((grid.x_names, grid.X), (grid.z_names, grid.Z),
                     (grid.v_names, grid.V), (grid.u_names, grid.U)):
        cols.extend(names)
        data.extend(M.T)
    with open(path, "w", newline="") as fh:
        if header_comment:
            fh.write(f"# {header_comment}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(cols)
        for i in range(grid.m):
            writer.writerow([_fmt(d[i]) for d in data])


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))
