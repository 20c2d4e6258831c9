"""Model selection and discrimination: AIC, TIC and rank AUC."""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.stats import rankdata

from .errors import ConfigError, SingularMatrixError
from .grid import CovariateGrid
from .optimize import FitResult

BEST_SUBSET_MAX = 12


@dataclass(frozen=True)
class MetricReport:
    aic: Optional[float]
    tic: Optional[float]
    auc: float
    n_presence: int
    n_background: int

    def as_rows(self):
        return [(k, v) for k, v in (("aic", self.aic), ("tic", self.tic), ("auc", self.auc),
                                    ("n_presence", self.n_presence), ("n_background", self.n_background))]


def aic_value(k: int, loglik: float) -> float:
    return 2.0 * k - 2.0 * float(loglik)


def aic(fit: FitResult) -> float:
    """``2k - 2 loglik`` for likelihood fits; other objectives need :func:`tic`."""
    if fit.loglik is None:
        raise ConfigError(f"{fit.method} is not a likelihood fit; use tic() instead of aic()")
    k = fit.extra.get("k", fit.k) if fit.extra else fit.k
    return aic_value(k, fit.loglik)


def tic(fit: FitResult, grid: Optional[CovariateGrid] = None) -> float:
    """``2 objective + 2 tr(J^-1 K)``, the objective standing in for ``-loglik``.

    ``grid`` is accepted for symmetry with the fitters; the sandwich pieces
    stored on the fit are used.
    """
    if fit.jacobian is None or fit.score_var is None or fit.objective is None:
        raise ConfigError("fit carries no sandwich components")
    try:
        trace = float(np.trace(np.linalg.solve(fit.jacobian, fit.score_var)))
    except np.linalg.LinAlgError:
        raise SingularMatrixError("singular score Jacobian; TIC undefined") from None
    return 2.0 * float(fit.objective) + 2.0 * trace


def tic_penalty(fit: FitResult) -> float:
    """``tr(J^-1 K)``, close to the parameter count under a correct model."""
    return float(np.trace(np.linalg.solve(fit.jacobian, fit.score_var)))


def auc(scores_presence, scores_background) -> float:
    """Mann-Whitney AUC with average ranks for ties."""
    a = np.asarray(scores_presence, dtype=float).reshape(-1)
    b = np.asarray(scores_background, dtype=float).reshape(-1)
    if a.size == 0 or b.size == 0:
        raise ValueError("AUC needs at least one presence and one background score")
    ranks = rankdata(np.concatenate([a, b]))
    r1 = ranks[:a.size].sum()
    return float((r1 - a.size * (a.size + 1) / 2.0) / (a.size * b.size))


def auc_bruteforce(scores_presence, scores_background) -> float:
    a = np.asarray(scores_presence, dtype=float)[:, None]
    b = np.asarray(scores_background, dtype=float)[None, :]
    return float(np.mean((a > b) + 0.5 * (a == b)))


def presence_background_scores(scores: np.ndarray, grid: CovariateGrid):
    """Scores at presence records (repeated per record) and at every cell as background."""
    scores = np.asarray(scores, dtype=float)
    return np.repeat(scores, grid.counts.astype(np.int64)), scores


def linear_predictor(fit: FitResult, grid: CovariateGrid) -> np.ndarray:
    theta = np.asarray(fit.params, dtype=float)
    return theta[0] + grid.X @ theta[1:grid.p + 1]


def evaluate(fit: FitResult, grid: CovariateGrid, scores: Optional[np.ndarray] = None) -> MetricReport:
    """Metric report; ``scores`` default to the fitted linear predictor."""
    if scores is None:
        scores = linear_predictor(fit, grid)
    pres, bg = presence_background_scores(scores, grid)
    a = aic(fit) if fit.loglik is not None else None
    t = None
    if fit.jacobian is not None and fit.score_var is not None and fit.objective is not None:
        try:
            t = tic(fit)
        except SingularMatrixError:
            t = None
    return MetricReport(a, t, auc(pres, bg), int(grid.n), int(grid.m))


# ---------------------------------------------------------------------------
# variable selection
# ---------------------------------------------------------------------------


def feature_subset(grid: CovariateGrid, cols: Sequence[int]) -> CovariateGrid:
    cols = list(cols)
    return CovariateGrid(
        w=grid.w, X=grid.X[:, cols], counts=grid.counts, area=grid.area, ids=grid.ids,
        Z=grid.Z, V=grid.V, U=grid.U, lon=grid.lon, lat=grid.lat, region=grid.region,
        distance=grid.distance, x_names=tuple(grid.x_names[j] for j in cols),
        z_names=grid.z_names, v_names=grid.v_names, u_names=grid.u_names,
    )


def _criterion(fit: FitResult, which: str) -> float:
    if not fit.converged:
        return np.inf
    return aic(fit) if which == "aic" else tic(fit)


def select_variables(grid: CovariateGrid, fitter: Callable[[CovariateGrid], FitResult],
                     criterion: str = "aic"):
    """Best subset up to 12 features, greedy backward elimination above.

    Returns ``(columns, fit, table)``; the table lists every candidate scored.
    """
    if criterion not in ("aic", "tic"):
        raise ConfigError("criterion must be aic or tic")
    p = grid.p
    table = []

    def score(cols):
        fit = fitter(feature_subset(grid, cols))
        val = _criterion(fit, criterion)
        table.append({"features": " ".join(grid.x_names[j] for j in cols) or "(none)", criterion: val,
                      "converged": fit.converged})
        return val, fit

    if p <= BEST_SUBSET_MAX:
        best = None
        for r in range(p + 1):
            for cols in itertools.combinations(range(p), r):
                val, fit = score(cols)
                if best is None or val < best[0]:
                    best = (val, cols, fit)
        return list(best[1]), best[2], table
    cols = list(range(p))
    cur, cur_fit = score(cols)
    while cols:
        trials = [(score([c for c in cols if c != j]), j) for j in cols]
        (val, fit), drop = min(trials, key=lambda t: t[0][0])
        if val >= cur:
            break
        cols.remove(drop)
        cur, cur_fit = val, fit
    return cols, cur_fit, table
