"""Monte-Carlo studies: bias, spread, sandwich SE and interval coverage.

Every replicate draws from its own Philox stream keyed by (seed, replicate),
so results do not depend on the number of workers or the order replicates
finish in.
"""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit

from .divergence import DivergenceSpec, FitOptions, fit_divergence
from .errors import ConfigError
from .grid import CovariateGrid
from .simulate import random_grid, rng_stream

log = logging.getLogger(__name__)

Z95 = 1.959963984540054


@dataclass
class StudyConfig:
    truth: Sequence[float]
    replicates: int
    seed: int = 0
    scenario: str = "ppp"  # or "integrated"
    m: int = 2000
    area: float = 1.0
    estimators: Sequence[str] = ("mle",)
    contamination: float = 0.0
    workers: int = 1
    # integrated scenario
    alpha: Sequence[float] = (1.0,)
    tau: Sequence[float] = (0.0,)
    n_regions: int = 50
    region_size: int = 10
    visits: int = 4

    def __post_init__(self):
        if self.replicates < 1:
            raise ConfigError("a study needs at least one replicate")
        if self.scenario not in ("ppp", "integrated"):
            raise ConfigError(f"unknown study scenario {self.scenario!r}")
        if not 0.0 <= self.contamination < 1.0:
            raise ConfigError("contamination must lie in [0, 1)")
        if self.scenario == "ppp":
            for e in self.estimators:
                parse_estimator(e)

    @property
    def p(self) -> int:
        return len(self.truth) - 1


def parse_estimator(label: str) -> DivergenceSpec:
    """``mle``, ``beta:<b>``, ``gamma:<g>`` or ``ucdf:<family>:<tau>``."""
    parts = label.split(":")
    try:
        if parts[0] in ("mle", "ppp", "kl"):
            return DivergenceSpec.KL()
        if parts[0] == "beta":
            return DivergenceSpec.BetaPower(float(parts[1]))
        if parts[0] == "gamma":
            return DivergenceSpec.GammaPower(float(parts[1]))
        if parts[0] == "ucdf":
            return DivergenceSpec.UCdf(parts[1], float(parts[2]) if len(parts) > 2 else 1.0)
    except (IndexError, ValueError) as exc:
        raise ConfigError(f"bad estimator label {label!r}: {exc}") from None
    raise ConfigError(f"unknown estimator {label!r}")


def contaminate(counts: np.ndarray, lam: np.ndarray, fraction: float, rng) -> np.ndarray:
    """Add ``round(fraction * n)`` records in cells from the lowest intensity decile."""
    counts = np.asarray(counts, dtype=np.int64).copy()
    extra = int(round(fraction * counts.sum()))
    if extra == 0:
        return counts
    low = np.flatnonzero(lam <= np.quantile(lam, 0.1))
    np.add.at(counts, rng.choice(low, size=extra, replace=True), 1)
    return counts


def study_grid(cfg: StudyConfig) -> CovariateGrid:
    return random_grid(cfg.m, cfg.p, seed=cfg.seed, area=cfg.area, n_access=len(cfg.alpha))


def _ppp_replicate(cfg: StudyConfig, r: int) -> Dict[str, Tuple]:
    grid = study_grid(cfg)
    theta = np.asarray(cfg.truth, dtype=float)
    lam = np.exp(theta[0] + grid.X @ theta[1:])
    rng = rng_stream(cfg.seed, r, "study")
    counts = rng.poisson(grid.w * lam)
    counts = contaminate(counts, lam, cfg.contamination, rng_stream(cfg.seed, r, "contaminate"))
    g = grid.with_counts(counts)
    out = {}
    for label in cfg.estimators:
        try:
            fit = fit_divergence(g, parse_estimator(label), FitOptions())
            if not fit.converged:
                out[label] = ("failed", fit.message)
                continue
            out[label] = (fit.params, fit.se)
        except Exception as exc:  # recorded, the study goes on
            out[label] = ("failed", str(exc))
    return out


def _integrated_replicate(cfg: StudyConfig, r: int) -> Dict[str, Tuple]:
    from .integrated import SurveyDesign, SurveyData, fit_integrated, occupancy_probs

    grid = study_grid(cfg)
    beta = np.asarray(cfg.truth, dtype=float)
    alpha = np.asarray(cfg.alpha, dtype=float)
    tau = np.asarray(cfg.tau, dtype=float)
    regions = [np.arange(i * cfg.region_size, (i + 1) * cfg.region_size) for i in range(cfg.n_regions)]
    design = SurveyDesign(regions, cfg.visits, np.ones((cfg.n_regions, cfg.visits, len(tau))))
    lam0 = np.exp(beta[0] + grid.X @ beta[1:])
    mu = grid.w * expit(grid.V @ alpha) * lam0
    rng = rng_stream(cfg.seed, r, "study-pb")
    counts = rng.poisson(mu)
    counts = contaminate(counts, lam0, cfg.contamination, rng_stream(cfg.seed, r, "contaminate"))
    rso = rng_stream(cfg.seed, r, "study-so")
    occ = rso.random(design.K) < occupancy_probs(beta, grid, design)
    y = (rso.random((design.K, design.T)) < expit(design.zdet @ tau)) & occ[:, None]
    kb = beta.size
    out = {}
    try:
        fit = fit_integrated(grid.with_counts(counts), None, design, SurveyData(y), fisher_replicates=0)
    except Exception as exc:
        return {k: ("failed", str(exc)) for k in ("integrated", "pb", "so")}
    se = lambda C: None if C is None else np.sqrt(np.maximum(np.diag(C)[:kb], 0.0))  # noqa: E731
    out["integrated"] = (fit.beta_shared, se(fit.cov_integrated)) if fit.converged else ("failed", fit.message)
    ok_pb = fit.beta_pb is not None and fit.extra.get("pb", {}).get("converged")
    ok_so = fit.beta_so is not None and fit.extra.get("so", {}).get("converged")
    out["pb"] = (fit.beta_pb, se(fit.cov_pb)) if ok_pb else ("failed", "PB-only fit did not converge")
    out["so"] = (fit.beta_so, se(fit.cov_so)) if ok_so else ("failed", "SO-only fit did not converge")
    return out


def run_replicate(cfg: StudyConfig, r: int):
    if cfg.scenario == "integrated":
        return _integrated_replicate(cfg, r)
    return _ppp_replicate(cfg, r)


def _run(args):
    cfg, r = args
    return r, run_replicate(cfg, r)


@dataclass
class StudyResult:
    rows: List[dict]
    failures: Dict[str, int]
    estimates: Dict[str, np.ndarray] = field(default_factory=dict)
    seeds: Tuple[int, int] = (0, 0)


def run_study(cfg: StudyConfig) -> StudyResult:
    """Run all replicates and summarise per (estimator, parameter)."""
    jobs = [(cfg, r) for r in range(cfg.replicates)]
    if cfg.workers > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as ex:
            results = dict(ex.map(_run, jobs))
    else:
        results = dict(map(_run, jobs))
    labels = list(results[0].keys())
    truth = np.asarray(cfg.truth, dtype=float)
    rows, failures, estimates = [], {}, {}
    for label in labels:
        ests, ses, fails = [], [], 0
        for r in range(cfg.replicates):
            val = results[r][label]
            if isinstance(val[0], str):
                fails += 1
                log.info("replicate %d, %s failed: %s", r, label, val[1])
                continue
            ests.append(np.asarray(val[0], dtype=float))
            ses.append(np.full(truth.size, np.nan) if val[1] is None else np.asarray(val[1], dtype=float))
        failures[label] = fails
        E = np.array(ests).reshape(-1, truth.size)
        S = np.array(ses).reshape(-1, truth.size)
        estimates[label] = E
        for j in range(truth.size):
            e, s = E[:, j], S[:, j]
            n_ok = e.size
            bias = float(np.mean(e) - truth[j]) if n_ok else np.nan
            sd = float(np.std(e, ddof=1)) if n_ok > 1 else np.nan
            cover = float(np.mean(np.abs(e - truth[j]) <= Z95 * s)) if n_ok and np.all(np.isfinite(s)) else np.nan
            rows.append({
                "estimator": label, "parameter": "(intercept)" if j == 0 else f"x{j}", "truth": truth[j],
                "mean_bias": bias, "mc_se": sd / np.sqrt(n_ok) if n_ok > 1 else np.nan, "emp_sd": sd,
                "mean_se": float(np.nanmean(s)) if n_ok else np.nan, "coverage95": cover,
                "replicates_ok": n_ok, "failures": fails,
            })
    if cfg.scenario == "integrated" and "integrated" in estimates:
        var_i = np.var(estimates["integrated"], axis=0, ddof=1)
        for row in rows:
            j = 0 if row["parameter"] == "(intercept)" else int(row["parameter"][1:])
            ref = estimates.get(row["estimator"])
            if ref is not None and ref.shape[0] > 1:
                row["variance_ratio_integrated"] = float(var_i[j] / np.var(ref[:, j], ddof=1))
    return StudyResult(rows, failures, estimates, (cfg.seed, cfg.replicates))
