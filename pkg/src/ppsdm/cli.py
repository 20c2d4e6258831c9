"""Command-line front end: ``ppsdm {fit,simulate,evaluate,map,study}``.

Settings come from an optional config file (``--config``; INI-style
``key = value`` lines under ``[run]`` or a section named after the command)
and are overridden by flags. Every CSV written starts with
``# manifest <hash>`` where the hash identifies the run inputs.

Exit codes: 0 success, 2 config error, 3 data validation, 4 non-convergence,
5 internal error.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import hashlib
import json
import logging
import platform
import sys
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
import scipy

from . import __version__
from .errors import ConfigError, ConvergenceError, DataError, PpsdmError

log = logging.getLogger("ppsdm")

METHODS = ("ppp", "maxent", "beta-maxent", "iwlr", "asym-logit", "cc-logit", "ql-ppp", "beta", "gamma",
           "ucdf", "integrated", "integrated-robust", "ds")


# ---------------------------------------------------------------------------
# argument handling
# ---------------------------------------------------------------------------


def _floats(text: str) -> List[float]:
    try:
        return [float(t) for t in str(text).replace(";", ",").split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ppsdm", description="Poisson point process species distribution models")
    p.add_argument("--version", action="version", version=f"ppsdm {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="INI-style config file; flags override it")
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--seed", type=int, help="random seed (default 0)")
        sp.add_argument("--workers", type=int, help="parallel workers (results do not depend on it)")
        sp.add_argument("-v", "--verbose", action="store_true")

    f = sub.add_parser("fit", help="fit an estimator to a grid")
    common(f)
    f.add_argument("--grid", help="grid CSV")
    f.add_argument("--area", type=float, help="study area when the grid has no w column")
    f.add_argument("--method", choices=METHODS)
    f.add_argument("--beta", type=float, help="beta for --method beta")
    f.add_argument("--beta-grid", type=_floats, help="beta grid for beta-maxent")
    f.add_argument("--gamma", type=float)
    f.add_argument("--tau", type=_floats, help="quasi-linear tau grid (default -1,0,1)")
    f.add_argument("--kappa", type=float, help="asym-logit kappa")
    f.add_argument("--W", type=float, help="iwlr background weight (default 1000)")
    f.add_argument("--mu", type=float, help="cc-logit population prevalence")
    f.add_argument("--ybar", type=float, help="cc-logit sample prevalence (default n/(n+m))")
    f.add_argument("--cdf", choices=("step", "exp", "unicap"))
    f.add_argument("--ucdf-tau", type=float)
    f.add_argument("--survey", help="survey CSV for integrated methods")
    f.add_argument("--ds", help="distance-sampling detections CSV")
    f.add_argument("--detect-intercept", action="store_true", default=None)
    f.add_argument("--fisher-replicates", type=int)
    f.add_argument("--tol", type=float)
    f.add_argument("--max-iter", type=int)
    f.add_argument("--no-standardize", action="store_true", default=None)

    s = sub.add_parser("simulate", help="simulate presences (and surveys) on a grid")
    common(s)
    s.add_argument("--grid", help="grid CSV to simulate on (default: a synthetic lattice)")
    s.add_argument("--nrow", type=int)
    s.add_argument("--ncol", type=int)
    s.add_argument("--area", type=float)
    s.add_argument("--n-access", type=int, help="accessibility covariates on a synthetic lattice")
    s.add_argument("--truth", type=_floats, help="theta0,theta1,...")
    s.add_argument("--alpha", type=_floats, help="accessibility coefficients (thins presences)")
    s.add_argument("--tau-detect", type=_floats, help="survey detection coefficients")
    s.add_argument("--regions", type=int, help="number of survey regions")
    s.add_argument("--region-size", type=int)
    s.add_argument("--visits", type=int)
    s.add_argument("--contamination", type=float)

    e = sub.add_parser("evaluate", help="metrics for a completed fit")
    common(e)
    e.add_argument("--fit", help="manifest.json of a fit run")
    e.add_argument("--grid", help="grid to evaluate on (default: the fitted grid)")

    m = sub.add_parser("map", help="PGM habitat map of a completed fit")
    common(m)
    m.add_argument("--fit", help="manifest.json of a fit run")
    m.add_argument("--grid", help="grid to map (default: the fitted grid)")

    st = sub.add_parser("study", help="Monte-Carlo bias / coverage study")
    common(st)
    st.add_argument("--scenario", choices=("ppp", "integrated"))
    st.add_argument("--truth", type=_floats)
    st.add_argument("--replicates", type=int)
    st.add_argument("--m", type=int)
    st.add_argument("--area", type=float)
    st.add_argument("--estimators", help="comma list: mle, beta:<b>, gamma:<g>, ucdf:<cdf>:<tau>")
    st.add_argument("--contamination", type=float)
    st.add_argument("--alpha", type=_floats)
    st.add_argument("--tau-detect", type=_floats)
    st.add_argument("--regions", type=int)
    st.add_argument("--region-size", type=int)
    st.add_argument("--visits", type=int)
    return p


DEFAULTS = {
    "seed": 0, "workers": 1, "out": "out", "method": "ppp", "beta": 0.5, "gamma": 0.5, "kappa": None,
    "W": 1000.0, "mu": None, "ybar": None, "cdf": "exp", "ucdf_tau": 1.0, "tau": None, "beta_grid": None,
    "detect_intercept": False, "fisher_replicates": 100, "tol": 1e-8, "max_iter": 200, "no_standardize": False,
    "nrow": 30, "ncol": 30, "area": None, "n_access": 0, "truth": None, "alpha": None, "tau_detect": None,
    "regions": 0, "region_size": 9, "visits": 4, "contamination": 0.0, "scenario": "ppp", "replicates": None,
    "m": 2000, "estimators": "mle", "verbose": False,
}

_LIST_KEYS = {"truth", "alpha", "tau_detect", "tau", "beta_grid"}
_INT_KEYS = {"seed", "workers", "fisher_replicates", "max_iter", "nrow", "ncol", "n_access", "regions",
             "region_size", "visits", "replicates", "m"}
_FLOAT_KEYS = {"beta", "gamma", "kappa", "W", "mu", "ybar", "ucdf_tau", "tol", "area", "contamination"}
_BOOL_KEYS = {"detect_intercept", "no_standardize", "verbose"}
_PATH_KEYS = {"grid", "survey", "ds", "fit"}


def read_config(path: str, command: str) -> Dict[str, object]:
    cp = configparser.ConfigParser()
    cp.optionxform = str
    if not Path(path).exists():
        raise ConfigError(f"config file {path} not found")
    try:
        cp.read(path)
    except configparser.Error as exc:
        raise ConfigError(f"config file {path}: {exc}") from None
    out: Dict[str, object] = {}
    for section in ("run", command):
        if not cp.has_section(section):
            continue
        for key, raw in cp.items(section):
            k = key.replace("-", "_")
            if k not in DEFAULTS and k not in _PATH_KEYS:
                raise ConfigError(f"config {path} [{section}]: unknown key {key!r}")
            try:
                if k in _LIST_KEYS:
                    out[k] = _floats(raw)
                elif k in _INT_KEYS:
                    out[k] = int(raw)
                elif k in _FLOAT_KEYS:
                    out[k] = float(raw)
                elif k in _BOOL_KEYS:
                    out[k] = cp.getboolean(section, key)
                else:
                    out[k] = raw
            except (ValueError, argparse.ArgumentTypeError) as exc:
                raise ConfigError(f"config {path} [{section}] {key}: {exc}") from None
    return out


def resolve(args: argparse.Namespace) -> Dict[str, object]:
    """Merge defaults < config file < flags."""
    cfg = {k: v for k, v in DEFAULTS.items()}
    if getattr(args, "config", None):
        cfg.update(read_config(args.config, args.command))
    for k, v in vars(args).items():
        if v is not None and k != "config":
            cfg[k] = v
    cfg["command"] = args.command
    return cfg


# ---------------------------------------------------------------------------
# manifest and CSV helpers
# ---------------------------------------------------------------------------


def _file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _jsonable(v):
    if isinstance(v, np.ndarray):
        return [_jsonable(x) for x in v.tolist()]
    if isinstance(v, (np.floating, float)):
        v = float(v)
        return v if np.isfinite(v) else None
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, dict):
        return {str(k): _jsonable(x) for k, x in v.items()}
    return v


def run_identity(cfg: Dict[str, object], inputs: Dict[str, str]) -> Dict[str, object]:
    ident = {
        "config": {k: _jsonable(v) for k, v in sorted(cfg.items()) if k not in ("verbose", "out", "workers")},
        "inputs": {k: _file_digest(p) for k, p in sorted(inputs.items()) if p},
        "versions": {"ppsdm": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
                     "python": platform.python_version()},
    }
    ident["hash"] = hashlib.sha256(json.dumps(ident, sort_keys=True).encode()).hexdigest()[:16]
    return ident


def write_csv(path: Path, header: List[str], rows, manifest_hash: str) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(f"# manifest {manifest_hash}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_cell(v) for v in r])


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_manifest(out: Path, ident: Dict[str, object], extra: Dict[str, object]) -> Path:
    doc = dict(ident)
    doc.update(_jsonable(extra))
    path = out / "manifest.json"
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return path


def _outdir(cfg) -> Path:
    out = Path(str(cfg["out"]))
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# fit
# ---------------------------------------------------------------------------


def _load_grid(path, area=None):
    from .grid import load_grid

    if not path:
        raise ConfigError("--grid is required")
    return load_grid(path, area=area)


def _fit_options(cfg):
    from .divergence import FitOptions

    return FitOptions(tol=float(cfg["tol"]), max_iter=int(cfg["max_iter"]), standardize=not cfg["no_standardize"])


def _coef_rows(names, params, se=None):
    se = [None] * len(params) if se is None else se
    return [(n, float(v), None if s is None or not np.isfinite(s) else float(s)) for n, v, s in zip(names, params, se)]


def run_fit(cfg: Dict[str, object]) -> int:
    from . import bridge, divergence, integrated, metrics
    grid = _load_grid(cfg.get("grid"), cfg.get("area"))
    method = cfg["method"]
    opts = _fit_options(cfg)
    inputs = {"grid": cfg.get("grid"), "survey": cfg.get("survey"), "ds": cfg.get("ds")}
    ident = run_identity(cfg, inputs)
    h = ident["hash"]
    out = _outdir(cfg)
    result: Dict[str, object] = {"method": method}
    tables = {}
    converged = True
    model: Dict[str, object] = {}

    if method in ("ppp", "beta", "gamma", "ucdf"):
        spec = {
            "ppp": divergence.DivergenceSpec.KL(),
            "beta": divergence.DivergenceSpec.BetaPower(float(cfg["beta"])),
            "gamma": divergence.DivergenceSpec.GammaPower(float(cfg["gamma"])),
            "ucdf": divergence.DivergenceSpec.UCdf(cfg["cdf"], float(cfg["ucdf_tau"])),
        }[method]
        fit = divergence.fit_divergence(grid, spec, opts)
        converged = fit.converged
        coef = _coef_rows(fit.names, fit.params, fit.se)
        rep = metrics.evaluate(fit, grid)
        model = {"kind": "loglinear", "theta": fit.params}
        result.update(objective=fit.objective, score_norm=fit.score_norm, iterations=fit.iterations,
                      message=fit.message, ridge=fit.ridge)
    elif method in ("iwlr", "cc-logit", "asym-logit"):
        if method == "iwlr":
            scheme = bridge.WeightScheme.Infinite(float(cfg["W"]))
        elif method == "cc-logit":
            if cfg.get("mu") is None:
                raise ConfigError("cc-logit needs --mu")
            scheme = bridge.WeightScheme.CaseControl(float(cfg["mu"]), cfg.get("ybar"))
        else:
            if cfg.get("kappa") is None:
                raise ConfigError("asym-logit needs --kappa")
            scheme = bridge.WeightScheme.Asymmetric(float(cfg["kappa"]))
        fit = bridge.fit_weighted_logistic(grid, scheme, opts)
        converged = fit.converged
        coef = _coef_rows(fit.names, fit.params, fit.se)
        rep = metrics.evaluate(fit, grid)
        model = {"kind": "loglinear", "theta": fit.params}
        result.update(objective=fit.objective, score_norm=fit.score_norm, iterations=fit.iterations,
                      message=fit.message)
    elif method == "maxent":
        mf = bridge.fit_maxent(grid, opts)
        converged = mf.converged
        coef = _coef_rows(("(intercept)",) + tuple(grid.x_names), mf.ppp_params)
        u = grid.X @ mf.alpha1 if converged else np.zeros(grid.m)
        pres, bg = metrics.presence_background_scores(u, grid)
        k = grid.p + 1
        rep = metrics.MetricReport(metrics.aic_value(k, _ppp_loglik(mf.ppp_params, grid)) if converged else None,
                                   None, metrics.auc(pres, bg), grid.n, grid.m)
        model = {"kind": "loglinear", "theta": mf.ppp_params}
        result.update(Z=mf.Z, maxent_loglik=mf.loglik, score_norm=mf.score_norm, iterations=mf.iterations,
                      message=mf.message)
    elif method == "beta-maxent":
        grid_b = cfg.get("beta_grid") or bridge.BETA_GRID
        params, table = bridge.fit_beta_maxent(grid, grid_b, opts)
        coef = _coef_rows(tuple(grid.x_names), params.alpha1)
        from .intensity import deformed_probs

        std = next(r for r in table if r["beta"] == params.beta_ent)["alpha1_std"]
        Xs = grid.transform(opts.standardize).apply(grid.X)
        pi = deformed_probs(std, Xs, params.beta_ent)
        pres, bg = metrics.presence_background_scores(pi, grid)
        rep = metrics.MetricReport(None, next(r["tic"] for r in table if r["beta"] == params.beta_ent),
                                   metrics.auc(pres, bg), grid.n, grid.m)
        tables["selection"] = (["beta", "loss", "loglik", "tic", "converged", "iterations", "message"],
                               [[r["beta"], r["loss"], r["loglik"], r["tic"], r["converged"], r["iterations"],
                                 r["message"]] for r in table])
        model = {"kind": "deformed", "beta_ent": params.beta_ent, "alpha1_std": std, "standardize": opts.standardize}
        result.update(selected_beta=params.beta_ent)
    elif method == "ql-ppp":
        taus = cfg.get("tau") or bridge.TAU_GRID
        params, table = bridge.fit_quasilinear_ppp(grid, taus, opts)
        best = next(r for r in table if r["fit"] is not None and r["tau"] == params.ql_tau)["fit"]
        coef = _coef_rows(best.names, best.params)
        from .intensity import intensities

        lam = intensities(params, grid)
        pres, bg = metrics.presence_background_scores(np.log(lam), grid)
        rep = metrics.MetricReport(best.aic, None, metrics.auc(pres, bg), grid.n, grid.m)
        tables["selection"] = (["tau", "loglik", "aic", "k", "converged", "message"],
                               [[r["tau"], r["loglik"], r["aic"], r["k"], r["converged"], r["message"]]
                                for r in table])
        bias = bridge.bias_proportion(params, grid)
        tables["bias_proportion"] = (["id", "bias_proportion"], [[int(i), float(b)] for i, b in zip(grid.ids, bias)])
        model = {"kind": "quasilinear", "tau": params.ql_tau, "theta": params.theta, "alpha_bias": params.alpha_bias}
        result.update(selected_tau=params.ql_tau, score_norm=best.score_norm)
    elif method in ("integrated", "integrated-robust"):
        if not cfg.get("survey"):
            raise ConfigError(f"{method} needs --survey")
        design, data = integrated.load_survey(cfg["survey"], grid)
        if method == "integrated":
            fit = integrated.fit_integrated(grid, None, design, data, opts, bool(cfg["detect_intercept"]),
                                            int(cfg["fisher_replicates"]), int(cfg["seed"]))
        else:
            fit = integrated.fit_integrated_robust(grid, None, design, data, cfg["cdf"], float(cfg["ucdf_tau"]),
                                                   opts, bool(cfg["detect_intercept"]))
        converged = fit.converged
        se = None if fit.cov_integrated is None else np.sqrt(np.diag(fit.cov_integrated))
        coef = _coef_rows(fit.names, fit.theta, se)
        scores = fit.beta_shared[0] + grid.X @ fit.beta_shared[1:]
        pres, bg = metrics.presence_background_scores(scores, grid)
        k = fit.theta.size
        rep = metrics.MetricReport(None if fit.loglik is None else metrics.aic_value(k, fit.loglik), None,
                                   metrics.auc(pres, bg), grid.n, grid.m)
        model = {"kind": "loglinear", "theta": fit.beta_shared}
        result.update(score_norm=fit.score_norm, iterations=fit.iterations, message=fit.message,
                      beta_pb=fit.beta_pb, beta_so=fit.beta_so)
        if fit.fisher_integrated is not None:
            names = fit.names[:fit.beta_shared.size]
            tables["fisher"] = (["block", "row", *names],
                                [[blk, names[i], *M[i]] for blk, M in (("pb", fit.fisher_pb), ("so", fit.fisher_so),
                                                                       ("integrated", fit.fisher_integrated))
                                 for i in range(len(names))])
    elif method == "ds":
        if not cfg.get("ds"):
            raise ConfigError("ds needs --ds")
        ds = integrated.load_ds(cfg["ds"], grid)
        res = integrated.fit_ds(grid, ds, opts)
        converged = res["converged"]
        names = ("(intercept)",) + tuple(grid.x_names) + ("sigma:(intercept)",) + tuple(f"sigma:{u}" for u in grid.u_names)
        theta = np.concatenate([res["beta"], res["omega"]])
        se = None if res["covariance"] is None else np.sqrt(np.maximum(np.diag(res["covariance"]), 0))
        coef = _coef_rows(names, theta, se)
        scores = res["beta"][0] + grid.X @ res["beta"][1:]
        bg = scores
        pres = scores[ds.cell] if ds.n else scores[:1]
        rep = metrics.MetricReport(metrics.aic_value(theta.size, res["loglik"]), None, metrics.auc(pres, bg),
                                   ds.n, grid.m)
        model = {"kind": "loglinear", "theta": res["beta"]}
        result.update(score_norm=res["score_norm"], iterations=res["iterations"], message=res["message"])
    else:  # pragma: no cover - argparse restricts choices
        raise ConfigError(f"unknown method {method}")

    write_csv(out / "coefficients.csv", ["parameter", "estimate", "se"], coef, h)
    write_csv(out / "metrics.csv", ["metric", "value"], rep.as_rows(), h)
    for name, (header, rows) in tables.items():
        write_csv(out / f"{name}.csv", header, rows, h)
    result["converged"] = bool(converged)
    write_manifest(out, ident, {"grid": str(Path(cfg["grid"]).resolve()), "result": result, "model": model,
                                "outputs": sorted(["coefficients.csv", "metrics.csv"] + [f"{n}.csv" for n in tables])})
    if not converged:
        raise ConvergenceError(f"{method} fit did not converge: {result.get('message', '')}")
    return 0


def _ppp_loglik(theta, grid) -> float:
    eta = theta[0] + grid.X @ theta[1:]
    return float(grid.counts @ eta - grid.w @ np.exp(eta))


# ---------------------------------------------------------------------------
# evaluate / map
# ---------------------------------------------------------------------------


def _load_manifest(path) -> dict:
    if not path:
        raise ConfigError("--fit (a fit manifest.json) is required")
    p = Path(path)
    if p.is_dir():
        p = p / "manifest.json"
    if not p.exists():
        raise ConfigError(f"fit manifest {p} not found")
    try:
        return json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"fit manifest {p}: {exc}") from None


def model_surface(model: dict, grid) -> np.ndarray:
    """Per-cell predicted intensity (or probability for the deformed model)."""
    from .intensity import QuasiLinearParams, deformed_probs, intensities

    kind = model.get("kind")
    if kind == "loglinear":
        theta = np.asarray(model["theta"], dtype=float)
        if theta.size != grid.p + 1:
            raise DataError(f"model has {theta.size - 1} features, grid has {grid.p}")
        return np.exp(theta[0] + grid.X @ theta[1:])
    if kind == "quasilinear":
        return intensities(QuasiLinearParams(model["tau"], np.asarray(model["theta"]),
                                             np.asarray(model["alpha_bias"])), grid)
    if kind == "deformed":
        Xs = grid.transform(model.get("standardize", True)).apply(grid.X)
        return deformed_probs(np.asarray(model["alpha1_std"]), Xs, model["beta_ent"])
    raise ConfigError(f"fit manifest carries an unknown model kind {kind!r}")


def run_evaluate(cfg) -> int:
    from . import metrics

    man = _load_manifest(cfg.get("fit"))
    gpath = cfg.get("grid") or man.get("grid")
    grid = _load_grid(gpath, cfg.get("area"))
    surf = model_surface(man["model"], grid)
    pres, bg = metrics.presence_background_scores(np.log(surf), grid)
    ident = run_identity(cfg, {"grid": gpath, "fit": _manifest_path(cfg["fit"])})
    out = _outdir(cfg)
    rows = [("auc", metrics.auc(pres, bg)), ("n_presence", grid.n), ("n_background", grid.m)]
    # likelihood fits get an AIC on the evaluation grid
    if man.get("config", {}).get("method") in ("ppp", "maxent") and grid.n:
        theta = np.asarray(man["model"]["theta"], dtype=float)
        rows.append(("aic", metrics.aic_value(theta.size, _ppp_loglik(theta, grid))))
    rows += [(k, v) for k, v in _fit_metrics(cfg["fit"]) if k in ("fit_aic", "fit_tic")]
    write_csv(out / "evaluation.csv", ["metric", "value"], rows, ident["hash"])
    return 0


def _fit_metrics(fit_path):
    """Rows of the fit's own metrics.csv, relabelled as fit_<name>."""
    p = Path(_manifest_path(fit_path)).parent / "metrics.csv"
    if not p.exists():
        return []
    lines = [ln for ln in p.read_text().splitlines()[2:] if ln]
    rows = []
    for ln in lines:
        k, v = ln.split(",", 1)
        if v not in ("", "None"):
            rows.append((k, float(v)))
    return [(f"fit_{k}", v) for k, v in rows]


def _manifest_path(p) -> str:
    p = Path(p)
    return str(p / "manifest.json" if p.is_dir() else p)


def run_map(cfg) -> int:
    from . import mapping

    man = _load_manifest(cfg.get("fit"))
    gpath = cfg.get("grid") or man.get("grid")
    grid = _load_grid(gpath, cfg.get("area"))
    surf = model_surface(man["model"], grid)
    ident = run_identity(cfg, {"grid": gpath, "fit": _manifest_path(cfg["fit"])})
    h = ident["hash"]
    out = _outdir(cfg)
    label = "probability" if man["model"].get("kind") == "deformed" else "intensity"
    mapping.write_pgm(surf, grid, out / "map.pgm", comment=f"manifest {h}")
    mapping.write_map_csv(surf, grid, out / "map.csv", f"manifest {h}", label)
    mapping.write_presence_sidecar(grid, out / "presences.csv", f"manifest {h}")
    return 0


# ---------------------------------------------------------------------------
# simulate / study
# ---------------------------------------------------------------------------


def run_simulate(cfg) -> int:
    from .grid import write_grid
    from .integrated import SurveyDesign
    from .simulate import lattice_grid, rng_stream, simulate_so
    from .study import contaminate
    from scipy.special import expit

    if cfg.get("truth") is None:
        raise ConfigError("simulate needs --truth theta0,theta1,...")
    theta = np.asarray(cfg["truth"], dtype=float)
    seed = int(cfg["seed"])
    if cfg.get("grid"):
        grid = _load_grid(cfg["grid"], cfg.get("area"))
    else:
        grid = lattice_grid(int(cfg["nrow"]), int(cfg["ncol"]), area=float(cfg.get("area") or 1.0),
                            n_access=int(cfg["n_access"]), seed=seed)
    if theta.size != grid.p + 1:
        raise ConfigError(f"truth has {theta.size - 1} slopes but the grid has {grid.p} features")
    lam0 = np.exp(theta[0] + grid.X @ theta[1:])
    mean = grid.w * lam0
    if cfg.get("alpha") is not None:
        alpha = np.asarray(cfg["alpha"], dtype=float)
        if alpha.size != grid.V.shape[1]:
            raise ConfigError(f"alpha has {alpha.size} entries but the grid has {grid.V.shape[1]} v covariates")
        mean = mean * expit(grid.V @ alpha)
    counts = rng_stream(seed, 0, "simulate").poisson(mean)
    counts = contaminate(counts, lam0, float(cfg["contamination"]), rng_stream(seed, 0, "contaminate"))
    K = int(cfg["regions"])
    if K:
        size = int(cfg["region_size"])
        if K * size > grid.m:
            raise ConfigError("survey regions need more cells than the grid has")
        region = np.full(grid.m, -1, dtype=np.int64)
        for i in range(K):
            region[i * size:(i + 1) * size] = i
        grid.region = region
    out = _outdir(cfg)
    ident = run_identity(cfg, {"grid": cfg.get("grid")})
    h = ident["hash"]
    sim = grid.with_counts(counts)
    write_grid(sim, out / "grid.csv", f"manifest {h}")
    files = ["grid.csv"]
    if K:
        tau = np.asarray(cfg.get("tau_detect") or [0.0], dtype=float)
        T = int(cfg["visits"])
        design = SurveyDesign([np.flatnonzero(region == i) for i in range(K)], T, np.ones((K, T, tau.size)))
        data = simulate_so(theta, tau, design, grid, rng_stream(seed, 0, "simulate-so"))
        cov = [f"z{q + 1}" for q in range(tau.size)]
        rows = [[i, j + 1, int(data.y[i, j]), *design.zdet[i, j]] for i in range(K) for j in range(T)]
        write_csv(out / "survey.csv", ["region_id", "visit", "y", *cov], rows, h)
        files.append("survey.csv")
    write_manifest(out, ident, {"outputs": files, "n_presence": int(counts.sum())})
    return 0


def run_study_cmd(cfg) -> int:
    from .study import StudyConfig, run_study

    if cfg.get("truth") is None:
        raise ConfigError("study needs --truth")
    if cfg.get("replicates") is None:
        raise ConfigError("study needs --replicates")
    sc = StudyConfig(
        truth=cfg["truth"], replicates=int(cfg["replicates"]), seed=int(cfg["seed"]), scenario=cfg["scenario"],
        m=int(cfg["m"]), area=float(cfg.get("area") or 1.0),
        estimators=[e.strip() for e in str(cfg["estimators"]).split(",") if e.strip()],
        contamination=float(cfg["contamination"]), workers=int(cfg["workers"]),
        alpha=cfg.get("alpha") or (1.0,), tau=cfg.get("tau_detect") or (0.0,),
        n_regions=int(cfg["regions"]) or 50, region_size=int(cfg["region_size"]), visits=int(cfg["visits"]),
    )
    res = run_study(sc)
    ident = run_identity(cfg, {})
    out = _outdir(cfg)
    header = ["estimator", "parameter", "truth", "mean_bias", "mc_se", "emp_sd", "mean_se", "coverage95",
              "replicates_ok", "failures"]
    if sc.scenario == "integrated":
        header.append("variance_ratio_integrated")
    write_csv(out / "study.csv", header, [[r.get(k) for k in header] for r in res.rows], ident["hash"])
    write_manifest(out, ident, {"failures": res.failures, "seed": sc.seed, "replicates": sc.replicates,
                                "outputs": ["study.csv"]})
    return 0


COMMANDS = {"fit": run_fit, "simulate": run_simulate, "evaluate": run_evaluate, "map": run_map,
            "study": run_study_cmd}


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve(args)
        return COMMANDS[args.command](cfg)
    except PpsdmError as exc:
        print(f"ppsdm: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (ValueError, KeyError) as exc:
        print(f"ppsdm: error: {exc}", file=sys.stderr)
        return ConfigError.exit_code
    except Exception as exc:  # noqa: BLE001
        log.exception("internal error")
        print(f"ppsdm: internal error: {exc}", file=sys.stderr)
        return 5


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
