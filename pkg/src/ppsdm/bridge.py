"""Estimators equivalent or adjacent to the point-process MLE.

Maxent, beta-Maxent (deformed exponential), presence/background logistic
regressions (case-control weighted, infinitely weighted, asymmetric) and the
quasi-linear point process with a sampling-bias intensity.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy import sparse
from scipy.optimize import linprog
from scipy.special import expit

from .divergence import FitOptions
from .errors import DataError
from .grid import CovariateGrid, FeatureTransform
from .intensity import DeformedParams, QuasiLinearParams, kn_log_mean
from .optimize import FitResult, newton_minimize, sandwich

BETA_GRID = (-1.0, -1.0 / 3.0, -1.0 / 5.0, 0.0, 1.0 / 5.0, 1.0 / 3.0, 1.0)
TAU_GRID = (-1.0, 0.0, 1.0)
SEPARATION_BOUND = 30.0


# ---------------------------------------------------------------------------
# Maxent
# ---------------------------------------------------------------------------


@dataclass
class MaxentFit:
    alpha1: np.ndarray
    Z: float
    theta0_equiv: float
    loglik: float
    score_norm: float
    iterations: int
    converged: bool
    message: str = ""
    names: tuple = ()

    def recompute_Z(self, grid: CovariateGrid) -> float:
        return float(np.exp(grid.X @ self.alpha1).sum())

    @property
    def ppp_params(self) -> np.ndarray:
        return np.concatenate([[self.theta0_equiv], self.alpha1])


def moment_feasible(X: np.ndarray, xbar: np.ndarray) -> bool:
    """Whether some strictly positive distribution over cells has mean ``xbar``.

    Solves ``max t`` subject to ``pi_i >= t``, ``sum pi = 1``,
    ``sum pi x_i = xbar``. Infeasibility means the Maxent/PPP slopes diverge.
    """
    m, p = X.shape
    if p == 0:
        return True
    c = np.zeros(m + 1)
    c[-1] = -1.0
    A_ub = sparse.hstack([-sparse.identity(m), np.ones((m, 1))], format="csr")
    A_eq = np.vstack([np.hstack([X.T, np.zeros((p, 1))]), np.hstack([np.ones((1, m)), np.zeros((1, 1))])])
    b_eq = np.concatenate([xbar, [1.0]])
    res = linprog(c, A_ub=A_ub, b_ub=np.zeros(m), A_eq=A_eq, b_eq=b_eq,
                  bounds=[(0, None)] * m + [(None, 1.0)], method="highs")
    return bool(res.status == 0 and -res.fun > 1e-9 / m)


def _maxent_objective(Xs, c):
    n = float(c.sum())

    def fun(a):
        u = Xs @ a
        top = u.max()
        e = np.exp(u - top)
        Z = e.sum()
        pi = e / Z
        logZ = top + np.log(Z)
        value = -(c @ u) + n * logZ
        xbar = Xs.T @ pi
        grad = -(Xs.T @ c) + n * xbar
        H = n * ((Xs * pi[:, None]).T @ Xs - np.outer(xbar, xbar))
        return value, grad, H

    return fun


def fit_maxent(grid: CovariateGrid, opts: Optional[FitOptions] = None) -> MaxentFit:
    """Maximise ``sum_presences log pi(s)`` with ``pi ∝ exp(alpha1 . x)`` over cells."""
    opts = opts or FitOptions()
    if grid.n < 1:
        raise DataError("at least one presence record is required")
    tr = grid.transform(opts.standardize)
    Xs = tr.apply(grid.X)
    c = grid.counts.astype(float)
    n = float(c.sum())
    names = tuple(grid.x_names)
    res = newton_minimize(_maxent_objective(Xs, c), np.zeros(grid.p), opts.tol, opts.max_iter)
    H = _maxent_objective(Xs, c)(res.x)[2]
    flat = grid.p and np.linalg.eigvalsh(H)[0] < 1e-6 * n
    suspicious = not res.converged or flat or np.max(np.abs(res.x), initial=0.0) > SEPARATION_BOUND
    # the LP is exact but slow on large grids, so only run it when the fit looks off
    if suspicious and not moment_feasible(Xs, Xs.T @ c / n):
        return MaxentFit(np.full(grid.p, np.nan), np.nan, np.nan, np.nan, np.nan, res.iterations, False,
                         "separation: presence feature means lie on the boundary of the feature hull", names)
    alpha1 = res.x / tr.sd
    u = grid.X @ alpha1
    Z = float(np.exp(u).sum())
    m = grid.m
    theta0 = float(np.log(m * n / (grid.area * Z)))
    loglik = float(c @ u - n * np.log(Z))
    return MaxentFit(alpha1, Z, theta0, loglik, float(np.max(np.abs(res.grad), initial=0.0)),
                     res.iterations, res.converged, res.message, names)


# ---------------------------------------------------------------------------
# beta-Maxent
# ---------------------------------------------------------------------------


def _beta_maxent_parts(a, Xs, c, beta):
    """Per-cell pieces of the deformed model at ``a`` (None if infeasible)."""
    u = Xs @ a
    t = 1.0 + beta * u
    if np.any(t <= 0):
        return None
    logq = np.log(t) / beta
    top = logq.max()
    q = np.exp(logq - top)
    pi = q / q.sum()
    xt = Xs / t[:, None]
    xbar = xt.T @ pi
    g = xt - xbar  # d log pi_i / d a, row i
    C = -((g * pi[:, None]).T @ g) + beta * (xt * pi[:, None]).T @ xt
    return pi, t, xt, g, C


def beta_maxent_loss(a, Xs, c, beta) -> float:
    """``n`` times the beta-Maxent loss; ``inf`` outside the positivity domain."""
    n = float(c.sum())
    if beta == 0.0:
        u = Xs @ a
        top = u.max()
        return float(-(c @ u) + n * (top + np.log(np.exp(u - top).sum())) + n)
    parts = _beta_maxent_parts(a, Xs, c, beta)
    if parts is None:
        return np.inf
    pi = parts[0]
    return float(-(c @ np.expm1(beta * np.log(pi))) / beta + n * _normaliser_term(pi, beta))


def _normaliser_term(pi, beta):
    # at beta = -1 the term is sum log pi, up to an infinite constant
    if beta == -1.0:
        return float(np.sum(np.log(pi)))
    return float(np.sum(pi ** (1.0 + beta)) / (1.0 + beta))


def _beta_maxent_objective(Xs, c, beta):
    n = float(c.sum())
    k = Xs.shape[1]

    def fun(a):
        parts = _beta_maxent_parts(a, Xs, c, beta)
        if parts is None:
            return np.inf, np.full(k, np.nan), np.full((k, k), np.nan)
        pi, t, xt, g, C = parts
        pb = pi ** beta
        wa = c * pb  # presence side
        wb = n * pi * pb  # normaliser side
        value = -(c @ (pb - 1.0)) / beta + n * _normaliser_term(pi, beta)
        grad = g.T @ (wb - wa)
        xx = lambda wts: (xt * wts[:, None]).T @ xt  # noqa: E731
        gg = lambda wts: (g * wts[:, None]).T @ g  # noqa: E731
        H_a = beta * gg(wa) - beta * xx(wa) + wa.sum() * C
        H_b = (1.0 + beta) * gg(wb) - beta * xx(wb) + wb.sum() * C
        return value, grad, H_b - H_a

    return fun


def _beta_maxent_point_scores(a, Xs, c, beta):
    """Gradient of each presence point's loss contribution, one row per cell."""
    if beta == 0.0:
        u = Xs @ a
        pi = np.exp(u - u.max())
        pi /= pi.sum()
        return -(Xs - Xs.T @ pi)
    pi, t, xt, g, C = _beta_maxent_parts(a, Xs, c, beta)
    common = g.T @ (pi ** (1.0 + beta))
    return -(pi ** beta)[:, None] * g + common


def fit_beta_maxent(grid: CovariateGrid, beta_grid: Sequence[float] = BETA_GRID,
                    opts: Optional[FitOptions] = None):
    """Fit the deformed exponential model for each beta and select by TIC.

    Returns ``(DeformedParams, table)``; the table has one row per beta with
    ``beta, loss, loglik, tic, converged`` and the fitted ``alpha1`` (original
    scale when the standardisation can be undone, see
    :func:`_deformed_to_original`). ``tic`` is the M-estimator criterion of
    :func:`_beta_maxent_gic`. At beta = -1 the loss drops the divergent
    constant ``m/(1+beta)``.
    """
    opts = opts or FitOptions()
    if grid.n < 1:
        raise DataError("at least one presence record is required")
    tr = grid.transform(opts.standardize)
    Xs = tr.apply(grid.X)
    c = grid.counts.astype(float)
    k = grid.p
    table = []
    maxent = None
    for beta in beta_grid:
        beta = float(beta)
        row = {"beta": beta}
        if beta == 0.0:
            maxent = maxent or fit_maxent(grid, opts)
            a = maxent.alpha1 * tr.sd
            row.update(converged=maxent.converged, iterations=maxent.iterations, message=maxent.message)
        else:
            # solve on the per-point scale of the loss so the tolerance is meaningful
            obj = _beta_maxent_objective(Xs, c, beta)
            n = float(c.sum())

            def scaled(z, obj=obj, n=n):
                v, gr, hs = obj(z)
                return v / n, gr / n, hs / n

            res = newton_minimize(scaled, np.zeros(k), opts.tol, opts.max_iter)
            a = res.x
            msg = res.message
            if not res.converged and np.min(1.0 + beta * (Xs @ a)) < 1e-6:
                msg = "optimum on the positivity boundary 1 + beta*alpha.x = 0"
            row.update(converged=res.converged, iterations=res.iterations, message=msg)
        if row["converged"]:
            loss = beta_maxent_loss(a, Xs, c, beta)
            tic, loglik = _beta_maxent_gic(a, Xs, c, beta)
        else:
            loss = tic = loglik = np.nan
        row["loglik"] = loglik
        row.update(loss=loss / grid.n if np.isfinite(loss) else np.nan, tic=tic,
                   alpha1_std=np.asarray(a, dtype=float), alpha1=_deformed_to_original(a, tr, beta))
        table.append(row)
    ok = [r for r in table if r["converged"] and np.isfinite(r["tic"])]
    if not ok:
        raise DataError("no beta in the grid produced a converged fit")
    best = min(ok, key=lambda r: r["tic"])
    return DeformedParams(best["beta"], best["alpha1"]), table


def _beta_maxent_gic(a, Xs, c, beta):
    """Information criterion for the M-estimator at ``a``.

    ``-2 sum log pi + 2 tr(J^-1 Q)`` with ``J`` the Hessian of the summed loss
    and ``Q = sum c psi g^T`` pairing the estimating function with the
    log-probability gradient. Unlike the raw loss this is on the same scale
    for every beta; at beta = 0 it is the TIC of the Maxent likelihood.
    """
    if beta == 0.0:
        J = _maxent_objective(Xs, c)(a)[2]
        u = Xs @ a
        logpi = u - (u.max() + np.log(np.exp(u - u.max()).sum()))
        g = Xs - Xs.T @ np.exp(logpi)
    else:
        J = _beta_maxent_objective(Xs, c, beta)(a)[2]
        pi, t, xt, g, C = _beta_maxent_parts(a, Xs, c, beta)
        logpi = np.log(pi)
    psi = -_beta_maxent_point_scores(a, Xs, c, beta)
    Q = (psi * c[:, None]).T @ g
    loglik = float(c @ logpi)
    try:
        penalty = float(np.trace(np.linalg.solve(0.5 * (J + J.T), Q)))
    except np.linalg.LinAlgError:
        return np.nan, loglik
    return -2.0 * loglik + 2.0 * penalty, loglik


def _deformed_to_original(a_std, tr: FeatureTransform, beta: float) -> np.ndarray:
    """Coefficients acting on raw features that give the same cell probabilities.

    ``1 + beta a.(x - mu)/sd = k (1 + beta a'.x)`` with ``k = 1 - beta a.mu/sd``
    and ``a' = (a/sd)/k``; ``k`` must be positive, otherwise NaN is returned.
    """
    a_raw = np.asarray(a_std, dtype=float) / tr.sd
    if beta == 0.0:
        return a_raw
    k = 1.0 - beta * float(a_raw @ tr.mean)
    if k <= 0:
        return np.full_like(a_raw, np.nan)
    return a_raw / k


# ---------------------------------------------------------------------------
# presence / background logistic regression
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class WeightScheme:
    """``case_control`` (mu, ybar), ``infinite`` (W) or ``asymmetric`` (kappa)."""

    kind: str
    mu: float = float("nan")
    ybar: Optional[float] = None
    W: float = 1000.0
    kappa: float = 1.0

    def __post_init__(self):
        if self.kind == "case_control":
            if not 0 < self.mu < 1 or (self.ybar is not None and not 0 < self.ybar < 1):
                raise ValueError("case-control weights need 0 < mu < 1 and 0 < ybar < 1")
        elif self.kind == "infinite":
            if not self.W > 0:
                raise ValueError("background weight W must be positive")
        elif self.kind == "asymmetric":
            if not self.kappa > 0:
                raise ValueError("kappa must be positive")
        else:
            raise ValueError(f"unknown weight scheme {self.kind!r}")

    @classmethod
    def CaseControl(cls, mu, ybar=None):
        return cls("case_control", mu=mu, ybar=ybar)

    @classmethod
    def Infinite(cls, W=1000.0):
        return cls("infinite", W=W)

    @classmethod
    def Asymmetric(cls, kappa):
        return cls("asymmetric", kappa=kappa)


def asymmetric_weight(eta, kappa: float):
    """``e^eta / (e^eta + kappa)``."""
    return expit(np.asarray(eta, dtype=float) - np.log(kappa))


def presence_background_data(grid: CovariateGrid, standardize: bool = True):
    """Stacked design: presence cells (y=1, multiplicity = count), then every cell (y=0)."""
    tr = grid.transform(standardize)
    D = np.column_stack([np.ones(grid.m), tr.apply(grid.X)])
    pres = np.flatnonzero(grid.counts > 0)
    Dall = np.vstack([D[pres], D])
    y = np.concatenate([np.ones(pres.size), np.zeros(grid.m)])
    mult = np.concatenate([grid.counts[pres].astype(float), np.ones(grid.m)])
    bg_area = np.concatenate([np.zeros(pres.size), grid.w / grid.w.mean()])
    return tr, Dall, y, mult, bg_area


def _logistic_objective(D, y, wt):
    def fun(b):
        eta = D @ b
        s = expit(eta)
        value = float(wt @ (np.logaddexp(0.0, eta) - y * eta))
        grad = D.T @ (wt * (s - y))
        H = (D * (wt * s * (1.0 - s))[:, None]).T @ D
        return value, grad, H

    return fun


def _asymmetric_objective(D, y, mult, kappa):
    lk, lk1 = np.log(kappa), np.log1p(kappa)

    def fun(b):
        eta = D @ b
        value = -float(mult @ (y * np.logaddexp(eta, lk) - np.logaddexp(eta, lk1)))
        om = expit(eta - lk)
        q = expit(eta - lk1)
        grad = -D.T @ (mult * (y * om - q))
        curv = -(y * om * (1.0 - om) - q * (1.0 - q))
        H = (D * (mult * curv)[:, None]).T @ D
        return value, grad, H

    return fun


def fit_weighted_logistic(grid: CovariateGrid, scheme: WeightScheme, opts: Optional[FitOptions] = None) -> FitResult:
    """Presence/background logistic regression under one of three weightings.

    * ``case_control``: ``(mu/ybar)`` on presences, ``(1-mu)/(1-ybar)`` on background.
    * ``infinite``: weight 1 on presences and ``W`` (times relative cell area) on background.
    * ``asymmetric``: unweighted likelihood of ``P(Y=1) = (e^eta + kappa)/(1 + e^eta + kappa)``,
      whose score carries the weight ``e^eta/(e^eta + kappa)``.
    """
    opts = opts or FitOptions()
    if grid.n < 1:
        raise DataError("at least one presence record is required")
    tr, D, y, mult, bg_area = presence_background_data(grid, opts.standardize)
    k = D.shape[1]
    loglik = None
    if scheme.kind == "asymmetric":
        fun = _asymmetric_objective(D, y, mult, scheme.kappa)
        wt = mult
    else:
        if scheme.kind == "case_control":
            ybar = scheme.ybar if scheme.ybar is not None else grid.n / (grid.n + grid.m)
            w1, w0 = scheme.mu / ybar, (1.0 - scheme.mu) / (1.0 - ybar)
            wt = mult * np.where(y == 1, w1, w0)
        else:
            wt = np.where(y == 1, mult, scheme.W * bg_area)
        fun = _logistic_objective(D, y, wt)
    start = np.zeros(k)
    start[0] = np.log(grid.n / (wt[y == 0].sum()))
    res = newton_minimize(fun, start, opts.tol, opts.max_iter)
    b = res.x
    value, grad, H = fun(b)
    message = res.message
    converged = res.converged
    eig = np.linalg.eigvalsh(0.5 * (H + H.T))
    if np.max(np.abs(b[1:]), initial=0.0) > SEPARATION_BOUND or eig[0] < 1e-7 * eig[-1]:
        converged = False
        message = "separation: slope estimates diverge"
    # per-observation scores for the sandwich
    eta = D @ b
    if scheme.kind == "asymmetric":
        s_i = (y * asymmetric_weight(eta, scheme.kappa) - expit(eta - np.log1p(scheme.kappa)))
        K = (D * (mult * s_i * s_i)[:, None]).T @ D
        loglik = -value
    else:
        r = (wt / np.maximum(mult, 1e-300)) * (y - expit(eta))
        K = (D * (mult * r * r)[:, None]).T @ D
        if np.allclose(wt, mult):
            loglik = -value
    J = 0.5 * (H + H.T)
    cov = None
    if converged and opts.covariance:
        try:
            A = tr.jacobian()
            cov = A @ sandwich(J, K) @ A.T
        except Exception:
            cov = None
    try:
        tic = 2.0 * value + 2.0 * float(np.trace(np.linalg.solve(J, K)))
    except np.linalg.LinAlgError:
        tic = None
    return FitResult(
        method={"case_control": "cc-logit", "infinite": "iwlr", "asymmetric": "asym-logit"}[scheme.kind],
        params=tr.to_original(b), names=("(intercept)",) + tuple(grid.x_names), objective=value,
        score_norm=float(np.max(np.abs(grad), initial=0.0)), iterations=res.iterations,
        converged=converged, tol=opts.tol, params_std=b, loglik=loglik, covariance=cov,
        aic=None if loglik is None else 2.0 * k - 2.0 * loglik, tic=tic, ridge=res.ridge_used,
        message=message, jacobian=J, score_var=K, extra={"scheme": scheme},
    )


# ---------------------------------------------------------------------------
# quasi-linear point process
# ---------------------------------------------------------------------------


def _ql_design(grid: CovariateGrid, standardize: bool):
    trx = grid.transform(standardize)
    Dx = np.column_stack([np.ones(grid.m), trx.apply(grid.X)])
    trz = FeatureTransform.fit(grid.Z) if standardize else FeatureTransform.identity(grid.Z.shape[1])
    Dz = np.column_stack([np.ones(grid.m), trz.apply(grid.Z)])
    return trx, trz, Dx, Dz


def ql_negloglik_parts(params, Dx, Dz, c, w, tau, pin_alpha0=False):
    """``-l_Q`` with gradient and Hessian in ``(theta, alpha)`` (alpha0 dropped when pinned)."""
    kx = Dx.shape[1]
    theta = params[:kx]
    alpha = params[kx:]
    if pin_alpha0:
        alpha = np.concatenate([[0.0], alpha])
    eta1, eta2 = Dx @ theta, Dz @ alpha
    f, om = kn_log_mean(eta1, eta2, tau)
    k = len(params)
    if np.any(f > 700.0):
        return np.inf, np.full(k, np.nan), np.full((k, k), np.nan)
    lam = np.exp(f)
    wl = w * lam
    value = float(-c @ f + wl.sum())
    r = wl - c  # d loss / d f
    g1, g2 = r * om, r * (1.0 - om)
    grad = np.concatenate([Dx.T @ g1, Dz.T @ g2])
    s = tau * om * (1.0 - om)
    h11 = r * s + wl * om * om
    h22 = r * s + wl * (1.0 - om) ** 2
    h12 = -r * s + wl * om * (1.0 - om)
    H = np.block([
        [(Dx * h11[:, None]).T @ Dx, (Dx * h12[:, None]).T @ Dz],
        [(Dz * h12[:, None]).T @ Dx, (Dz * h22[:, None]).T @ Dz],
    ])
    if pin_alpha0:
        grad = np.delete(grad, kx)
        H = np.delete(np.delete(H, kx, axis=0), kx, axis=1)
    return value, grad, H


def fit_quasilinear_tau(grid: CovariateGrid, tau: float, opts: Optional[FitOptions] = None) -> FitResult:
    """Maximise the quasi-linear log-likelihood at a fixed ``tau``.

    At ``tau = 0`` only ``theta0 + alpha0`` is identified, so ``alpha0`` is
    pinned to 0 and not counted as a parameter.
    """
    from .divergence import fit_mle

    opts = opts or FitOptions()
    if grid.n < 1:
        raise DataError("at least one presence record is required")
    trx, trz, Dx, Dz = _ql_design(grid, opts.standardize)
    c = grid.counts.astype(float)
    w = grid.w
    kx, kz = Dx.shape[1], Dz.shape[1]
    pin = tau == 0.0
    base = fit_mle(grid, opts=FitOptions(tol=opts.tol, standardize=opts.standardize, covariance=False)).params_std
    theta_start = base.copy()
    alpha_start = np.zeros(kz)
    alpha_start[0] = base[0]
    if pin:
        theta_start = 2.0 * base
        theta_start[0] = 2.0 * base[0]
        alpha_start = alpha_start[1:]
    start = np.concatenate([theta_start, alpha_start])

    def fun(x):
        return ql_negloglik_parts(x, Dx, Dz, c, w, tau, pin)

    res = newton_minimize(fun, start, opts.tol, opts.max_iter)
    x = res.x
    value, grad, H = fun(x)
    theta_std = x[:kx]
    alpha_std = np.concatenate([[0.0], x[kx:]]) if pin else x[kx:]
    k = len(x)
    loglik = -value
    return FitResult(
        method="ql-ppp",
        params=np.concatenate([trx.to_original(theta_std), trz.to_original(alpha_std)]),
        names=("(intercept)",) + tuple(grid.x_names) + ("bias:(intercept)",) + tuple(f"bias:{z}" for z in grid.z_names),
        objective=value, score_norm=float(np.max(np.abs(grad), initial=0.0)), iterations=res.iterations,
        converged=res.converged, tol=opts.tol, params_std=np.concatenate([theta_std, alpha_std]),
        loglik=loglik, aic=2.0 * k - 2.0 * loglik, ridge=res.ridge_used, message=res.message,
        jacobian=0.5 * (H + H.T), extra={"tau": float(tau), "k": k, "kx": kx},
    )


def ql_params(fit: FitResult) -> QuasiLinearParams:
    kx = fit.extra["kx"]
    return QuasiLinearParams(fit.extra["tau"], fit.params[:kx].copy(), fit.params[kx:].copy())


def bias_proportion(params: QuasiLinearParams, grid: CovariateGrid) -> np.ndarray:
    """``1 - omega(s)``: share of the score attributed to the sampling-bias intensity."""
    theta = np.asarray(params.theta, dtype=float)
    alpha = np.asarray(params.alpha_bias, dtype=float)
    _, om = kn_log_mean(theta[0] + grid.X @ theta[1:], alpha[0] + grid.Z @ alpha[1:], params.ql_tau)
    return 1.0 - om


def fit_quasilinear_ppp(grid: CovariateGrid, tau_grid: Sequence[float] = TAU_GRID,
                        opts: Optional[FitOptions] = None):
    """Fit each ``tau`` and keep the converged fit with the smallest AIC.

    Returns ``(QuasiLinearParams, table)``; table rows carry
    ``tau, loglik, aic, k, converged`` and the ``fit`` itself.
    """
    table = []
    for tau in tau_grid:
        try:
            fit = fit_quasilinear_tau(grid, float(tau), opts)
        except Exception as exc:  # keep the other taus
            table.append({"tau": float(tau), "loglik": np.nan, "aic": np.nan, "k": 0,
                          "converged": False, "message": str(exc), "fit": None})
            continue
        table.append({"tau": float(tau), "loglik": fit.loglik, "aic": fit.aic, "k": fit.extra["k"],
                      "converged": fit.converged, "message": fit.message, "fit": fit})
    ok = [r for r in table if r["converged"]]
    if not ok:
        raise DataError("no tau produced a converged quasi-linear fit")
    best = min(ok, key=lambda r: r["aic"])
    return ql_params(best["fit"]), table
