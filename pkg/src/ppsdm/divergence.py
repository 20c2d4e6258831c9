"""Minimum-divergence fitting of log-linear intensities on a grid.

Objectives, all written with cell quadrature and presence counts ``c``:

* KL: the Poisson point-process negative log-likelihood
  ``-sum c log(lam) + sum w lam``.
* beta-power: ``-(1/beta) sum c (lam^beta - 1) + 1/(1+beta) sum w lam^(1+beta)``.
* gamma-power: ``-(R - n)/gamma`` with ``R = sum c lam^gamma /
  (sum w lam^(1+gamma))^(gamma/(1+gamma))``; invariant to the scale of lam.
* U-divergence with cdf weight: ``-sum c xi(lam) + sum w G(lam)`` where
  ``xi'(t) t = F(tau t)`` and ``G'(t) = F(tau t)``.

KL, beta and U share the weighted score ``sum omega(lam) (c - w lam) d log lam``
with ``omega`` equal to 1, ``lam^beta`` and ``F(tau lam)`` respectively.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.special import exp1

from .errors import DataError
from .grid import CovariateGrid, FeatureTransform, pseudo_responses
from .intensity import LogLinearParams
from .optimize import FitResult, newton_minimize, numerical_jacobian, sandwich

EULER_GAMMA = 0.5772156649015329


# ---------------------------------------------------------------------------
# specifications
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CdfSpec:
    """Weight cdf on [0, inf): ``step``, ``exp`` (1 - e^-u) or ``unicap`` (min(u, 1))."""

    family: str = "step"

    def __post_init__(self):
        if self.family not in ("step", "exp", "unicap"):
            raise ValueError(f"unknown cdf family {self.family!r}")

    def F(self, u):
        u = np.asarray(u, dtype=float)
        if self.family == "step":
            return (u > 0).astype(float)
        if self.family == "exp":
            return -np.expm1(-u)
        return np.minimum(u, 1.0)

    def density(self, u):
        u = np.asarray(u, dtype=float)
        if self.family == "step":
            return np.zeros_like(u)
        if self.family == "exp":
            return np.exp(-u)
        return (u < 1.0).astype(float)

    def xi(self, t, tau: float):
        """``int_0^t F(tau u)/u du`` (log t for the step cdf, where it diverges)."""
        t = np.asarray(t, dtype=float)
        if self.family == "step":
            return np.log(t)
        x = tau * t
        if self.family == "unicap":
            return np.where(x <= 1.0, x, 1.0 + np.log(np.maximum(x, 1.0)))
        return _ein(x)

    def G(self, t, tau: float):
        """``int_0^t F(tau u) du``."""
        t = np.asarray(t, dtype=float)
        if self.family == "step":
            return t
        if self.family == "exp":
            return t + np.expm1(-tau * t) / tau
        x = tau * t
        return np.where(x <= 1.0, 0.5 * tau * t * t, t - 0.5 / tau)


def _ein(x):
    """Entire exponential integral ``int_0^x (1 - e^-v)/v dv``."""
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    small = x < 0.5
    xs = x[small]
    term = xs.copy()
    acc = xs.copy()
    for k in range(2, 25):
        term = -term * xs / k
        acc = acc + term / k
    out[small] = acc
    xl = x[~small]
    out[~small] = exp1(xl) + np.log(xl) + EULER_GAMMA
    return out


@dataclass(frozen=True)
class DivergenceSpec:
    kind: str = "kl"
    beta: float = 0.0
    gamma: float = 0.0
    cdf: CdfSpec = field(default_factory=CdfSpec)
    ucdf_tau: float = 1.0

    def __post_init__(self):
        if self.kind not in ("kl", "beta", "gamma", "ucdf"):
            raise ValueError(f"unknown divergence {self.kind!r}")
        if not (np.isfinite(self.beta) and np.isfinite(self.gamma)):
            raise ValueError("beta and gamma must be finite")
        if not self.ucdf_tau > 0:
            raise ValueError("ucdf_tau must be positive")

    @classmethod
    def KL(cls):
        return cls("kl")

    @classmethod
    def BetaPower(cls, beta: float):
        return cls("beta", beta=beta)

    @classmethod
    def GammaPower(cls, gamma: float):
        return cls("gamma", gamma=gamma)

    @classmethod
    def UCdf(cls, cdf, ucdf_tau: float):
        return cls("ucdf", cdf=cdf if isinstance(cdf, CdfSpec) else CdfSpec(cdf), ucdf_tau=ucdf_tau)

    @property
    def label(self) -> str:
        if self.kind == "beta":
            return f"beta({self.beta:g})"
        if self.kind == "gamma":
            return f"gamma({self.gamma:g})"
        if self.kind == "ucdf":
            return f"ucdf({self.cdf.family},tau={self.ucdf_tau:g})"
        return "kl"


@dataclass
class FitOptions:
    tol: float = 1e-8
    max_iter: int = 200
    standardize: bool = True
    ridge: Optional[float] = None  # None: only when the design is rank deficient
    covariance: bool = True


# ---------------------------------------------------------------------------
# loss / score kernels on a design matrix
# ---------------------------------------------------------------------------


def _lam(D, theta):
    eta = D @ theta
    if np.any(eta > 700.0):
        return eta, None
    return eta, np.exp(eta)


def _weights(spec: DivergenceSpec, eta, lam):
    """``omega(lam)`` and ``d omega / d log lam``."""
    if spec.kind == "kl":
        return np.ones_like(lam), np.zeros_like(lam)
    if spec.kind == "beta":
        lb = np.exp(spec.beta * eta)
        return lb, spec.beta * lb
    u = spec.ucdf_tau * lam
    return spec.cdf.F(u), spec.cdf.density(u) * u


def _loss_values(spec: DivergenceSpec, eta, lam, c, w) -> float:
    if spec.kind == "kl" or (spec.kind == "ucdf" and spec.cdf.family == "step"):
        return float(-c @ eta + w @ lam)
    if spec.kind == "beta":
        b = spec.beta
        return float(-(c @ np.expm1(b * eta)) / b + (w @ np.exp((1.0 + b) * eta)) / (1.0 + b))
    cdf, tau = spec.cdf, spec.ucdf_tau
    return float(-c @ cdf.xi(lam, tau) + w @ cdf.G(lam, tau))


def _weighted_objective(spec, D, c, w, ridge):
    def fun(theta):
        eta, lam = _lam(D, theta)
        k = len(theta)
        if lam is None:
            return np.inf, np.full(k, np.nan), np.full((k, k), np.nan)
        with np.errstate(over="ignore", invalid="ignore"):
            om, dom = _weights(spec, eta, lam)
            resid = c - w * lam
            value = _loss_values(spec, eta, lam, c, w) + 0.5 * ridge * float(theta[1:] @ theta[1:])
            grad = -D.T @ (om * resid)
            curv = om * w * lam - dom * resid
            H = (D * curv[:, None]).T @ D
        if not (np.isfinite(value) and np.all(np.isfinite(grad)) and np.all(np.isfinite(H))):
            # a trial step of the line search overshot; reject it
            return np.inf, np.full(k, np.nan), np.full((k, k), np.nan)
        if ridge:
            grad[1:] += ridge * theta[1:]
            H[1:, 1:] += ridge * np.eye(len(theta) - 1)
        return value, grad, H

    return fun


def _weighted_score(spec, D, c, w):
    def E(theta):
        eta, lam = _lam(D, theta)
        om, _ = _weights(spec, eta, lam)
        return D.T @ (om * (c - w * lam))

    return E


def _gamma_objective(gamma, D1, c, w, ridge):
    n = float(c.sum())

    def fun(phi):
        eta = D1 @ phi
        if np.any(np.abs(eta) > 700.0 / max(1.0, abs(gamma) + 1.0)):
            k = len(phi)
            return np.inf, np.full(k, np.nan), np.full((k, k), np.nan)
        lg = np.exp(gamma * eta)
        lg1 = np.exp((gamma + 1.0) * eta)
        S = c @ lg
        Q = w @ lg1
        R = S / Q ** (gamma / (gamma + 1.0))
        a = D1.T @ (c * lg) / S
        b = D1.T @ (w * lg1) / Q
        Ca = (D1 * (c * lg / S)[:, None]).T @ D1 - np.outer(a, a)
        Cb = (D1 * (w * lg1 / Q)[:, None]).T @ D1 - np.outer(b, b)
        e = a - b
        value = -(R - n) / gamma + 0.5 * ridge * float(phi @ phi)
        grad = -R * e + ridge * phi
        H = -R * (gamma * np.outer(e, e) + gamma * Ca - (gamma + 1.0) * Cb) + ridge * np.eye(len(phi))
        return value, grad, H

    return fun


# ---------------------------------------------------------------------------
# public loss / score evaluation on original-scale parameters
# ---------------------------------------------------------------------------


def _check_params(params: LogLinearParams, grid: CovariateGrid) -> np.ndarray:
    theta = params.vector
    if theta.shape[0] != grid.p + 1:
        raise ValueError(f"expected {grid.p + 1} parameters, got {theta.shape[0]}")
    return theta


def negloglik(params: LogLinearParams, grid: CovariateGrid) -> float:
    """Poisson point-process negative log-likelihood with quadrature."""
    theta = _check_params(params, grid)
    eta = grid.design(False) @ theta
    return float(-grid.counts @ eta + grid.w @ np.exp(eta))


def score_kl(params: LogLinearParams, grid: CovariateGrid) -> np.ndarray:
    """``sum w (zeta - lam) d log lam / d theta``."""
    theta = _check_params(params, grid)
    D = grid.design(False)
    lam = np.exp(D @ theta)
    return D.T @ (grid.w * (pseudo_responses(grid) - lam))


def divergence_loss(spec: DivergenceSpec, params: LogLinearParams, grid: CovariateGrid) -> float:
    theta = _check_params(params, grid)
    D = grid.design(False)
    c, w = grid.counts.astype(float), grid.w
    if spec.kind == "gamma":
        return _gamma_objective(spec.gamma, D[:, 1:], c, w, 0.0)(theta[1:])[0]
    eta = D @ theta
    return _loss_values(spec, eta, np.exp(eta), c, w)


def estimating_function(spec: DivergenceSpec, params: LogLinearParams, grid: CovariateGrid) -> np.ndarray:
    """Estimating function in original coordinates (intercept first).

    For gamma-power this is ``sum w (zeta u - v) d log lam``; its intercept
    component is identically zero.
    """
    theta = _check_params(params, grid)
    D = grid.design(False)
    c, w = grid.counts.astype(float), grid.w
    if spec.kind == "gamma":
        eta = D @ theta
        lg = np.exp(spec.gamma * eta)
        lg1 = np.exp((spec.gamma + 1.0) * eta)
        u = lg / (c @ lg)
        v = lg1 / (w @ lg1)
        return D.T @ (c * u - w * v)
    return _weighted_score(spec, D, c, w)(theta)


# ---------------------------------------------------------------------------
# fitting
# ---------------------------------------------------------------------------


def _prepare(grid: CovariateGrid, opts: FitOptions):
    if grid.n < 1:
        raise DataError("at least one presence record is required")
    tr = grid.transform(opts.standardize)
    D = np.column_stack([np.ones(grid.m), tr.apply(grid.X)])
    ridge = opts.ridge
    flagged = False
    if ridge is None:
        ridge = 0.0
        if np.linalg.matrix_rank(D) < D.shape[1]:
            ridge = 1e-6 * max(1.0, grid.n)
            flagged = True
    elif ridge > 0:
        flagged = True
    return tr, D, grid.counts.astype(float), grid.w, ridge, flagged


def _names(grid: CovariateGrid):
    return ("(intercept)",) + tuple(grid.x_names)


def _finish(method, grid, tr: FeatureTransform, theta_std, res, value, E, J, K, opts, ridge, extra=None,
            loglik=None):
    A = tr.jacobian()
    cov = None
    if opts.covariance and res.converged and J is not None:
        try:
            cov = A @ sandwich(J, K) @ A.T
        except Exception as exc:  # singular J: leave covariance empty
            extra = dict(extra or {}, covariance_error=str(exc))
    k = len(theta_std)
    tic = None
    if J is not None:
        try:
            tic = 2.0 * value + 2.0 * float(np.trace(np.linalg.solve(J, K)))
        except np.linalg.LinAlgError:
            tic = None
    return FitResult(
        method=method,
        params=tr.to_original(theta_std),
        names=_names(grid),
        objective=value,
        score_norm=float(np.max(np.abs(E), initial=0.0)),
        iterations=res.iterations,
        converged=res.converged,
        tol=opts.tol,
        params_std=np.asarray(theta_std, dtype=float),
        loglik=loglik,
        covariance=cov,
        aic=None if loglik is None else 2.0 * k - 2.0 * loglik,
        tic=tic,
        ridge=bool(ridge) or res.ridge_used,
        message=res.message,
        jacobian=J,
        score_var=K,
        extra=extra,
    )


def fit_divergence(grid: CovariateGrid, spec: DivergenceSpec, opts: Optional[FitOptions] = None,
                   theta0: Optional[np.ndarray] = None) -> FitResult:
    """Minimise the divergence ``spec`` for a log-linear intensity."""
    opts = opts or FitOptions()
    if spec.kind == "beta" and spec.beta == 0.0:
        spec = DivergenceSpec.KL()
    if spec.kind == "gamma":
        return _fit_gamma(grid, spec, opts)
    tr, D, c, w, ridge, _ = _prepare(grid, opts)
    k = D.shape[1]
    start = np.zeros(k) if theta0 is None else np.asarray(theta0, dtype=float)
    res = newton_minimize(_weighted_objective(spec, D, c, w, ridge), start, opts.tol, opts.max_iter)
    theta = res.x
    Efun = _weighted_score(spec, D, c, w)
    E = Efun(theta)
    eta, lam = _lam(D, theta)
    J = K = None
    if lam is not None:
        J = -numerical_jacobian(Efun, theta)
        J = 0.5 * (J + J.T)
        om, _ = _weights(spec, eta, lam)
        K = (D * (c * om * om)[:, None]).T @ D
        value = _loss_values(spec, eta, lam, c, w)
    else:
        value = np.inf
    loglik = -value if spec.kind == "kl" or (spec.kind == "ucdf" and spec.cdf.family == "step") else None
    method = "ppp" if spec.kind == "kl" else spec.label
    return _finish(method, grid, tr, theta, res, value, E, J, K, opts, ridge,
                   extra={"divergence": spec}, loglik=loglik)


def _fit_gamma(grid: CovariateGrid, spec: DivergenceSpec, opts: FitOptions) -> FitResult:
    gamma = spec.gamma
    tr, D, c, w, ridge, _ = _prepare(grid, opts)
    D1 = D[:, 1:]
    k1 = D1.shape[1]
    n = float(c.sum())
    fun = _gamma_objective(gamma, D1, c, w, ridge)
    res = newton_minimize(fun, np.zeros(k1), opts.tol, opts.max_iter)
    phi = res.x
    eta = D1 @ phi
    lam1 = np.exp(eta)
    Lam1 = float(w @ lam1)
    theta0 = np.log(n / Lam1)
    theta = np.concatenate([[theta0], phi])
    value, grad, H = fun(phi)
    R = float(c @ np.exp(gamma * eta)) / float(w @ np.exp((gamma + 1.0) * eta)) ** (gamma / (gamma + 1.0))
    gstd = _standard_grid(grid, tr)
    Efull = estimating_function(spec, LogLinearParams.from_vector(theta), gstd)
    J = K = None
    cov_std = None
    if not k1:
        cov_std = np.array([[1.0 / n]])
    elif res.converged:
        J_e, K_e = _gamma_sandwich_parts(spec, gstd, phi)
        J, K = R * J_e, R * R * K_e
        try:
            cov_std = _gamma_covariance(gstd, phi, J_e, K_e)
        except Exception:
            cov_std = None
    A = tr.jacobian()
    tic = None
    if J is not None:
        tic = 2.0 * value + 2.0 * float(np.trace(np.linalg.solve(J, K)))
    return FitResult(
        method=spec.label,
        params=tr.to_original(theta),
        names=_names(grid),
        objective=float(value),
        score_norm=float(np.max(np.abs(Efull), initial=0.0)),
        iterations=res.iterations,
        converged=res.converged,
        tol=opts.tol,
        params_std=theta,
        covariance=None if cov_std is None or not opts.covariance else A @ cov_std @ A.T,
        tic=tic,
        ridge=bool(ridge) or res.ridge_used,
        message=res.message,
        jacobian=J,
        score_var=K,
        extra={"divergence": spec, "intercept": "pinned so that the expected count equals n"},
    )


def _standard_grid(grid: CovariateGrid, tr: FeatureTransform) -> CovariateGrid:
    return CovariateGrid(w=grid.w, X=tr.apply(grid.X), counts=grid.counts, area=grid.area)


def fit_mle(grid: CovariateGrid, model_family: str = "loglinear", opts: Optional[FitOptions] = None) -> FitResult:
    """Poisson point-process maximum likelihood (weighted Poisson regression)."""
    _check_family(model_family)
    return fit_divergence(grid, DivergenceSpec.KL(), opts)


def fit_beta_power(grid, model_family="loglinear", beta: float = 0.5, opts=None) -> FitResult:
    _check_family(model_family)
    return fit_divergence(grid, DivergenceSpec.BetaPower(beta), opts)


def fit_gamma_power(grid, model_family="loglinear", gamma: float = 0.5, opts=None) -> FitResult:
    """Minimum gamma-power fit; the intercept is pinned so that ``Lambda = n``."""
    _check_family(model_family)
    if gamma == 0.0:
        return fit_mle(grid, model_family, opts)
    return fit_divergence(grid, DivergenceSpec.GammaPower(gamma), opts)


def fit_u_cdf(grid, model_family="loglinear", cdf="exp", ucdf_tau: float = 1.0, opts=None) -> FitResult:
    _check_family(model_family)
    return fit_divergence(grid, DivergenceSpec.UCdf(cdf, ucdf_tau), opts)


def _check_family(model_family: str) -> None:
    if model_family != "loglinear":
        raise ValueError(f"divergence fits support the log-linear family only, got {model_family!r}")


def _gamma_sandwich_parts(spec, grid, phi):
    """Slope-block ``J`` (negated score derivative) and ``K`` for gamma-power."""
    D1 = grid.design(False)[:, 1:]
    c = grid.counts.astype(float)
    lg = np.exp(spec.gamma * (D1 @ phi))
    S = float(c @ lg)
    a = D1.T @ (c * lg) / S
    # linearisation of the presence-normalised average around its limit
    infl = (D1 - a) * (lg / S)[:, None]
    K = (infl * c[:, None]).T @ infl
    J = -numerical_jacobian(lambda f: estimating_function(
        spec, LogLinearParams.from_vector(np.concatenate([[0.0], f])), grid)[1:], phi)
    return 0.5 * (J + J.T), K


def _gamma_covariance(grid, phi, J, K):
    """Slopes by sandwich; pinned intercept by the delta method with Var(log n) = 1/n."""
    D1 = grid.design(False)[:, 1:]
    lam1 = np.exp(D1 @ phi)
    C1 = sandwich(J, K)
    g = -D1.T @ (grid.w * lam1) / float(grid.w @ lam1)
    k1 = len(phi)
    cov = np.zeros((k1 + 1, k1 + 1))
    cov[1:, 1:] = C1
    cov[0, 1:] = cov[1:, 0] = g @ C1
    cov[0, 0] = 1.0 / grid.n + g @ C1 @ g
    return cov


def sandwich_covariance(fit: FitResult, grid: CovariateGrid) -> np.ndarray:
    """Recompute ``J^-1 K J^-T`` for ``fit`` on ``grid`` (original coordinates)."""
    spec = (fit.extra or {}).get("divergence", DivergenceSpec.KL())
    theta = np.asarray(fit.params, dtype=float)
    if spec.kind == "gamma":
        J, K = _gamma_sandwich_parts(spec, grid, theta[1:])
        return _gamma_covariance(grid, theta[1:], J, K)
    D = grid.design(False)
    c, w = grid.counts.astype(float), grid.w
    Efun = _weighted_score(spec, D, c, w)
    J = -numerical_jacobian(Efun, theta)
    eta, lam = _lam(D, theta)
    om, _ = _weights(spec, eta, lam)
    K = (D * (c * om * om)[:, None]).T @ D
    return sandwich(0.5 * (J + J.T), K)
