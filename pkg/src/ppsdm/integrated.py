"""Integrated presence-background (PB) and site-occupancy (SO) models.

The PB records come from a thinned Poisson process with intensity
``p(s, alpha) lambda0(s, beta)``, ``p`` logistic in the accessibility
covariates ``v``. The SO survey records detections on ``T`` visits to ``K``
disjoint regions; a region is occupied with probability
``1 - exp(-Lambda0(C_i))``. ``beta`` is shared. A distance-sampling (DS)
likelihood with half-normal detection is included as well.

Parameter vectors are laid out as ``(beta, alpha, tau)``; ``beta`` leads with
its intercept and acts on the raw ``x`` features.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import sparse
from scipy.special import expit, log_expit

from .divergence import CdfSpec, FitOptions
from .errors import DataError, ModelDomainError
from .grid import CovariateGrid, PresenceSet
from .optimize import newton_minimize, newton_root, numerical_hessian, numerical_jacobian, sandwich

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PbModel:
    beta_shared: np.ndarray
    alpha_detect: np.ndarray
    detect_intercept: bool = False

    def __post_init__(self):
        b = np.asarray(self.beta_shared, dtype=float)
        a = np.asarray(self.alpha_detect, dtype=float)
        if not (np.all(np.isfinite(b)) and np.all(np.isfinite(a))):
            raise ValueError("PB parameters must be finite")
        object.__setattr__(self, "beta_shared", b)
        object.__setattr__(self, "alpha_detect", a)


@dataclass
class SurveyDesign:
    """``regions[i]`` are the grid indices of ``C_i``; ``zdet`` is ``K x T x q``."""

    regions: Sequence[np.ndarray]
    T: int
    zdet: np.ndarray
    region_ids: Optional[np.ndarray] = None

    def __post_init__(self):
        self.regions = [np.asarray(r, dtype=np.int64).reshape(-1) for r in self.regions]
        K = len(self.regions)
        if self.T < 1:
            raise ValueError("a survey needs at least one visit")
        self.zdet = np.asarray(self.zdet, dtype=float)
        if self.zdet.ndim == 2:
            self.zdet = self.zdet[:, :, None]
        if self.zdet.shape[:2] != (K, self.T):
            raise ValueError(f"detection covariates have shape {self.zdet.shape[:2]}, expected {(K, self.T)}")
        seen = set()
        for i, r in enumerate(self.regions):
            if r.size == 0:
                raise DataError(f"region {i} is empty")
            dup = seen.intersection(r.tolist())
            if dup:
                raise DataError(f"region {i} overlaps an earlier region at cell index {min(dup)}")
            seen.update(r.tolist())
        if self.region_ids is None:
            self.region_ids = np.arange(K)

    @property
    def K(self) -> int:
        return len(self.regions)

    @property
    def q(self) -> int:
        return self.zdet.shape[2]

    def membership(self, m: int) -> sparse.csr_matrix:
        """``K x m`` 0/1 matrix; row ``i`` selects the cells of ``C_i``."""
        if self.K == 0:
            return sparse.csr_matrix((0, m))
        rows = np.concatenate([np.full(r.size, i) for i, r in enumerate(self.regions)])
        cols = np.concatenate(self.regions)
        if cols.size and (cols.min() < 0 or cols.max() >= m):
            raise DataError("a survey region refers to a cell outside the grid")
        return sparse.csr_matrix((np.ones(cols.size), (rows, cols)), shape=(self.K, m))

    @classmethod
    def empty(cls, T: int = 1, q: int = 1) -> "SurveyDesign":
        return cls([], T, np.zeros((0, T, q)))


@dataclass
class SurveyData:
    y: np.ndarray

    def __post_init__(self):
        self.y = np.asarray(self.y).astype(np.int8)
        if self.y.ndim != 2:
            raise ValueError("survey detections must be a K x T matrix")
        if np.any((self.y != 0) & (self.y != 1)):
            raise DataError("survey detections must be 0 or 1")

    @property
    def s_flags(self) -> np.ndarray:
        return (self.y.sum(axis=1) == 0).astype(np.int8)


@dataclass
class DsData:
    """Detected points: grid cell index, perpendicular distance, scale covariates."""

    cell: np.ndarray
    distance: np.ndarray
    U: np.ndarray

    def __post_init__(self):
        self.cell = np.asarray(self.cell, dtype=np.int64).reshape(-1)
        self.distance = np.asarray(self.distance, dtype=float).reshape(-1)
        self.U = np.asarray(self.U, dtype=float).reshape(self.cell.size, -1)
        if np.any(self.distance < 0) or not np.all(np.isfinite(self.distance)):
            raise DataError("distances must be finite and non-negative")

    @property
    def n(self) -> int:
        return int(self.cell.size)


@dataclass
class IntegratedFit:
    beta_shared: np.ndarray
    alpha_detect: np.ndarray
    tau_detect: np.ndarray
    converged: bool
    loglik: Optional[float]
    cov_integrated: Optional[np.ndarray]
    beta_pb: Optional[np.ndarray] = None
    beta_so: Optional[np.ndarray] = None
    cov_pb: Optional[np.ndarray] = None
    cov_so: Optional[np.ndarray] = None
    fisher_pb: Optional[np.ndarray] = None
    fisher_so: Optional[np.ndarray] = None
    fisher_integrated: Optional[np.ndarray] = None
    iterations: int = 0
    score_norm: float = float("nan")
    method: str = "integrated"
    message: str = ""
    names: tuple = ()
    extra: dict = field(default_factory=dict)

    @property
    def theta(self) -> np.ndarray:
        return np.concatenate([self.beta_shared, self.alpha_detect, self.tau_detect])


# ---------------------------------------------------------------------------
# building blocks
# ---------------------------------------------------------------------------


def _design(grid: CovariateGrid) -> np.ndarray:
    return np.column_stack([np.ones(grid.m), grid.X])


def _vdesign(grid: CovariateGrid, detect_intercept: bool) -> np.ndarray:
    if detect_intercept:
        return np.column_stack([np.ones(grid.m), grid.V])
    return grid.V


def _counts(grid: CovariateGrid, presence) -> np.ndarray:
    if presence is None:
        return grid.counts.astype(float)
    if isinstance(presence, PresenceSet):
        pos = {int(i): k for k, i in enumerate(grid.ids)}
        out = np.zeros(grid.m)
        for i, c in zip(presence.indices, presence.counts):
            if int(i) not in pos:
                raise DataError(f"presence record at unknown cell id {int(i)}")
            out[pos[int(i)]] += c
        return out
    out = np.asarray(presence, dtype=float).reshape(-1)
    if out.shape[0] != grid.m:
        raise DataError("presence counts must have one entry per cell")
    return out


def _lam0(beta, D):
    eta = D @ beta
    if np.any(eta > 700.0):
        raise ModelDomainError("habitat intensity overflow")
    return np.exp(eta)


def occupancy_probs(beta, grid: CovariateGrid, design: SurveyDesign) -> np.ndarray:
    """``Psi_i = 1 - exp(-sum_{C_i} w lambda0)`` for every region."""
    lam0 = _lam0(np.asarray(beta, dtype=float), _design(grid))
    Lam = design.membership(grid.m) @ (grid.w * lam0)
    return -np.expm1(-Lam)


def occupancy_prob(beta_shared, grid: CovariateGrid, region) -> float:
    region = np.asarray(region, dtype=np.int64).reshape(-1)
    if region.size == 0:
        raise DataError("occupancy probability of an empty region")
    if region.min() < 0 or region.max() >= grid.m:
        raise DataError("region refers to a cell outside the grid")
    lam0 = _lam0(np.asarray(beta_shared, dtype=float), _design(grid)[region])
    return float(-np.expm1(-(grid.w[region] @ lam0)))


def detection_probs(tau, design: SurveyDesign) -> np.ndarray:
    return expit(design.zdet @ np.asarray(tau, dtype=float))


def halfnormal_detection(omega, distance, U) -> np.ndarray:
    """``exp(-d^2 / (2 sigma^2))`` with ``log sigma = omega0 + omega1 . u``."""
    omega = np.asarray(omega, dtype=float)
    d = np.asarray(distance, dtype=float)
    U = np.asarray(U, dtype=float).reshape(d.shape[0], -1)
    log_sigma = omega[0] + U @ omega[1:]
    return np.exp(-0.5 * d * d * np.exp(-2.0 * log_sigma))


# ---------------------------------------------------------------------------
# PB likelihood
# ---------------------------------------------------------------------------


def _pb_parts(beta, alpha, D, Vd, c, w, hessian=True):
    lam0 = _lam0(beta, D)
    a = Vd @ alpha
    p = expit(a)
    mu = w * p * lam0
    value = float(c @ (log_expit(a) + D @ beta) - mu.sum())
    q = 1.0 - p
    gb = D.T @ (c - mu)
    ga = Vd.T @ (c * q - mu * q)
    grad = np.concatenate([gb, ga])
    if not hessian:
        return value, grad, None
    Hbb = -(D * mu[:, None]).T @ D
    Hba = -(D * (mu * q)[:, None]).T @ Vd
    Haa = -(Vd * (c * p * q + mu * q * (1.0 - 2.0 * p))[:, None]).T @ Vd
    H = np.block([[Hbb, Hba], [Hba.T, Haa]])
    return value, grad, H


def loglik_pb(pb: PbModel, grid: CovariateGrid, presence=None, gradient: bool = False):
    """``sum_pres log(p lambda0) - sum_i w_i p_i lambda0_i``; gradient in ``(beta, alpha)``."""
    Vd = _vdesign(grid, pb.detect_intercept)
    if Vd.shape[1] != pb.alpha_detect.shape[0]:
        raise ValueError(f"alpha has {pb.alpha_detect.shape[0]} entries, expected {Vd.shape[1]}")
    value, grad, _ = _pb_parts(pb.beta_shared, pb.alpha_detect, _design(grid), Vd,
                               _counts(grid, presence), grid.w, hessian=False)
    return (value, grad) if gradient else value


# ---------------------------------------------------------------------------
# SO likelihood
# ---------------------------------------------------------------------------


def _so_parts(beta, tau, D, w, M, zdet, y):
    """Log-likelihood and gradient in ``(beta, tau)``; ``-inf`` when a detected region has Psi = 0."""
    k = D.shape[1] + zdet.shape[2]
    if M.shape[0] == 0:
        return 0.0, np.zeros(k)
    lam0 = _lam0(beta, D)
    Lam = M @ (w * lam0)
    G = M @ (D * (w * lam0)[:, None])  # dLambda_i / dbeta
    eta = zdet @ tau
    logq1, logq0 = log_expit(eta), log_expit(-eta)
    qdet = expit(eta)
    S = y.sum(axis=1) == 0
    with np.errstate(divide="ignore"):
        logpsi = np.log(-np.expm1(-Lam))
    if np.any(~S & ~np.isfinite(logpsi)):
        return -np.inf, np.full(k, np.nan)
    with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
        inv = np.where(Lam > 0, np.exp(-Lam) / -np.expm1(-Lam), 0.0)  # d log Psi / d Lambda
    det_ll = logpsi + np.sum(np.where(y == 1, logq1, logq0), axis=1)
    q0s = logq0.sum(axis=1)
    A = logpsi + q0s
    mix_ll = np.logaddexp(A, -Lam)
    value = float(np.sum(np.where(S, mix_ll, det_ll)))
    rho = np.where(np.isfinite(A), expit(A + Lam), 0.0)  # posterior occupancy of an all-zero row
    # rho * inv in log space, finite even as Lambda -> 0
    dLam = np.where(S, np.exp(q0s - Lam - mix_ll) - (1.0 - rho), inv)
    gb = G.T @ dLam
    resid = np.where(S[:, None], -rho[:, None] * qdet, y - qdet)
    gt = np.einsum("kt,ktq->q", resid, zdet)
    return value, np.concatenate([gb, gt])


def loglik_so(beta_shared, tau_detect, design: SurveyDesign, data: SurveyData, grid: CovariateGrid,
              gradient: bool = False):
    """Occupancy log-likelihood with the all-zero-row mixture in log space."""
    y = data.y
    if y.shape != (design.K, design.T):
        raise ValueError(f"detections have shape {y.shape}, design expects {(design.K, design.T)}")
    tau = np.asarray(tau_detect, dtype=float)
    if tau.shape[0] != design.q:
        raise ValueError(f"tau has {tau.shape[0]} entries, detection covariates have {design.q}")
    value, grad = _so_parts(np.asarray(beta_shared, dtype=float), tau, _design(grid), grid.w,
                            design.membership(grid.m), design.zdet, y)
    if not np.isfinite(value):
        raise ModelDomainError("a region with detections has occupancy probability 0")
    return (value, grad) if gradient else value


# ---------------------------------------------------------------------------
# DS likelihood
# ---------------------------------------------------------------------------


def _ds_parts(beta, omega, D, w, dist_b, Ub, ds: DsData):
    lam0 = _lam0(beta, D)
    s_b = np.exp(-2.0 * (omega[0] + Ub @ omega[1:]))
    pi_b = np.exp(-0.5 * dist_b ** 2 * s_b)
    mu = w * pi_b * lam0
    s_p = np.exp(-2.0 * (omega[0] + ds.U @ omega[1:]))
    r_p = ds.distance ** 2 * s_p
    Dp = D[ds.cell]
    value = float(np.sum(-0.5 * r_p + Dp @ beta) - mu.sum())
    Ue_b = np.column_stack([np.ones(Ub.shape[0]), Ub])
    Ue_p = np.column_stack([np.ones(ds.n), ds.U])
    gb = Dp.sum(axis=0) - D.T @ mu
    go = Ue_p.T @ r_p - Ue_b.T @ (mu * dist_b ** 2 * s_b)
    return value, np.concatenate([gb, go])


def _check_ds(grid_b: CovariateGrid, ds: DsData):
    if grid_b.distance is None:
        raise DataError("the distance-sampling grid needs a distance column")
    if np.any(grid_b.distance < 0):
        raise DataError("distances must be non-negative")
    if ds.n and (ds.cell.min() < 0 or ds.cell.max() >= grid_b.m):
        raise DataError("a detection refers to a cell outside the grid")
    if ds.U.shape[1] != grid_b.U.shape[1]:
        raise DataError("detections and grid carry different scale covariates")


def loglik_ds(beta_shared, omega, ds: DsData, grid_b: CovariateGrid, gradient: bool = False):
    """``sum_pts log(pi lambda0) - sum_cells w pi lambda0`` on the survey area ``B``."""
    _check_ds(grid_b, ds)
    value, grad = _ds_parts(np.asarray(beta_shared, dtype=float), np.asarray(omega, dtype=float),
                            _design(grid_b), grid_b.w, grid_b.distance, grid_b.U, ds)
    return (value, grad) if gradient else value


def fit_ds(grid_b: CovariateGrid, ds: DsData, opts: Optional[FitOptions] = None):
    """ML fit of ``(beta, omega)`` from distance-sampling detections alone."""
    opts = opts or FitOptions()
    _check_ds(grid_b, ds)
    if ds.n < 1:
        raise DataError("at least one detection is required")
    D = _design(grid_b)
    kb = D.shape[1]

    def grad(x):
        return _ds_parts(x[:kb], x[kb:], D, grid_b.w, grid_b.distance, grid_b.U, ds)[1]

    def fun(x):
        try:
            v, g = _ds_parts(x[:kb], x[kb:], D, grid_b.w, grid_b.distance, grid_b.U, ds)
        except ModelDomainError:
            k = x.size
            return np.inf, np.full(k, np.nan), np.full((k, k), np.nan)
        return -v, -g, -numerical_hessian(grad, x)

    x0 = np.zeros(kb + 1 + grid_b.U.shape[1])
    x0[0] = np.log(ds.n / grid_b.w.sum())
    pos = ds.distance[ds.distance > 0]
    x0[kb] = np.log(np.sqrt(np.mean(pos ** 2))) if pos.size else 0.0
    res = newton_minimize(fun, x0, opts.tol, opts.max_iter)
    H = -fun(res.x)[2]
    try:
        cov = np.linalg.inv(-H)
    except np.linalg.LinAlgError:
        cov = None
    return {"beta": res.x[:kb], "omega": res.x[kb:], "loglik": -res.value, "converged": res.converged,
            "iterations": res.iterations, "score_norm": float(np.max(np.abs(res.grad))), "covariance": cov,
            "message": res.message}


# ---------------------------------------------------------------------------
# fitting
# ---------------------------------------------------------------------------


@dataclass
class _Problem:
    D: np.ndarray
    Vd: np.ndarray
    c: np.ndarray
    w: np.ndarray
    M: sparse.csr_matrix
    zdet: np.ndarray
    y: np.ndarray

    @property
    def kb(self):
        return self.D.shape[1]

    @property
    def ka(self):
        return self.Vd.shape[1]

    @property
    def kt(self):
        return self.zdet.shape[2]

    def split(self, x):
        kb, ka = self.kb, self.ka
        return x[:kb], x[kb:kb + ka], x[kb + ka:]

    # gradients of the pieces, embedded in the full (beta, alpha, tau) layout
    def pb(self, x, hessian=True):
        b, a, _ = self.split(x)
        v, g, H = _pb_parts(b, a, self.D, self.Vd, self.c, self.w, hessian)
        k = x.size
        G = np.zeros(k)
        G[:g.size] = g
        if H is None:
            return v, G, None
        HH = np.zeros((k, k))
        HH[:g.size, :g.size] = H
        return v, G, HH

    def so(self, x):
        b, _, t = self.split(x)
        v, g = _so_parts(b, t, self.D, self.w, self.M, self.zdet, self.y)
        G = np.zeros(x.size)
        G[:self.kb] = g[:self.kb]
        G[self.kb + self.ka:] = g[self.kb:]
        return v, G

    def so_hessian(self, x):
        return numerical_hessian(lambda z: self.so(z)[1], x)


def _problem(grid, presence, design, data, detect_intercept):
    design = design if design is not None else SurveyDesign.empty()
    y = data.y if data is not None else np.zeros((0, design.T), dtype=np.int8)
    if y.shape != (design.K, design.T):
        raise DataError(f"detections have shape {y.shape}, design expects {(design.K, design.T)}")
    Vd = _vdesign(grid, detect_intercept)
    if detect_intercept:
        log.warning("detection intercept is confounded with the habitat intercept in PB-only fits")
    elif Vd.shape[1] and np.linalg.matrix_rank(np.column_stack([np.ones(grid.m), Vd])) <= Vd.shape[1]:
        log.warning("accessibility covariates span a constant; PB intercepts are not separately identified")
    return _Problem(_design(grid), Vd, _counts(grid, presence), grid.w, design.membership(grid.m),
                    design.zdet, y)


def _objective(prob: _Problem, use_pb: bool, use_so: bool, free: np.ndarray):
    """Negated log-likelihood over the ``free`` coordinates of the full layout."""
    k_all = prob.kb + prob.ka + prob.kt

    def fun(xf):
        x = np.zeros(k_all)
        x[free] = xf
        k = xf.size
        try:
            v, g, H = 0.0, np.zeros(k_all), np.zeros((k_all, k_all))
            if use_pb:
                v1, g1, H1 = prob.pb(x)
                v, g, H = v + v1, g + g1, H + H1
            if use_so:
                v2, g2 = prob.so(x)
                if not np.isfinite(v2):
                    raise ModelDomainError("occupancy probability 0 in a detected region")
                with np.errstate(invalid="ignore", over="ignore"):
                    v, g, H = v + v2, g + g2, H + prob.so_hessian(x)
        except ModelDomainError:
            return np.inf, np.full(k, np.nan), np.full((k, k), np.nan)
        gf, Hf = g[free], H[np.ix_(free, free)]
        if not (np.all(np.isfinite(gf)) and np.all(np.isfinite(Hf))):
            # overflowed trial point; let the line search back off
            return np.inf, np.full(k, np.nan), np.full((k, k), np.nan)
        return -v, -gf, -Hf

    return fun


def _start(prob: _Problem, grid: CovariateGrid):
    x = np.zeros(prob.kb + prob.ka + prob.kt)
    n = max(prob.c.sum(), 1.0)
    x[0] = np.log(n / prob.w.sum())
    if prob.M.shape[0] and prob.c.sum() == 0:
        # SO only: match the share of regions with a detection
        frac = np.clip(np.mean(prob.y.max(axis=1)), 0.05, 0.95)
        area = float(np.mean(prob.M @ prob.w))
        x[0] = np.log(-np.log1p(-frac) / area)
    return x


def _fit_block(prob, grid, use_pb, use_so, opts):
    kb, ka, kt = prob.kb, prob.ka, prob.kt
    free = np.zeros(kb + ka + kt, dtype=bool)
    free[:kb] = True
    if use_pb:
        free[kb:kb + ka] = True
    if use_so:
        free[kb + ka:] = True
    free = np.flatnonzero(free)
    fun = _objective(prob, use_pb, use_so, free)
    x0 = _start(prob, grid)
    res = newton_minimize(fun, x0[free], opts.tol, opts.max_iter)
    x = np.zeros(kb + ka + kt)
    x[free] = res.x
    cov = None
    H = fun(res.x)[2]
    if res.converged and np.all(np.isfinite(H)):
        try:
            C = np.zeros((x.size, x.size))
            C[np.ix_(free, free)] = np.linalg.inv(H)
            cov = C
        except np.linalg.LinAlgError:
            cov = None
    return x, res, cov


def observed_fisher(theta, prob: _Problem):
    """Negative-Hessian beta-blocks ``(I_PB, I_SO, I_I)`` at ``theta`` for one dataset."""
    kb = prob.kb
    _, _, Hpb = prob.pb(theta)
    Hso = prob.so_hessian(theta) if prob.M.shape[0] else np.zeros((theta.size, theta.size))
    Ipb = -Hpb[:kb, :kb]
    Iso = -Hso[:kb, :kb]
    full = _objective(prob, True, prob.M.shape[0] > 0, np.arange(theta.size))(theta)[2]
    return Ipb, Iso, full[:kb, :kb]


def expected_fisher(theta, grid: CovariateGrid, design: SurveyDesign, detect_intercept: bool = False,
                    replicates: int = 100, seed: int = 0):
    """Monte-Carlo average of the observed beta-blocks over datasets simulated at ``theta``."""
    from .simulate import rng_stream

    prob = _problem(grid, None, design, None if design.K == 0 else SurveyData(np.zeros((design.K, design.T))),
                    detect_intercept)
    b, a, t = prob.split(np.asarray(theta, dtype=float))
    mu = grid.w * expit(prob.Vd @ a) * _lam0(b, prob.D)
    psi = occupancy_probs(b, grid, design) if design.K else np.zeros(0)
    qdet = detection_probs(t, design) if design.K else np.zeros((0, design.T))
    acc = [np.zeros((prob.kb, prob.kb)) for _ in range(3)]
    for r in range(replicates):
        rng = rng_stream(seed, r, "fisher")
        prob.c = rng.poisson(mu).astype(float)
        if design.K:
            occ = rng.random(design.K) < psi
            prob.y = ((rng.random(qdet.shape) < qdet) & occ[:, None]).astype(np.int8)
        for s, I in zip(acc, observed_fisher(np.asarray(theta, dtype=float), prob)):
            s += I / replicates
    return tuple(0.5 * (I + I.T) for I in acc)


def _names(grid, detect_intercept, q):
    bn = ("(intercept)",) + tuple(grid.x_names)
    an = (("detect:(intercept)",) if detect_intercept else ()) + tuple(f"detect:{v}" for v in grid.v_names)
    tn = tuple(f"tau{j + 1}" for j in range(q))
    return bn + an + tn


def fit_integrated(grid: CovariateGrid, presence=None, design: Optional[SurveyDesign] = None,
                   data: Optional[SurveyData] = None, opts: Optional[FitOptions] = None,
                   detect_intercept: bool = False, fisher_replicates: int = 100, seed: int = 0) -> IntegratedFit:
    """Joint ML for ``(beta, alpha, tau)`` plus the PB-only and SO-only fits.

    Fisher beta-blocks are Monte-Carlo expectations at the integrated
    estimate (``fisher_replicates = 0`` falls back to the observed blocks).
    """
    opts = opts or FitOptions()
    prob = _problem(grid, presence, design, data, detect_intercept)
    has_so = prob.M.shape[0] > 0
    if prob.c.sum() < 1 and not has_so:
        raise DataError("no presence records and no survey data")
    x, res, cov = _fit_block(prob, grid, prob.c.sum() > 0, has_so, opts)
    kb = prob.kb
    out = IntegratedFit(
        beta_shared=x[:kb], alpha_detect=x[kb:kb + prob.ka], tau_detect=x[kb + prob.ka:],
        converged=res.converged, loglik=-res.value, cov_integrated=cov, iterations=res.iterations,
        score_norm=float(np.max(np.abs(res.grad), initial=0.0)), message=res.message,
        names=_names(grid, detect_intercept, prob.kt),
    )
    if prob.c.sum() > 0:
        xp, rp, cp = _fit_block(prob, grid, True, False, opts)
        out.beta_pb, out.cov_pb = xp[:kb], cp
        out.extra["pb"] = {"theta": xp, "converged": rp.converged}
    if has_so:
        xs, rs, cs = _fit_block(prob, grid, False, True, opts)
        out.beta_so, out.cov_so = xs[:kb], cs
        out.extra["so"] = {"theta": xs, "converged": rs.converged}
    if not res.converged:
        return out
    if fisher_replicates > 0:
        I = expected_fisher(x, grid, design if design is not None else SurveyDesign.empty(),
                            detect_intercept, fisher_replicates, seed)
    else:
        I = observed_fisher(x, prob)
    out.fisher_pb, out.fisher_so, out.fisher_integrated = (0.5 * (A + A.T) for A in I)
    return out


def fit_integrated_robust(grid: CovariateGrid, presence=None, design: Optional[SurveyDesign] = None,
                          data: Optional[SurveyData] = None, cdf="exp", ucdf_tau: float = 1.0,
                          opts: Optional[FitOptions] = None, detect_intercept: bool = False) -> IntegratedFit:
    """Solve ``sum_i F(tau_u lambda_i) E_PB,i + E_SO = 0`` with ``lambda = p lambda0``.

    The weight touches only the PB score; with the step cdf this is the
    integrated likelihood equation.
    """
    opts = opts or FitOptions()
    cdf = cdf if isinstance(cdf, CdfSpec) else CdfSpec(cdf)
    if not ucdf_tau > 0:
        raise ValueError("ucdf_tau must be positive")
    prob = _problem(grid, presence, design, data, detect_intercept)
    has_so = prob.M.shape[0] > 0
    kb, ka, kt = prob.kb, prob.ka, prob.kt

    def pb_terms(x):
        b, a, _ = prob.split(x)
        lam0 = _lam0(b, prob.D)
        p = expit(prob.Vd @ a)
        lam = p * lam0
        F = cdf.F(ucdf_tau * lam)
        r = prob.c - prob.w * lam
        return F, r, p

    def E(x):
        F, r, p = pb_terms(x)
        g = np.concatenate([prob.D.T @ (F * r), prob.Vd.T @ (F * r * (1.0 - p)), np.zeros(kt)])
        if has_so:
            g = g + prob.so(x)[1]
        return g

    def fun(x):
        try:
            e = E(x)
        except ModelDomainError:
            return np.full(x.size, np.inf), np.eye(x.size)
        return e, numerical_jacobian(E, x)

    x0, _, _ = _fit_block(prob, grid, prob.c.sum() > 0, has_so, opts)
    res = newton_root(fun, x0, opts.tol, opts.max_iter)
    x = res.x
    cov = None
    if res.converged:
        F, r, p = pb_terms(x)
        S_pb = np.column_stack([prob.D, prob.Vd * (1.0 - p)[:, None], np.zeros((grid.m, kt))]) * F[:, None]
        K = (S_pb * prob.c[:, None]).T @ S_pb
        if has_so:
            K = K + _so_row_scores_outer(prob, x)
        J = -numerical_jacobian(E, x)
        try:
            cov = sandwich(0.5 * (J + J.T), K)
        except Exception:
            cov = None
    return IntegratedFit(
        beta_shared=x[:kb], alpha_detect=x[kb:kb + ka], tau_detect=x[kb + ka:], converged=res.converged,
        loglik=None, cov_integrated=cov, iterations=res.iterations, score_norm=float(np.max(np.abs(res.grad))),
        method="integrated-robust", message=res.message, names=_names(grid, detect_intercept, kt),
        extra={"cdf": cdf.family, "ucdf_tau": ucdf_tau},
    )


def _so_row_scores_outer(prob: _Problem, x):
    """``sum_i e_i e_i^T`` over survey regions, each row's score taken on its own."""
    out = np.zeros((x.size, x.size))
    for i in range(prob.M.shape[0]):
        sub = _Problem(prob.D, prob.Vd, prob.c, prob.w, prob.M[i], prob.zdet[i:i + 1], prob.y[i:i + 1])
        e = sub.so(x)[1]
        out += np.outer(e, e)
    return out


# ---------------------------------------------------------------------------
# file loaders
# ---------------------------------------------------------------------------


def _rows(path):
    with open(path, newline="") as fh:
        lines = [ln for ln in fh if not ln.lstrip().startswith("#")]
    return list(csv.DictReader(lines))


def load_survey(path, grid: CovariateGrid):
    """Survey CSV ``region_id, visit, y, <detection covariates>`` -> ``(SurveyDesign, SurveyData)``.

    Regions are the grid cells whose ``region`` column equals ``region_id``.
    """
    if grid.region is None:
        raise DataError("the grid has no region column to place survey regions")
    rows = _rows(path)
    if not rows:
        raise DataError(f"{path}: no survey rows")
    missing = {"region_id", "visit", "y"} - set(rows[0])
    if missing:
        raise DataError(f"{path}: missing column(s) {', '.join(sorted(missing))}")
    covs = [k for k in rows[0] if k not in ("region_id", "visit", "y")]
    region_ids = sorted({int(r["region_id"]) for r in rows})
    visits = sorted({int(r["visit"]) for r in rows})
    ri = {v: i for i, v in enumerate(region_ids)}
    vi = {v: j for j, v in enumerate(visits)}
    K, T = len(region_ids), len(visits)
    y = np.full((K, T), -1, dtype=np.int64)
    z = np.zeros((K, T, max(len(covs), 1)))
    if not covs:
        z[:] = 1.0  # intercept-only detection
    for n, r in enumerate(rows, start=2):
        try:
            i, j = ri[int(r["region_id"])], vi[int(r["visit"])]
            y[i, j] = int(r["y"])
            for q, name in enumerate(covs):
                z[i, j, q] = float(r[name])
        except ValueError as exc:
            raise DataError(f"{path}: line {n}: {exc}") from None
    if np.any(y < 0):
        raise DataError(f"{path}: every region needs a row for every visit")
    regions = [np.flatnonzero(grid.region == rid) for rid in region_ids]
    for rid, cells in zip(region_ids, regions):
        if cells.size == 0:
            raise DataError(f"{path}: region {rid} has no cells in the grid")
    return SurveyDesign(regions, T, z, np.asarray(region_ids)), SurveyData(y)


def load_ds(path, grid_b: CovariateGrid) -> DsData:
    """DS CSV ``point_id, cell_id, distance, <scale covariates>``."""
    rows = _rows(path)
    if not rows:
        return DsData(np.zeros(0), np.zeros(0), np.zeros((0, grid_b.U.shape[1])))
    missing = {"cell_id", "distance"} - set(rows[0])
    if missing:
        raise DataError(f"{path}: missing column(s) {', '.join(sorted(missing))}")
    covs = [k for k in rows[0] if k not in ("point_id", "cell_id", "distance")]
    pos = {int(i): k for k, i in enumerate(grid_b.ids)}
    cell, dist, U = [], [], []
    for n, r in enumerate(rows, start=2):
        try:
            cid = int(r["cell_id"])
            if cid not in pos:
                raise ValueError(f"unknown cell id {cid}")
            cell.append(pos[cid])
            dist.append(float(r["distance"]))
            U.append([float(r[c]) for c in covs])
        except ValueError as exc:
            raise DataError(f"{path}: line {n}: {exc}") from None
    return DsData(np.array(cell), np.array(dist), np.array(U).reshape(len(cell), len(covs)))
