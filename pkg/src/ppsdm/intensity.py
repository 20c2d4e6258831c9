"""Intensity and probability model families.

* log-linear intensity ``exp(theta0 + theta1 . x)``
* quasi-linear intensity: Kolmogorov-Nagumo power mean of a habitat
  intensity and a sampling-bias intensity
* deformed exponential (beta-Gibbs) cell probabilities

Vectorised helpers work on linear predictors; the ``eval_*`` functions are the
per-cell entry points.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Union

import numpy as np
from scipy.special import expit

from .errors import ModelDomainError
from .grid import Cell, CovariateGrid

EXP_MAX = 700.0
LN2 = float(np.log(2.0))


def safe_exp(eta: np.ndarray, where: str = "cell") -> np.ndarray:
    eta = np.asarray(eta, dtype=float)
    if np.any(eta > EXP_MAX):
        i = int(np.argmax(eta))
        raise ModelDomainError(f"intensity overflow at {where} {i}: linear predictor {eta.flat[i]:.4g}")
    return np.exp(eta)


@dataclass(frozen=True)
class LogLinearParams:
    theta0: float
    theta1: np.ndarray

    @property
    def vector(self) -> np.ndarray:
        return np.concatenate([[self.theta0], np.atleast_1d(self.theta1)])

    @classmethod
    def from_vector(cls, theta) -> "LogLinearParams":
        theta = np.asarray(theta, dtype=float)
        return cls(float(theta[0]), theta[1:].copy())


@dataclass(frozen=True)
class QuasiLinearParams:
    """``theta`` and ``alpha_bias`` both lead with their intercept."""

    ql_tau: float
    theta: np.ndarray
    alpha_bias: np.ndarray

    def __post_init__(self):
        if not np.isfinite(self.ql_tau):
            raise ValueError("ql_tau must be finite")


@dataclass(frozen=True)
class DeformedParams:
    beta_ent: float
    alpha1: np.ndarray


Model = Union[LogLinearParams, QuasiLinearParams, DeformedParams]


# ---------------------------------------------------------------------------
# log-linear
# ---------------------------------------------------------------------------


def eval_loglinear(params: LogLinearParams, cell: Cell) -> float:
    theta1 = np.atleast_1d(params.theta1)
    if theta1.shape[0] != cell.x.shape[0]:
        raise ValueError(f"theta1 has {theta1.shape[0]} entries, cell has {cell.x.shape[0]} features")
    return float(safe_exp(params.theta0 + theta1 @ cell.x, where=f"cell id {cell.id}"))


# ---------------------------------------------------------------------------
# quasi-linear (Kolmogorov-Nagumo power mean)
# ---------------------------------------------------------------------------


def kn_log_mean(eta1, eta2, tau: float):
    """Log of the equal-weight power mean of ``exp(eta1)`` and ``exp(eta2)``.

    Returns ``(log_mean, omega)`` where ``omega`` is the share of the first
    argument in the derivative, ``d log_mean / d eta1``.
    """
    eta1 = np.asarray(eta1, dtype=float)
    eta2 = np.asarray(eta2, dtype=float)
    if tau == 0.0:
        return 0.5 * (eta1 + eta2), np.full(np.broadcast(eta1, eta2).shape, 0.5)
    a, b = tau * eta1, tau * eta2
    top = np.maximum(a, b)
    log_mean = (top + np.log(0.5 * np.exp(a - top) + 0.5 * np.exp(b - top))) / tau
    omega = expit(a - b)
    return log_mean, omega


def kn_mean(lam, b, tau: float):
    """Power mean of two positive intensities with exact forms at tau in {-1, 0, 1}."""
    lam = np.asarray(lam, dtype=float)
    b = np.asarray(b, dtype=float)
    if tau == 0.0:
        out = np.sqrt(lam) * np.sqrt(b)
    elif tau == 1.0:
        out = 0.5 * lam + 0.5 * b
    elif tau == -1.0:
        out = 2.0 / (1.0 / lam + 1.0 / b)
    else:
        out, _ = kn_log_mean(np.log(lam), np.log(b), tau)
        out = np.exp(out)
    if not np.all(np.isfinite(out)):
        raise ModelDomainError("non-finite quasi-linear intensity")
    return out


def eval_quasilinear(params: QuasiLinearParams, cell: Cell) -> float:
    theta = np.asarray(params.theta, dtype=float)
    alpha = np.asarray(params.alpha_bias, dtype=float)
    lam = safe_exp(theta[0] + theta[1:] @ cell.x, where=f"cell id {cell.id}")
    b = safe_exp(alpha[0] + alpha[1:] @ cell.z, where=f"cell id {cell.id}")
    return float(kn_mean(lam, b, params.ql_tau))


# ---------------------------------------------------------------------------
# deformed exponential cell probabilities
# ---------------------------------------------------------------------------


def deformed_log_weights(alpha1, X, beta: float) -> np.ndarray:
    """``log{1 + beta u}/beta`` with ``u = alpha1 . x``; ``u`` itself at beta = 0."""
    u = np.asarray(X, dtype=float) @ np.asarray(alpha1, dtype=float)
    if beta == 0.0:
        return u
    t = 1.0 + beta * u
    bad = np.flatnonzero(t <= 0)
    if bad.size:
        shown = ", ".join(str(int(i)) for i in bad[:10])
        raise ModelDomainError(
            f"deformed model positivity 1 + beta*alpha.x > 0 fails at {bad.size} cells: {shown}"
        )
    return np.log(t) / beta


def deformed_probs(alpha1, X, beta: float) -> np.ndarray:
    logq = deformed_log_weights(alpha1, X, beta)
    q = np.exp(logq - logq.max())
    return q / q.sum()


def eval_deformed(params: DeformedParams, grid: CovariateGrid, cell_index: int) -> float:
    return float(deformed_probs(params.alpha1, grid.X, params.beta_ent)[cell_index])


# ---------------------------------------------------------------------------
# grid-level quantities
# ---------------------------------------------------------------------------


def intensities(model: Model, grid: CovariateGrid) -> np.ndarray:
    """Per-cell intensity (per unit area) on the original feature scale."""
    if isinstance(model, LogLinearParams):
        theta1 = np.atleast_1d(model.theta1)
        return safe_exp(model.theta0 + grid.X @ theta1)
    if isinstance(model, QuasiLinearParams):
        theta = np.asarray(model.theta, dtype=float)
        alpha = np.asarray(model.alpha_bias, dtype=float)
        lam = safe_exp(theta[0] + grid.X @ theta[1:])
        b = safe_exp(alpha[0] + grid.Z @ alpha[1:])
        return kn_mean(lam, b, model.ql_tau)
    if isinstance(model, DeformedParams):
        # a probability model: spread the unit mass over the area
        return deformed_probs(model.alpha1, grid.X, model.beta_ent) / grid.w
    raise TypeError(f"unsupported model {type(model).__name__}")


def cumulative_intensity(model: Model, grid: CovariateGrid) -> float:
    """Quadrature approximation ``sum_i w_i lambda(s_i)``."""
    return float(grid.w @ intensities(model, grid))


def model_gradients(model: Model, cell: Cell) -> np.ndarray:
    """Gradient of ``log lambda`` at one cell with respect to the parameters.

    Quasi-linear parameters are ordered ``(theta, alpha_bias)``.
    """
    if isinstance(model, LogLinearParams):
        return np.concatenate([[1.0], cell.x])
    if isinstance(model, QuasiLinearParams):
        theta = np.asarray(model.theta, dtype=float)
        alpha = np.asarray(model.alpha_bias, dtype=float)
        eta1 = theta[0] + theta[1:] @ cell.x
        eta2 = alpha[0] + alpha[1:] @ cell.z
        _, omega = kn_log_mean(eta1, eta2, model.ql_tau)
        omega = float(omega)
        return np.concatenate([omega * np.concatenate([[1.0], cell.x]),
                               (1.0 - omega) * np.concatenate([[1.0], cell.z])])
    raise TypeError(f"gradients not defined for {type(model).__name__}")
