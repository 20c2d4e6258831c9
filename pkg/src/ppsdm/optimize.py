"""Damped Newton minimisation and root finding, plus finite-difference helpers.

Both solvers use Armijo backtracking (c = 1e-4, step halving). Hessians that
are not positive definite get a diagonal shift before solving.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Optional, Tuple

import numpy as np

log = logging.getLogger(__name__)

ARMIJO_C = 1e-4
JITTER = 1e-8
MAX_HALVINGS = 60
FLAT_RTOL = 1e-11


@dataclass
class SolverResult:
    x: np.ndarray
    value: float
    grad: np.ndarray
    iterations: int
    converged: bool
    ridge_used: bool
    message: str = ""


def _pd_solve(H: np.ndarray, g: np.ndarray) -> Tuple[np.ndarray, bool]:
    """Solve ``H d = g``; shift ``H`` towards positive definiteness when needed."""
    H = 0.5 * (H + H.T)
    try:
        L = np.linalg.cholesky(H)
        return np.linalg.solve(L.T, np.linalg.solve(L, g)), False
    except np.linalg.LinAlgError:
        pass
    eig = np.linalg.eigvalsh(H)
    scale = max(1.0, float(np.max(np.abs(eig))))
    shift = max(0.0, -float(eig[0])) + JITTER * scale
    k = H.shape[0]
    for _ in range(20):
        try:
            L = np.linalg.cholesky(H + shift * np.eye(k))
            return np.linalg.solve(L.T, np.linalg.solve(L, g)), True
        except np.linalg.LinAlgError:
            shift *= 10.0
    return g / scale, True


def newton_minimize(
    fun: Callable[[np.ndarray], Tuple[float, np.ndarray, np.ndarray]],
    x0: np.ndarray,
    tol: float = 1e-8,
    max_iter: int = 200,
) -> SolverResult:
    """Minimise ``fun`` which returns ``(value, gradient, hessian)``.

    ``fun`` may return ``inf`` outside the feasible set; the line search then
    keeps halving. Convergence is ``max|gradient| <= tol``.
    """
    x = np.array(x0, dtype=float)
    f, g, H = fun(x)
    if not np.isfinite(f):
        return SolverResult(x, f, g, 0, False, False, "infeasible starting point")
    ridge = False
    for it in range(max_iter + 1):
        if np.max(np.abs(g), initial=0.0) <= tol:
            return SolverResult(x, f, g, it, True, ridge)
        if it == max_iter:
            break
        d, shifted = _pd_solve(H, -g)
        ridge |= shifted
        slope = float(g @ d)
        t = 1.0
        accepted = False
        for _ in range(MAX_HALVINGS):
            x_new = x + t * d
            f_new, g_new, H_new = fun(x_new)
            if np.isfinite(f_new) and f_new <= f + ARMIJO_C * t * slope:
                accepted = True
                break
            # objective flat to rounding: judge the step by the gradient instead
            if (np.isfinite(f_new) and abs(f_new - f) <= FLAT_RTOL * (1.0 + abs(f))
                    and np.max(np.abs(g_new)) < np.max(np.abs(g))):
                accepted = True
                break
            t *= 0.5
        if not accepted:
            # last resort: a full step that still shrinks the gradient
            f_new, g_new, H_new = fun(x + d)
            if np.isfinite(f_new) and np.max(np.abs(g_new)) < np.max(np.abs(g)):
                x_new = x + d
            else:
                return SolverResult(x, f, g, it, False, ridge, "line search failed")
        x, f, g, H = x_new, f_new, g_new, H_new
    return SolverResult(x, f, g, max_iter, False, ridge, f"no convergence after {max_iter} iterations")


def newton_root(
    fun: Callable[[np.ndarray], Tuple[np.ndarray, np.ndarray]],
    x0: np.ndarray,
    tol: float = 1e-8,
    max_iter: int = 200,
) -> SolverResult:
    """Solve ``E(x) = 0`` where ``fun`` returns ``(E, dE/dx)``.

    Backtracking on the merit ``|E|^2 / 2``. ``value`` in the result is the
    final merit.
    """
    x = np.array(x0, dtype=float)
    E, J = fun(x)
    ridge = False
    for it in range(max_iter + 1):
        norm = np.max(np.abs(E), initial=0.0)
        if not np.isfinite(norm):
            return SolverResult(x, np.inf, E, it, False, ridge, "non-finite estimating function")
        if norm <= tol:
            return SolverResult(x, 0.5 * float(E @ E), E, it, True, ridge)
        if it == max_iter:
            break
        try:
            d = np.linalg.solve(J, -E)
        except np.linalg.LinAlgError:
            d = np.linalg.lstsq(J + JITTER * np.eye(len(x)), -E, rcond=None)[0]
            ridge = True
        merit = 0.5 * float(E @ E)
        t = 1.0
        for _ in range(MAX_HALVINGS):
            E_new, J_new = fun(x + t * d)
            m_new = 0.5 * float(E_new @ E_new)
            if np.isfinite(m_new) and m_new <= (1.0 - 2.0 * ARMIJO_C * t) * merit:
                break
            t *= 0.5
        else:
            return SolverResult(x, merit, E, it, False, ridge, "line search failed")
        x = x + t * d
        E, J = E_new, J_new
    return SolverResult(x, 0.5 * float(E @ E), E, max_iter, False, ridge,
                        f"no convergence after {max_iter} iterations")


def fd_step(x: np.ndarray, h: float) -> np.ndarray:
    return h * np.maximum(1.0, np.abs(x))


def numerical_jacobian(f: Callable[[np.ndarray], np.ndarray], x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central-difference Jacobian, rows = outputs."""
    x = np.asarray(x, dtype=float)
    steps = fd_step(x, h)
    cols = []
    for j in range(x.size):
        e = np.zeros_like(x)
        e[j] = steps[j]
        cols.append((np.asarray(f(x + e)) - np.asarray(f(x - e))) / (2.0 * steps[j]))
    return np.column_stack(cols) if cols else np.zeros((0, 0))


def numerical_gradient(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    return numerical_jacobian(lambda z: np.atleast_1d(f(z)), x, h)[0]


def numerical_hessian(grad: Callable[[np.ndarray], np.ndarray], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Symmetrised central-difference Jacobian of a gradient."""
    H = numerical_jacobian(grad, x, h)
    return 0.5 * (H + H.T)


def sandwich(J: np.ndarray, K: np.ndarray) -> np.ndarray:
    """``J^-1 K J^-T`` symmetrised with eigenvalues floored at zero."""
    from .errors import SingularMatrixError

    try:
        Jinv = np.linalg.inv(J)
    except np.linalg.LinAlgError:
        raise SingularMatrixError("singular score Jacobian; refit with ridge stabilisation") from None
    if np.linalg.cond(J) > 1e14:
        raise SingularMatrixError("score Jacobian is numerically singular; refit with ridge stabilisation")
    C = Jinv @ K @ Jinv.T
    C = 0.5 * (C + C.T)
    vals, vecs = np.linalg.eigh(C)
    return (vecs * np.maximum(vals, 0.0)) @ vecs.T


@dataclass
class FitResult:
    """Outcome of one estimator run.

    ``params`` are on the original feature scale; ``params_std`` are the
    coordinates the optimiser worked in. ``jacobian``/``score_var`` are the
    sandwich ingredients (working coordinates).
    """

    method: str
    params: np.ndarray
    names: Tuple[str, ...]
    objective: Optional[float]
    score_norm: float
    iterations: int
    converged: bool
    tol: float
    params_std: Optional[np.ndarray] = None
    loglik: Optional[float] = None
    covariance: Optional[np.ndarray] = None
    aic: Optional[float] = None
    tic: Optional[float] = None
    ridge: bool = False
    message: str = ""
    jacobian: Optional[np.ndarray] = None
    score_var: Optional[np.ndarray] = None
    extra: Optional[dict] = None

    @property
    def k(self) -> int:
        return int(self.params.shape[0])

    @property
    def se(self) -> Optional[np.ndarray]:
        return None if self.covariance is None else np.sqrt(np.diag(self.covariance))

    def coef(self) -> dict:
        return dict(zip(self.names, (float(v) for v in self.params)))
