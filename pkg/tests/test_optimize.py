import numpy as np
import pytest

from ppsdm.errors import SingularMatrixError
from ppsdm.optimize import newton_minimize, newton_root, numerical_hessian, numerical_jacobian, sandwich


def rosenbrock(x):
    a, b = x
    f = (1 - a) ** 2 + 100 * (b - a * a) ** 2
    g = np.array([-2 * (1 - a) - 400 * a * (b - a * a), 200 * (b - a * a)])
    H = np.array([[2 - 400 * (b - 3 * a * a), -400 * a], [-400 * a, 200.0]])
    return f, g, H


def test_newton_minimize_nonconvex():
    res = newton_minimize(rosenbrock, np.array([-1.2, 1.0]), tol=1e-10)
    assert res.converged
    np.testing.assert_allclose(res.x, [1.0, 1.0], atol=1e-8)


def test_infeasible_start():
    res = newton_minimize(lambda x: (np.inf, x, np.eye(1)), np.zeros(1))
    assert not res.converged and "infeasible" in res.message


def test_iteration_cap_reported():
    res = newton_minimize(rosenbrock, np.array([-1.2, 1.0]), tol=1e-10, max_iter=2)
    assert not res.converged and "2 iterations" in res.message


def test_flat_objective_still_converges():
    # loss dominated by a huge constant: Armijo sees only rounding near the optimum
    def fun(x):
        return 1e12 + 0.5 * float(x @ x), x.copy(), np.eye(x.size)

    res = newton_minimize(fun, np.array([1e-3, -2e-3]), tol=1e-12)
    assert res.converged


def test_newton_root():
    def fun(x):
        E = np.array([x[0] ** 3 - 8.0, x[1] + x[0]])
        return E, np.array([[3 * x[0] ** 2, 0.0], [1.0, 1.0]])

    res = newton_root(fun, np.array([1.0, 0.0]))
    assert res.converged
    np.testing.assert_allclose(res.x, [2.0, -2.0], atol=1e-9)


def test_finite_differences():
    f = lambda x: np.array([np.sin(x[0]) * x[1], x[1] ** 2])  # noqa: E731
    J = numerical_jacobian(f, np.array([0.3, 2.0]))
    np.testing.assert_allclose(J, [[np.cos(0.3) * 2.0, np.sin(0.3)], [0.0, 4.0]], atol=1e-8)
    H = numerical_hessian(lambda x: np.array([2 * x[0] * x[1], x[0] ** 2]), np.array([1.0, 3.0]))
    np.testing.assert_allclose(H, [[6.0, 2.0], [2.0, 0.0]], atol=1e-6)


def test_sandwich_symmetric_psd():
    rng = np.random.default_rng(0)
    A = rng.normal(size=(3, 3))
    J = A @ A.T + 3 * np.eye(3)
    B = rng.normal(size=(3, 3))
    C = sandwich(J, B @ B.T)
    np.testing.assert_allclose(C, C.T)
    assert np.linalg.eigvalsh(C).min() >= -1e-12
    with pytest.raises(SingularMatrixError):
        sandwich(np.zeros((2, 2)), np.eye(2))
