import numpy as np
import pytest
from scipy.integrate import quad

from ppsdm.divergence import (
    CdfSpec, DivergenceSpec, FitOptions, divergence_loss, estimating_function, fit_beta_power, fit_divergence,
    fit_gamma_power, fit_mle, fit_u_cdf, negloglik, sandwich_covariance, score_kl,
)
from ppsdm.errors import DataError
from ppsdm.grid import CovariateGrid
from ppsdm.intensity import LogLinearParams
from ppsdm.simulate import random_grid, rng_stream

SPECS = [DivergenceSpec.KL(), DivergenceSpec.BetaPower(0.4), DivergenceSpec.BetaPower(-0.3),
         DivergenceSpec.UCdf("exp", 0.01), DivergenceSpec.UCdf("unicap", 0.005)]


@pytest.fixture(scope="module")
def grid():
    g = random_grid(300, 2, seed=31, uniform_weights=False)
    lam = np.exp(5.0 + g.X @ [0.7, -0.4])
    return g.with_counts(rng_stream(31).poisson(g.w * lam))


@pytest.mark.parametrize("spec", SPECS, ids=lambda s: s.label)
def test_score_is_minus_loss_gradient(grid, spec):
    theta = np.array([4.8, 0.5, -0.2])
    E = estimating_function(spec, LogLinearParams.from_vector(theta), grid)
    h = 1e-6
    num = [(divergence_loss(spec, LogLinearParams.from_vector(theta + h * e), grid)
            - divergence_loss(spec, LogLinearParams.from_vector(theta - h * e), grid)) / (2 * h) for e in np.eye(3)]
    np.testing.assert_allclose(-E, num, rtol=1e-5, atol=1e-4)


@pytest.mark.parametrize("spec", SPECS, ids=lambda s: s.label)
def test_fit_invariants(grid, spec):
    fit = fit_divergence(grid, spec)
    assert fit.converged and fit.score_norm <= fit.tol
    C = fit.covariance
    np.testing.assert_allclose(C, C.T, atol=1e-14)
    assert np.linalg.eigvalsh(C).min() >= -1e-12
    np.testing.assert_allclose(sandwich_covariance(fit, grid), C, rtol=1e-4, atol=1e-10)


def test_mle_score_and_loglik(grid):
    fit = fit_mle(grid)
    p = LogLinearParams.from_vector(fit.params)
    assert np.max(np.abs(score_kl(p, grid))) < 1e-6
    assert fit.loglik == pytest.approx(-negloglik(p, grid), rel=1e-12)
    # the estimating equation balances expected and observed counts
    lam = np.exp(grid.design(False) @ fit.params)
    assert grid.w @ lam == pytest.approx(grid.n, rel=1e-9)


def test_beta_and_gamma_share_slopes(grid):
    b = fit_beta_power(grid, beta=0.3)
    gm = fit_gamma_power(grid, gamma=0.3)
    np.testing.assert_allclose(b.params[1:], gm.params[1:], atol=1e-6)
    lam = np.exp(grid.design(False) @ gm.params)
    assert grid.w @ lam == pytest.approx(grid.n, rel=1e-9)


def test_standardisation_does_not_change_estimates(grid):
    a = fit_beta_power(grid, beta=0.3)
    b = fit_beta_power(grid, beta=0.3, opts=FitOptions(standardize=False))
    np.testing.assert_allclose(a.params, b.params, atol=1e-6)


def test_step_cdf_is_mle(grid):
    np.testing.assert_allclose(fit_u_cdf(grid, cdf="step").params, fit_mle(grid).params, atol=1e-10)


@pytest.mark.parametrize("family", ["exp", "unicap"])
def test_cdf_integrals(family):
    cdf, tau = CdfSpec(family), 0.7
    for t in (0.05, 0.9, 3.0, 40.0):
        xi = quad(lambda u: cdf.F(tau * u) / u, 0, t, points=[1 / tau], limit=200)[0]
        G = quad(lambda u: cdf.F(tau * u), 0, t, points=[1 / tau], limit=200)[0]
        assert float(cdf.xi(t, tau)) == pytest.approx(xi, rel=1e-8)
        assert float(cdf.G(t, tau)) == pytest.approx(G, rel=1e-8)


def test_unknown_cdf_and_family(grid):
    with pytest.raises(ValueError):
        CdfSpec("cauchy")
    with pytest.raises(ValueError):
        fit_mle(grid, model_family="quasilinear")


def test_no_presences():
    g = random_grid(20, 1, seed=0)
    with pytest.raises(DataError):
        fit_mle(g)


def test_collinear_features_get_ridge():
    g = random_grid(200, 1, seed=2)
    X = np.column_stack([g.X[:, 0], 2 * g.X[:, 0]])
    g2 = CovariateGrid(w=g.w, X=X, counts=rng_stream(2).poisson(g.w * np.exp(4 + 0.5 * g.X[:, 0])))
    fit = fit_mle(g2)
    assert fit.ridge


def test_sandwich_matches_simulation_spread():
    g0 = random_grid(500, 1, seed=33)
    truth = np.array([4.5, 0.8])
    lam = np.exp(truth[0] + g0.X[:, 0] * truth[1])
    est, se = [], []
    for r in range(150):
        fit = fit_beta_power(g0.with_counts(rng_stream(33, r).poisson(g0.w * lam)), beta=0.3)
        est.append(fit.params[1])
        se.append(np.sqrt(fit.covariance[1, 1]))
    assert np.mean(se) == pytest.approx(np.std(est, ddof=1), rel=0.2)
