import logging

import numpy as np
import pytest
from scipy.special import expit

from ppsdm.errors import DataError
from ppsdm.grid import CovariateGrid
from ppsdm.integrated import (
    DsData, PbModel, SurveyData, SurveyDesign, fit_ds, fit_integrated, fit_integrated_robust, halfnormal_detection,
    load_ds, load_survey, loglik_ds, loglik_pb, loglik_so, occupancy_prob, occupancy_probs,
)
from ppsdm.simulate import random_grid, rng_stream, simulate_ds, simulate_so

BETA = np.array([4.5, 0.6, -0.4])


def _fd(f, x, h=1e-6):
    return np.array([(f(x + h * e) - f(x - h * e)) / (2 * h) for e in np.eye(x.size)])


@pytest.fixture(scope="module")
def setup():
    g = random_grid(600, 2, seed=51, n_access=1)
    design = SurveyDesign([np.arange(4 * i, 4 * i + 4) for i in range(60)], 3,
                          rng_stream(51, 0, "z").normal(size=(60, 3, 2)))
    mu = g.w * expit(g.V[:, 0]) * np.exp(BETA[0] + g.X @ BETA[1:])
    g = g.with_counts(rng_stream(51, 0, "pb").poisson(mu))
    y = simulate_so(BETA, [0.2, -0.5], design, g, rng_stream(51, 0, "so"))
    return g, design, y


def test_pb_gradient(setup):
    g, _, _ = setup
    x = np.array([4.3, 0.5, -0.3, 0.8])
    f = lambda v: loglik_pb(PbModel(v[:3], v[3:]), g)  # noqa: E731
    _, grad = loglik_pb(PbModel(x[:3], x[3:]), g, gradient=True)
    np.testing.assert_allclose(grad, _fd(f, x), rtol=1e-6, atol=1e-4)


def test_so_gradient(setup):
    g, design, y = setup
    x = np.array([4.3, 0.5, -0.3, 0.1, -0.4])
    f = lambda v: loglik_so(v[:3], v[3:], design, y, g)  # noqa: E731
    _, grad = loglik_so(x[:3], x[3:], design, y, g, gradient=True)
    np.testing.assert_allclose(grad, _fd(f, x), rtol=1e-6, atol=1e-5)


def test_occupancy(setup):
    g, design, _ = setup
    psi = occupancy_probs(BETA, g, design)
    assert psi[3] == pytest.approx(occupancy_prob(BETA, g, design.regions[3]))
    lam = np.exp(BETA[0] + g.X[design.regions[3]] @ BETA[1:])
    assert psi[3] == pytest.approx(1 - np.exp(-g.w[design.regions[3]] @ lam))
    with pytest.raises(DataError):
        occupancy_prob(BETA, g, [])


def test_design_validation():
    with pytest.raises(DataError, match="overlaps"):
        SurveyDesign([np.array([0, 1]), np.array([1, 2])], 2, np.ones((2, 2)))
    with pytest.raises(DataError, match="empty"):
        SurveyDesign([np.array([], dtype=int)], 2, np.ones((1, 2)))
    with pytest.raises(ValueError, match="shape"):
        SurveyDesign([np.array([0])], 2, np.ones((1, 3)))
    with pytest.raises(DataError):
        SurveyData([[0, 2]])


def test_fit_recovers_truth_and_fisher_adds(setup):
    g, design, y = setup
    fit = fit_integrated(g, None, design, y, fisher_replicates=10, seed=3)
    assert fit.converged and fit.score_norm <= 1e-8
    assert np.all(np.abs(fit.beta_shared - BETA) < 4 * np.sqrt(np.diag(fit.cov_integrated)[:3]))
    I = fit.fisher_integrated
    assert np.linalg.norm(I - fit.fisher_pb - fit.fisher_so) <= 1e-6 * np.linalg.norm(I)
    assert fit.names[:3] == ("(intercept)", "x1", "x2") and fit.names[-2:] == ("tau1", "tau2")


def test_pb_only_and_so_only(setup):
    g, design, y = setup
    pb = fit_integrated(g, fisher_replicates=0)
    assert pb.converged and pb.tau_detect.size == 1
    so = fit_integrated(g.with_counts(np.zeros(g.m, dtype=np.int64)), None, design, y, fisher_replicates=0)
    assert so.converged and so.alpha_detect.size == 1
    with pytest.raises(DataError):
        fit_integrated(g.with_counts(np.zeros(g.m, dtype=np.int64)))


def test_step_robust_equals_plain(setup):
    g, design, y = setup
    plain = fit_integrated(g, None, design, y, fisher_replicates=0)
    step = fit_integrated_robust(g, None, design, y, cdf="step")
    np.testing.assert_allclose(step.theta, plain.theta, atol=1e-8)
    robust = fit_integrated_robust(g, None, design, y, cdf="exp", ucdf_tau=2 * g.area / g.n)
    assert robust.converged and robust.cov_integrated is not None
    with pytest.raises(ValueError):
        fit_integrated_robust(g, None, design, y, ucdf_tau=0.0)


def test_detect_intercept_warns(setup, caplog):
    g, _, _ = setup
    with caplog.at_level(logging.WARNING, logger="ppsdm"):
        fit_integrated(g, detect_intercept=True, fisher_replicates=0)
    assert "confounded" in caplog.text


def test_distance_sampling():
    m = 400
    rng = rng_stream(52, 0, "ds-grid")
    gb = CovariateGrid(w=np.full(m, 1 / m), X=rng.normal(size=(m, 1)), counts=np.zeros(m, dtype=np.int64),
                       distance=rng.uniform(0, 2, m), U=rng.normal(size=(m, 1)))
    beta, omega = np.array([6.0, 0.5]), np.array([0.1, 0.3])
    ds = simulate_ds(beta, omega, gb, rng_stream(52, 0, "ds"))
    x = np.concatenate([beta, omega]) + 0.05
    _, grad = loglik_ds(x[:2], x[2:], ds, gb, gradient=True)
    np.testing.assert_allclose(grad, _fd(lambda v: loglik_ds(v[:2], v[2:], ds, gb), x), rtol=1e-6, atol=1e-4)
    fit = fit_ds(gb, ds)
    assert fit["converged"]
    se = np.sqrt(np.diag(fit["covariance"]))
    assert np.all(np.abs(np.concatenate([fit["beta"], fit["omega"]]) - np.concatenate([beta, omega])) < 4 * se)
    assert halfnormal_detection([0.0], [0.0], np.zeros((1, 0)))[0] == 1.0


def test_loaders(tmp_path):
    g = CovariateGrid(w=np.full(6, 0.5), X=np.arange(6.0)[:, None], counts=np.zeros(6, dtype=np.int64),
                      region=np.array([1, 1, 2, 2, 0, 0]), distance=np.linspace(0, 1, 6))
    p = tmp_path / "survey.csv"
    p.write_text("region_id,visit,y,effort\n1,1,0,0.5\n1,2,1,1.0\n2,1,0,0.2\n2,2,0,0.1\n")
    design, data = load_survey(p, g)
    assert design.K == 2 and design.T == 2 and design.q == 1
    np.testing.assert_array_equal(design.regions[1], [2, 3])
    np.testing.assert_array_equal(data.s_flags, [0, 1])
    bad = tmp_path / "bad.csv"
    bad.write_text("region_id,visit,y\n1,1,0\n1,2,1\n2,1,0\n")
    with pytest.raises(DataError, match="every visit"):
        load_survey(bad, g)
    dsp = tmp_path / "ds.csv"
    dsp.write_text("point_id,cell_id,distance\n1,2,0.3\n2,5,0.1\n")
    ds = load_ds(dsp, g)
    np.testing.assert_array_equal(ds.cell, [2, 5])
    dsp.write_text("point_id,cell_id,distance\n1,99,0.3\n")
    with pytest.raises(DataError, match="unknown cell"):
        load_ds(dsp, g)
    with pytest.raises(DataError):
        DsData([0], [-1.0], np.zeros((1, 0)))
