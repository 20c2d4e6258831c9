import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ppsdm.bridge import WeightScheme, fit_beta_maxent, fit_weighted_logistic
from ppsdm.divergence import fit_beta_power, fit_mle
from ppsdm.errors import ConfigError
from ppsdm.grid import CovariateGrid
from ppsdm.mapping import raster_layout, read_pgm, render_pgm, scale_levels, write_map_csv, write_pgm
from ppsdm.metrics import aic, aic_value, auc, auc_bruteforce, evaluate, select_variables, tic, tic_penalty
from ppsdm.simulate import lattice_grid, random_grid, rng_stream

scores = st.lists(st.integers(-5, 5), min_size=1, max_size=60)


@given(scores, scores)
def test_auc_matches_pairs(a, b):
    assert auc(a, b) == pytest.approx(auc_bruteforce(a, b), abs=1e-12)


@given(scores, scores)
def test_auc_symmetry(a, b):
    assert auc(a, b) + auc(b, a) == pytest.approx(1.0, abs=1e-12)


@settings(max_examples=30)
@given(st.lists(st.floats(-10, 10, allow_nan=False), min_size=2, max_size=40))
def test_auc_invariant_to_monotone_maps(v):
    v = np.asarray(v)
    a, b = v[: len(v) // 2], v[len(v) // 2:]
    # maps that preserve order exactly in floating point
    assert auc(a, b) == pytest.approx(auc(np.ldexp(a, 3), np.ldexp(b, 3)), abs=1e-12)
    assert auc(-a, -b) == pytest.approx(1.0 - auc(a, b), abs=1e-12)


def test_auc_needs_both_groups():
    with pytest.raises(ValueError):
        auc([], [1.0])


def _grid(p=3, seed=61):
    g = random_grid(500, p, seed=seed)
    lam = np.exp(4.5 + 0.8 * g.X[:, 0] - 0.5 * g.X[:, 1])
    return g.with_counts(rng_stream(seed).poisson(g.w * lam))


def test_aic_and_tic():
    g = _grid()
    fit = fit_mle(g)
    assert aic(fit) == aic_value(4, fit.loglik) == fit.aic
    # under the working model the TIC penalty is close to the parameter count
    assert tic_penalty(fit) == pytest.approx(4, abs=1.5)
    assert tic(fit) == pytest.approx(2 * fit.objective + 2 * tic_penalty(fit))
    with pytest.raises(ConfigError):
        aic(fit_beta_power(g, beta=0.3))
    with pytest.raises(ConfigError):
        aic(fit_weighted_logistic(g, WeightScheme.CaseControl(0.5)))


def test_evaluate_report():
    g = _grid()
    rep = evaluate(fit_mle(g), g)
    assert 0.5 < rep.auc <= 1.0 and rep.n_presence == g.n and rep.n_background == g.m
    assert dict(rep.as_rows())["aic"] == rep.aic


def test_variable_selection_drops_noise():
    g = _grid(3)
    cols, fit, table = select_variables(g, fit_mle, "aic")
    assert cols[:2] == [0, 1] and len(table) == 8
    cols_t, _, _ = select_variables(g, fit_mle, "tic")
    assert {0, 1} <= set(cols_t)
    with pytest.raises(ConfigError):
        select_variables(g, fit_mle, "bic")


def test_scale_levels_rule():
    v = np.array([0.0, 0.5, 1.0, 0.25])
    np.testing.assert_array_equal(scale_levels(v), [1, 128, 255, 65])
    np.testing.assert_array_equal(scale_levels([3.0, 3.0]), [128, 128])


@given(st.lists(st.floats(-1e6, 1e6, allow_nan=False), min_size=1, max_size=50))
def test_levels_in_range(v):
    lv = scale_levels(v)
    assert lv.min() >= 1 and lv.max() <= 255


def test_pgm_roundtrip_and_layout(tmp_path):
    g = lattice_grid(3, 4)
    vals = g.lat * 10 + g.lon  # increases northwards
    path = tmp_path / "m.pgm"
    write_pgm(vals, g, path, comment="test")
    img = read_pgm(path)
    assert img.shape == (3, 4)
    assert img[0].min() > img[-1].max()  # north on top
    row, col, _, _ = raster_layout(g)
    np.testing.assert_array_equal(img[row, col], scale_levels(vals))
    text = path.read_text().splitlines()
    assert text[0] == "P2" and text[1] == "# test" and text[2] == "4 3" and text[3] == "255"


def test_missing_cells_are_no_data(tmp_path):
    g = lattice_grid(2, 2).subset([0, 1, 3])
    img = read_pgm_from(render_pgm(np.array([1.0, 2.0, 3.0]), g), tmp_path)
    assert (img == 0).sum() == 1


def read_pgm_from(text, tmp_path):
    p = tmp_path / "x.pgm"
    p.write_text(text)
    return read_pgm(p)


def test_map_csv(tmp_path):
    g = CovariateGrid(w=np.ones(3), X=np.zeros((3, 1)), counts=np.zeros(3, dtype=np.int64))
    write_map_csv([1.0, 2.0, 3.0], g, tmp_path / "m.csv", header_comment="manifest abc")
    lines = (tmp_path / "m.csv").read_text().splitlines()
    assert lines[0] == "# manifest abc" and lines[1] == "id,row,col,intensity"


def test_auc_worked_examples():
    assert auc([3.0, 4.0], [1.0, 2.0]) == 1.0
    assert auc([1.0, 1.0], [1.0, 1.0, 1.0]) == 0.5
    assert auc([0.9, 0.4], [0.5, 0.1]) == pytest.approx(0.75)


def test_tic_reduces_to_aic_when_k_equals_j():
    fit = fit_mle(_grid())
    forced = dataclasses.replace(fit, score_var=fit.jacobian.copy())
    assert tic(forced) == pytest.approx(aic(fit), rel=1e-12)


def test_tic_penalty_tracks_parameter_count():
    g = random_grid(500, 3, seed=62)
    lam = np.exp(4.5 + g.X @ [0.8, -0.5, 0.0])
    tr = [tic_penalty(fit_mle(g.with_counts(rng_stream(62, r).poisson(g.w * lam)))) for r in range(200)]
    assert abs(np.mean(tr) - 4) < 0.2 * 4


def test_beta_maxent_prefers_small_beta_without_contamination():
    g = random_grid(500, 3, seed=62)
    lam = np.exp(4.5 + g.X @ [0.8, -0.5, 0.0])
    sel = np.array([fit_beta_maxent(g.with_counts(rng_stream(63, r).poisson(g.w * lam)))[0].beta_ent
                    for r in range(30)])
    assert np.mean(np.abs(sel) <= 0.2 + 1e-12) >= 0.9
    assert abs(np.mean(sel)) < 0.1
