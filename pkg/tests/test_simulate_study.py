import numpy as np
import pytest

from ppsdm.errors import ConfigError
from ppsdm.grid import PresenceSet
from ppsdm.simulate import lattice_grid, random_grid, rng_stream, simulate_counts, simulate_grid, simulate_ppp, thin
from ppsdm.study import StudyConfig, contaminate, parse_estimator, run_study


def test_streams_are_reproducible_and_distinct():
    a = rng_stream(1, 2, "x").random(5)
    np.testing.assert_array_equal(a, rng_stream(1, 2, "x").random(5))
    assert not np.allclose(a, rng_stream(1, 3, "x").random(5))
    assert not np.allclose(a, rng_stream(1, 2, "y").random(5))


def test_counts_have_poisson_mean():
    g = random_grid(200, 1, seed=3)
    truth = np.array([6.0, 0.3])
    total = [simulate_counts(truth, g, rng_stream(3, r)).sum() for r in range(200)]
    expected = g.w @ np.exp(truth[0] + g.X[:, 0] * truth[1])
    assert np.mean(total) == pytest.approx(expected, rel=0.02)
    assert np.var(total) == pytest.approx(expected, rel=0.25)


def test_presence_set_and_grid():
    g = random_grid(50, 1, seed=4)
    ps = simulate_ppp([5.0, 0.2], g, 7)
    assert isinstance(ps, PresenceSet) and np.all(ps.counts > 0)
    assert simulate_grid([5.0, 0.2], g, 7).n == ps.n


def test_thinning():
    counts = np.full(1000, 10)
    kept = thin(counts, 0.3, 1)
    assert kept.sum() == pytest.approx(3000, rel=0.05)
    assert np.all(kept <= counts)
    np.testing.assert_array_equal(thin(counts, 1.0, 1), counts)
    with pytest.raises(ValueError):
        thin(counts, 1.5, 1)


def test_lattice_orientation():
    g = lattice_grid(3, 4, area=12.0)
    assert g.m == 12 and g.area == pytest.approx(12.0)
    assert g.lat[0] < g.lat[-1] and g.lon[0] < g.lon[3]


def test_contaminate_plants_low_intensity_records():
    lam = np.linspace(1, 10, 100)
    counts = np.full(100, 2)
    out = contaminate(counts, lam, 0.1, rng_stream(0))
    extra = out - counts
    assert extra.sum() == 20 and np.all(extra[lam > np.quantile(lam, 0.1)] == 0)


def test_parse_estimator():
    assert parse_estimator("mle").kind == "kl"
    assert parse_estimator("beta:0.2").beta == 0.2
    assert parse_estimator("ucdf:exp:0.5").ucdf_tau == 0.5
    for bad in ("beta", "beta:x", "lasso"):
        with pytest.raises(ConfigError):
            parse_estimator(bad)


def test_config_validation():
    with pytest.raises(ConfigError):
        StudyConfig(truth=[1.0, 0.1], replicates=0)
    with pytest.raises(ConfigError):
        StudyConfig(truth=[1.0, 0.1], replicates=2, contamination=1.2)


def test_study_independent_of_workers():
    cfg = dict(truth=[5.0, 0.5], replicates=6, seed=9, m=300, estimators=("mle", "gamma:0.3"))
    a = run_study(StudyConfig(workers=1, **cfg))
    b = run_study(StudyConfig(workers=2, **cfg))
    for k in a.estimates:
        np.testing.assert_array_equal(a.estimates[k], b.estimates[k])
    assert {r["estimator"] for r in a.rows} == {"mle", "gamma:0.3"}
    assert all(r["replicates_ok"] == 6 for r in a.rows)


def test_integrated_study_rows():
    cfg = StudyConfig(truth=[4.5, 0.6], replicates=4, seed=2, scenario="integrated", m=400, n_regions=40,
                      region_size=4, visits=3)
    res = run_study(cfg)
    labels = {r["estimator"] for r in res.rows}
    assert labels == {"integrated", "pb", "so"}
    assert all("variance_ratio_integrated" in r for r in res.rows)
