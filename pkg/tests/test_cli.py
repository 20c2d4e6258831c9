import csv
import json
from pathlib import Path

import numpy as np
import pytest

from ppsdm.cli import main
from ppsdm.grid import CovariateGrid, write_grid
from ppsdm.mapping import read_pgm, scale_levels
from ppsdm.simulate import lattice_grid, rng_stream, simulate_ds

FIXTURES = Path(__file__).parent / "fixtures"


def _rows(path):
    lines = Path(path).read_text().splitlines()
    assert lines[0].startswith("# manifest ")
    return list(csv.DictReader(lines[1:]))


def _table(path):
    return {r["metric"]: r["value"] for r in _rows(path)}


@pytest.fixture(scope="module")
def sim(tmp_path_factory):
    d = tmp_path_factory.mktemp("sim")
    assert main(["simulate", "--truth", "4.5,0.6,-0.4", "--nrow", "20", "--ncol", "20", "--seed", "5",
                 "--regions", "30", "--region-size", "4", "--visits", "3", "--out", str(d)]) == 0
    return d


def test_fixture_fit_matches_oracle(tmp_path):
    oracle = json.loads((FIXTURES / "fixture_oracle.json").read_text())
    assert main(["fit", "--grid", str(FIXTURES / "fixture_grid.csv"), "--method", "ppp", "--out", str(tmp_path)]) == 0
    rows = _rows(tmp_path / "coefficients.csv")
    assert [r["parameter"] for r in rows] == oracle["names"]
    np.testing.assert_allclose([float(r["estimate"]) for r in rows], oracle["estimate"], atol=2e-3)


def test_simulate_is_byte_identical(sim, tmp_path):
    args = ["simulate", "--truth", "4.5,0.6,-0.4", "--nrow", "20", "--ncol", "20", "--seed", "5",
            "--regions", "30", "--region-size", "4", "--visits", "3"]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    for name in ("grid.csv", "survey.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (sim / name).read_bytes()
    assert main(args[:-6] + ["--seed", "6", "--out", str(tmp_path / "b")]) == 0
    assert (tmp_path / "b" / "grid.csv").read_bytes() != (sim / "grid.csv").read_bytes()


@pytest.mark.parametrize("extra", [
    ["--method", "ppp"], ["--method", "beta", "--beta", "0.3"], ["--method", "gamma", "--gamma", "0.3"],
    ["--method", "ucdf", "--cdf", "exp", "--ucdf-tau", "0.01"], ["--method", "iwlr"],
    ["--method", "cc-logit", "--mu", "0.5"], ["--method", "asym-logit", "--kappa", "2"],
    ["--method", "maxent"], ["--method", "ql-ppp"],
    ["--method", "integrated", "--fisher-replicates", "5"], ["--method", "integrated-robust", "--ucdf-tau", "0.01"],
], ids=lambda a: a[1])
def test_fit_every_method(sim, tmp_path, extra):
    if extra[1].startswith("integrated"):
        extra = extra + ["--survey", str(sim / "survey.csv")]
    assert main(["fit", "--grid", str(sim / "grid.csv"), "--out", str(tmp_path)] + extra) == 0
    man = json.loads((tmp_path / "manifest.json").read_text())
    for name in man["outputs"]:
        assert (tmp_path / name).read_text().startswith(f"# manifest {man['hash']}\n")
    coef = _rows(tmp_path / "coefficients.csv")
    assert all(np.isfinite(float(r["estimate"])) for r in coef)
    assert man["result"]["converged"]


def test_beta_maxent_selection_table(sim, tmp_path):
    assert main(["fit", "--grid", str(sim / "grid.csv"), "--method", "beta-maxent", "--out", str(tmp_path)]) == 0
    table = _rows(tmp_path / "selection.csv")
    assert len(table) == 7
    man = json.loads((tmp_path / "manifest.json").read_text())
    assert man["result"]["selected_beta"] in [float(r["beta"]) for r in table]


def test_distance_sampling_fit(tmp_path):
    m = 300
    rng = rng_stream(8, 0, "cli-ds")
    g = CovariateGrid(w=np.full(m, 1 / m), X=rng.normal(size=(m, 1)), counts=np.zeros(m, dtype=np.int64),
                      distance=rng.uniform(0, 2, m), U=rng.normal(size=(m, 1)))
    ds = simulate_ds([6.0, 0.5], [0.1, 0.3], g, rng_stream(8, 0, "ds"))
    write_grid(g, tmp_path / "grid.csv")
    cov = g.u_names[0]
    lines = [f"point_id,cell_id,distance,{cov}"]
    lines += [f"{i},{g.ids[c]},{float(d)!r},{float(u)!r}"
              for i, (c, d, u) in enumerate(zip(ds.cell, ds.distance, ds.U[:, 0]))]
    (tmp_path / "ds.csv").write_text("\n".join(lines) + "\n")
    assert main(["fit", "--grid", str(tmp_path / "grid.csv"), "--method", "ds", "--ds", str(tmp_path / "ds.csv"),
                 "--out", str(tmp_path / "fit")]) == 0
    names = [r["parameter"] for r in _rows(tmp_path / "fit" / "coefficients.csv")]
    assert names[:2] == ["(intercept)", "x1"] and names[2].startswith("sigma:")


def test_config_file_and_flag_precedence(sim, tmp_path):
    cfg = tmp_path / "run.ini"
    cfg.write_text(f"[run]\nseed = 1\n\n[fit]\ngrid = {sim / 'grid.csv'}\nmethod = beta\nbeta = 0.3\n")
    assert main(["fit", "--config", str(cfg), "--beta", "0.2", "--out", str(tmp_path / "o")]) == 0
    man = json.loads((tmp_path / "o" / "manifest.json").read_text())
    assert man["config"]["beta"] == 0.2 and man["config"]["method"] == "beta" and man["config"]["seed"] == 1
    cfg.write_text("[fit]\nbogus = 1\n")
    assert main(["fit", "--config", str(cfg), "--grid", str(sim / "grid.csv"), "--out", str(tmp_path / "x")]) == 2


def test_exit_codes(sim, tmp_path):
    assert main(["fit", "--method", "ppp", "--out", str(tmp_path)]) == 2
    assert main(["fit", "--grid", str(tmp_path / "missing.csv"), "--out", str(tmp_path)]) == 3
    assert main(["fit", "--grid", str(sim / "grid.csv"), "--max-iter", "1", "--out", str(tmp_path / "c")]) == 4
    assert main(["fit", "--grid", str(sim / "grid.csv"), "--method", "cc-logit", "--out", str(tmp_path)]) == 2
    assert main(["study", "--truth", "5,0.5", "--replicates", "0", "--out", str(tmp_path)]) == 2


def test_evaluate_appends_metrics(sim, tmp_path):
    fit = tmp_path / "fit"
    assert main(["fit", "--grid", str(sim / "grid.csv"), "--out", str(fit)]) == 0
    assert main(["evaluate", "--fit", str(fit), "--out", str(tmp_path / "ev")]) == 0
    ev = _table(tmp_path / "ev" / "evaluation.csv")
    fm = _table(fit / "metrics.csv")
    assert float(ev["auc"]) == pytest.approx(float(fm["auc"]))
    assert float(ev["aic"]) == pytest.approx(float(fm["aic"]), rel=1e-10)
    assert ev["fit_tic"] == fm["tic"]


def test_map_roundtrip_and_determinism(sim, tmp_path):
    fit = tmp_path / "fit"
    assert main(["fit", "--grid", str(sim / "grid.csv"), "--out", str(fit)]) == 0
    for d in ("m1", "m2"):
        assert main(["map", "--fit", str(fit), "--out", str(tmp_path / d)]) == 0
    for name in ("map.pgm", "map.csv", "presences.csv"):
        assert (tmp_path / "m1" / name).read_bytes() == (tmp_path / "m2" / name).read_bytes()
    rows = _rows(tmp_path / "m1" / "map.csv")
    img = read_pgm(tmp_path / "m1" / "map.pgm")
    r = np.array([int(x["row"]) for x in rows])
    c = np.array([int(x["col"]) for x in rows])
    # rescaling the CSV reproduces the image exactly
    np.testing.assert_array_equal(img[r, c], scale_levels([float(x["intensity"]) for x in rows]))
    assert (tmp_path / "m1" / "map.pgm").read_text().splitlines()[1].startswith("# manifest ")


def _map_of(tmp_path, theta, tag):
    g = lattice_grid(6, 8, seed=1)
    g = g.with_counts(np.ones(g.m, dtype=np.int64))
    write_grid(g, tmp_path / f"{tag}.csv")
    fit = tmp_path / f"fit_{tag}"
    fit.mkdir()
    (fit / "manifest.json").write_text(json.dumps({"config": {"method": "ppp"}, "grid": str(tmp_path / f"{tag}.csv"),
                                                   "model": {"kind": "loglinear", "theta": theta}}))
    assert main(["map", "--fit", str(fit), "--out", str(tmp_path / f"map_{tag}")]) == 0
    return g, read_pgm(tmp_path / f"map_{tag}" / "map.pgm")


def test_constant_and_monotone_maps(tmp_path):
    _, img = _map_of(tmp_path, [1.0, 0.0, 0.0], "flat")
    assert set(np.unique(img)) == {128}
    g, img = _map_of(tmp_path, [1.0, 1.0, 0.0], "ramp")
    from ppsdm.mapping import raster_layout

    row, col, _, _ = raster_layout(g)
    order = np.argsort(g.X[:, 0])
    assert np.all(np.diff(img[row[order], col[order]].astype(int)) >= 0)


def test_study_command(tmp_path):
    assert main(["study", "--truth", "5,0.5", "--replicates", "3", "--m", "200", "--seed", "4",
                 "--estimators", "mle,beta:0.2", "--out", str(tmp_path)]) == 0
    rows = _rows(tmp_path / "study.csv")
    assert {r["estimator"] for r in rows} == {"mle", "beta:0.2"}
    man = json.loads((tmp_path / "manifest.json").read_text())
    assert man["seed"] == 4 and man["replicates"] == 3
