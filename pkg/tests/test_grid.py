import numpy as np
import pytest

from ppsdm.errors import GridParseError, GridValidationError
from ppsdm.grid import CovariateGrid, FeatureTransform, GridSchema, load_grid, write_grid
from ppsdm.simulate import lattice_grid, random_grid


def _csv(tmp_path, text, name="g.csv"):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_roundtrip(tmp_path):
    g = lattice_grid(4, 5, area=2.0, n_bias=1, n_access=1)
    g = g.with_counts(np.arange(g.m) % 3)
    path = tmp_path / "grid.csv"
    write_grid(g, path, header_comment="made in a test")
    h = load_grid(path)
    assert h.m == g.m and h.area == pytest.approx(2.0)
    np.testing.assert_array_equal(h.counts, g.counts)
    np.testing.assert_array_equal(h.X, g.X)
    np.testing.assert_array_equal(h.Z, g.Z)
    np.testing.assert_array_equal(h.V, g.V)
    assert h.x_names == g.x_names and h.z_names == ("z_1",)


def test_prefix_columns_and_default_weights(tmp_path):
    p = _csv(tmp_path, "id,presence,elev,z_road,v_track\n1,0,1.5,0.1,2\n2,3,0.5,0.2,1\n")
    g = load_grid(p, area=10.0)
    assert g.x_names == ("elev",) and g.z_names == ("z_road",) and g.v_names == ("v_track",)
    np.testing.assert_allclose(g.w, [5.0, 5.0])
    assert g.n == 3


def test_explicit_schema(tmp_path):
    p = _csv(tmp_path, "cell,count,w,a,b,junk\n7,1,0.5,1,2,x\n8,0,0.5,3,4,y\n")
    g = load_grid(p, GridSchema(id="cell", presence="count", x=["a"], ignore=["b", "junk"]))
    assert g.x_names == ("a",)
    np.testing.assert_array_equal(g.ids, [7, 8])


@pytest.mark.parametrize("text, exc, needle", [
    ("id,w,x\n1,1,0\n", GridParseError, "presence"),
    ("id,presence,w,x\n1,0,1,abc\n", GridParseError, "row 1"),
    ("id,presence,w,x\n1,0,1,0\n2,0,1\n", GridParseError, "row 2"),
    ("id,presence,w,x\n1,0,1,0\n1,0,1,1\n", GridValidationError, "duplicate"),
    ("id,presence,w,x\n1,-1,1,0\n", GridValidationError, "nonnegative"),
    ("id,presence,w,x\n1,1.5,1,0\n", GridValidationError, "nonnegative"),
    ("id,presence,w,x\n1,0,0,0\n", GridValidationError, "positive"),
    ("id,presence,w,x\n1,0,1,inf\n", GridValidationError, "non-finite"),
    ("id,presence,w\n1,0,1\n", GridParseError, "feature"),
])
def test_loader_errors(tmp_path, text, exc, needle):
    with pytest.raises(exc, match=needle):
        load_grid(_csv(tmp_path, text))


def test_missing_file_and_area(tmp_path):
    with pytest.raises(GridParseError):
        load_grid(tmp_path / "nope.csv")
    with pytest.raises(GridParseError, match="area"):
        load_grid(_csv(tmp_path, "id,presence,x\n1,0,0\n"))


def test_weights_must_match_area():
    with pytest.raises(GridValidationError, match="sum"):
        CovariateGrid(w=[1.0, 1.0], X=[[0.0], [1.0]], counts=[0, 0], area=3.0)


def test_feature_transform_roundtrip():
    g = random_grid(50, 3, seed=4)
    tr = FeatureTransform.fit(g.X * [1, 10, 100] + 5)
    theta = np.array([0.3, 1.0, -2.0, 0.5])
    back = tr.to_standard(tr.to_original(theta))
    np.testing.assert_allclose(back, theta, rtol=1e-12, atol=1e-12)
    Xs = tr.apply(g.X * [1, 10, 100] + 5)
    np.testing.assert_allclose(Xs.mean(axis=0), 0, atol=1e-12)


def test_subset_and_cell():
    g = random_grid(10, 2, seed=1).with_counts(np.arange(10))
    s = g.subset([2, 5])
    assert s.m == 2 and s.n == 7
    c = g.cell(3)
    assert c.presence_count == 3 and c.x.shape == (2,)
