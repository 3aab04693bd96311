import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sogmodel.geostat import (
    KINDS,
    STATIC_DATE,
    CollocationConfig,
    EmpiricalVariogram,
    GeostatError,
    KrigingError,
    VariogramFitError,
    VariogramModel,
    collocate,
    empirical_variogram,
    fit_variogram,
    haversine_km,
    idw_fill,
    kriging_weights,
    nearest_day,
    ordinary_krige,
    rasterize_daily,
    read_raster_csv,
    variogram_value,
    write_raster_rows,
)


def brute_variogram(xy, z, w, max_dist):
    sums, counts, dists = {}, {}, {}
    nb = int(np.ceil(max_dist / w - 1e-12))
    for i in range(len(z)):
        for j in range(i + 1, len(z)):
            d = float(np.hypot(*(xy[i] - xy[j])))
            if d > max_dist:
                continue
            b = min(int(d // w), nb - 1)
            sums[b] = sums.get(b, 0.0) + (z[i] - z[j]) ** 2
            counts[b] = counts.get(b, 0) + 1
            dists[b] = dists.get(b, 0.0) + d
    keys = sorted(counts)
    return (
        np.array([dists[k] / counts[k] for k in keys]),
        np.array([sums[k] / (2 * counts[k]) for k in keys]),
        np.array([counts[k] for k in keys]),
    )


# ------------------------------------------------------------------ rasters


def test_rasterize_examples():
    r = rasterize_daily([-170.2], [70.3], [0.5], 0.5)
    assert r.cells == {(-341, 140): 0.5}
    r = rasterize_daily([-170.2, -170.1], [70.3, 70.4], [0.2, 0.4], 0.5)
    assert len(r) == 1 and r.values[0] == pytest.approx(0.3)
    r = rasterize_daily([-170.2, -160.2], [70.3, 70.3], [0.2, 0.4], 0.5)
    assert sorted(r.values.tolist()) == [0.2, 0.4]
    with pytest.raises(GeostatError):
        rasterize_daily([0.0], [0.0], [np.nan])


def test_raster_cell_mean_matches_groupby_oracle():
    rng = np.random.default_rng(0)
    lon, lat, v = rng.uniform(-172, -165, 300), rng.uniform(67, 70, 300), rng.uniform(0, 1, 300)
    r = rasterize_daily(lon, lat, v, 0.5)
    for (ix, iy), val in r.cells.items():
        m = (np.floor(lon / 0.5) == ix) & (np.floor(lat / 0.5) == iy)
        assert val == pytest.approx(v[m].mean(), rel=1e-12)
    assert r.counts.sum() == 300


def test_raster_csv_roundtrip(tmp_path):
    r = rasterize_daily([-170.2, -160.2], [70.3, 70.3], [0.2, 0.4], 0.5)
    rows = pd.concat([write_raster_rows(r, "2015-07-01"), write_raster_rows(r, STATIC_DATE)])
    rows.to_csv(tmp_path / "r.csv", index=False)
    back = read_raster_csv(tmp_path / "r.csv", 0.5)
    day = (pd.Timestamp("2015-07-01") - pd.Timestamp("1970-01-01")).days
    assert set(back) == {day, STATIC_DATE}
    assert back[day].cells == r.cells


# --------------------------------------------------------------------- IDW


def test_idw_examples():
    assert idw_fill([[0, 0], [5, 5]], [0.7, 9.0], [0, 0]) == 0.7
    assert idw_fill([[-1, 0], [1, 0]], [1.0, 3.0], [0, 0]) == pytest.approx(2.0)
    assert idw_fill([[1, 0], [-2, 0]], [0.0, 3.0], [0, 0]) == pytest.approx(0.6, abs=1e-12)
    with pytest.raises(GeostatError):
        idw_fill(np.empty((0, 2)), [], [0, 0])


def test_idw_uses_only_n_max_nearest():
    known = [[1, 0], [2, 0], [50, 0]]
    assert idw_fill(known, [1.0, 1.0, 100.0], [0, 0], n_max=2) == pytest.approx(1.0)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10**6), st.floats(-50, 50), st.floats(-50, 50))
def test_idw_translation_and_permutation_invariant(seed, dx, dy):
    rng = np.random.default_rng(seed)
    xy, z, t = rng.uniform(0, 10, (12, 2)), rng.normal(size=12), rng.uniform(0, 10, (4, 2))
    base = idw_fill(xy, z, t, n_max=5)
    perm = rng.permutation(12)
    shift = np.array([dx, dy])
    assert np.allclose(idw_fill(xy[perm] + shift, z[perm], t + shift, n_max=5), base, atol=1e-9)
    assert np.all((base >= z.min() - 1e-12) & (base <= z.max() + 1e-12))


def test_haversine_quarter_meridian():
    assert haversine_km([0, 0], [0, 90]) == pytest.approx(np.pi / 2 * 6371.0088, rel=1e-12)
    assert haversine_km([10, 70], [10, 70]) == 0


# --------------------------------------------------------------- variogram


def test_variogram_examples():
    e = empirical_variogram([[0, 0], [1, 0]], [0.0, 2.0], bin_width=1.0, max_dist=5)
    assert len(e) == 1 and e.semivariances[0] == 2 and e.pair_counts[0] == 1
    rng = np.random.default_rng(1)
    e = empirical_variogram(rng.uniform(0, 10, (20, 2)), np.full(20, 3.0))
    assert np.all(e.semivariances == 0)
    far = empirical_variogram([[0, 0], [10, 0]], [0.0, 1.0], bin_width=1.0, max_dist=5)
    assert len(far) == 0


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10**6), st.integers(2, 60), st.floats(0.3, 3.0))
def test_variogram_matches_brute_force(seed, n, w):
    rng = np.random.default_rng(seed)
    xy, z = rng.uniform(0, 10, (n, 2)), rng.normal(size=n)
    e = empirical_variogram(xy, z, bin_width=w, max_dist=7.0)
    c, g, k = brute_variogram(xy, z, w, 7.0)
    assert np.allclose(e.bin_centers, c, rtol=1e-12)
    assert np.allclose(e.semivariances, g, rtol=1e-12)
    assert np.array_equal(e.pair_counts, k)
    assert np.all(e.semivariances >= 0)


def test_duplicated_points_match_brute_force():
    rng = np.random.default_rng(2)
    xy, z = rng.uniform(0, 10, (30, 2)), rng.normal(size=30)
    xy2, z2 = np.vstack([xy, xy]), np.r_[z, z]
    e = empirical_variogram(xy2, z2, bin_width=1.0, max_dist=7.0)
    c, g, k = brute_variogram(xy2, z2, 1.0, 7.0)
    assert np.allclose(e.semivariances, g) and np.array_equal(e.pair_counts, k)
    # each original pair appears four times; 30 zero-distance self pairs join the first bin
    single = empirical_variogram(xy, z, bin_width=1.0, max_dist=7.0)
    assert k.sum() == 4 * single.pair_counts.sum() + 30


@pytest.mark.parametrize("kind", KINDS)
def test_model_shape_properties(kind):
    m = VariogramModel(kind, 0.2, 1.3, 4.0)
    h = np.linspace(0, 12, 2001)
    g = m(h)
    assert g[0] == pytest.approx(0.2)
    assert np.all(np.diff(g) >= -1e-15)
    assert m(1e6) == pytest.approx(1.5, rel=1e-9)


def test_spherical_formula_values():
    assert variogram_value("spherical", 5.0, 0.0, 1.0, 10.0) == pytest.approx(0.6875)
    assert variogram_value("spherical", 12.0, 0.1, 1.0, 10.0) == pytest.approx(1.1)
    assert variogram_value("exponential", 2.0, 0.0, 1.0, 2.0) == pytest.approx(1 - np.exp(-1))
    assert variogram_value("gaussian", 2.0, 0.0, 1.0, 2.0) == pytest.approx(1 - np.exp(-1))


@pytest.mark.parametrize("kind,params", [("spherical", (0.0, 1.0, 10.0)), ("exponential", (0.1, 2.0, 3.0)), ("gaussian", (0.05, 0.8, 4.0))])
def test_fit_round_trip(kind, params):
    h = np.array([1.0, 3.0, 5.0, 7.0, 9.0])
    g = variogram_value(kind, h, *params)
    m = fit_variogram(EmpiricalVariogram(h, g, np.full(5, 100)), kind)
    assert (m.nugget, m.partial_sill, m.range) == pytest.approx(params, abs=1e-6)


def test_fit_flat_and_scaled():
    h = np.arange(1.0, 8.0)
    flat = fit_variogram(EmpiricalVariogram(h, np.full(7, 0.4), np.full(7, 10)), "spherical")
    assert flat.nugget == pytest.approx(0.4, abs=1e-6) and flat.partial_sill == pytest.approx(0, abs=1e-6)
    rng = np.random.default_rng(3)
    g = variogram_value("exponential", h, 0.1, 1.0, 2.5) + rng.normal(0, 0.02, 7)
    a = fit_variogram(EmpiricalVariogram(h, g, np.arange(7) + 5), "exponential")
    b = fit_variogram(EmpiricalVariogram(h, 4 * g, np.arange(7) + 5), "exponential")
    assert b.nugget == pytest.approx(4 * a.nugget, rel=1e-6, abs=1e-9)
    assert b.sill == pytest.approx(4 * a.sill, rel=1e-6)
    assert b.range == pytest.approx(a.range, rel=1e-6)


def test_fit_errors():
    with pytest.raises(VariogramFitError):
        fit_variogram(EmpiricalVariogram(np.array([1.0, 2.0]), np.array([0.1, 0.2]), np.array([3, 3])))
    with pytest.raises(GeostatError):
        VariogramModel("cubic", 0, 1, 1)
    with pytest.raises(GeostatError):
        VariogramModel("spherical", -1, 1, 1)


# ---------------------------------------------------------------- kriging


def test_kriging_examples():
    m = VariogramModel("spherical", 0.0, 1.0, 10.0)
    known = np.array([[0.0, 0.0], [3.0, 1.0], [5.0, 4.0]])
    assert ordinary_krige(known, [1.0, 5.0, 2.0], m, [3.0, 1.0]) == pytest.approx(5.0, abs=1e-8)
    assert ordinary_krige([[2.0, 2.0]], [4.2], m, [0.0, 0.0]) == pytest.approx(4.2)
    val, lam = ordinary_krige([[-1, 0], [1, 0]], [1.0, 3.0], m, [0.0, 0.0], return_weights=True)
    assert val == pytest.approx(2.0, abs=1e-12)
    # direct 3x3 solve
    g1 = m(1.0)
    A = np.array([[0, m(2.0), 1], [m(2.0), 0, 1], [1, 1, 0]])
    sol = np.linalg.solve(A, [g1, g1, 1])
    assert np.allclose(lam, sol[:2], atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10**6), st.sampled_from(KINDS))
def test_kriging_exact_and_weights_sum(seed, kind):
    rng = np.random.default_rng(seed)
    xy, z = rng.uniform(0, 10, (8, 2)), rng.normal(size=8)
    m = VariogramModel(kind, 0.0, 1.0, 6.0)
    for i in range(8):
        assert ordinary_krige(xy, z, m, xy[i]) == pytest.approx(z[i], abs=1e-6)
    lam = kriging_weights(xy, m, rng.uniform(0, 10, 2))
    assert lam.sum() == pytest.approx(1.0, abs=1e-9)


def test_kriging_translation_and_permutation_invariant():
    rng = np.random.default_rng(4)
    xy, z, t = rng.uniform(0, 10, (15, 2)), rng.normal(size=15), rng.uniform(0, 10, (5, 2))
    m = VariogramModel("exponential", 0.1, 1.0, 3.0)
    base = ordinary_krige(xy, z, m, t, n_max=6)
    perm = rng.permutation(15)
    assert np.allclose(ordinary_krige(xy[perm] + 7.5, z[perm], m, t + 7.5, n_max=6), base, atol=1e-9)


def test_kriging_duplicate_locations_regularized():
    m = VariogramModel("spherical", 0.0, 1.0, 10.0)
    val, lam = ordinary_krige([[0, 0], [0, 0]], [1.0, 2.0], m, [1.0, 1.0], return_weights=True)
    assert val == pytest.approx(1.5) and lam.sum() == pytest.approx(1.0)


def test_kriging_singular_system_raises(monkeypatch):
    def fail(*a, **k):
        raise np.linalg.LinAlgError("singular")

    monkeypatch.setattr(np.linalg, "solve", fail)
    m = VariogramModel("spherical", 0.0, 1.0, 10.0)
    with pytest.raises(KrigingError):
        ordinary_krige([[0, 0], [3, 0]], [1.0, 2.0], m, [1.0, 1.0])
    assert issubclass(KrigingError, ArithmeticError)


# ------------------------------------------------------------ collocation


def test_nearest_day_rules():
    assert nearest_day([10, 12], [11], tolerance=1).tolist() == [10]
    assert nearest_day([10, 12], [12, 10], tolerance=0).tolist() == [12, 10]
    with pytest.raises(GeostatError, match="1970-01-12"):
        nearest_day([10, 13], [11], tolerance=0)
    assert nearest_day([STATIC_DATE], [5]).tolist() == [STATIC_DATE]
    assert nearest_day([STATIC_DATE, 3], [3, 9]).tolist() == [3, STATIC_DATE]


def field(day=100, seed=5, hole=(-340, 139)):
    rng = np.random.default_rng(seed)
    ix, iy = np.meshgrid(np.arange(-344, -336), np.arange(135, 143), indexing="ij")
    ix, iy = ix.ravel(), iy.ravel()
    keep = ~((ix == hole[0]) & (iy == hole[1]))
    vals = 0.5 + 0.05 * (ix - ix.mean()) + 0.1 * np.sin(iy) + rng.normal(0, 0.01, ix.size)
    from sogmodel.geostat import DailyRaster

    return DailyRaster(day, 0.5, ix[keep], iy[keep], vals[keep])


def test_collocate_cell_and_kriged_values():
    r = field()
    lon = np.array([-171.75, -169.8])  # first in a populated cell, second in the hole
    lat = np.array([68.25, 69.7])
    vals, how = collocate(lon, lat, np.array([100, 100]), {"icec": {100: r}})
    assert vals["icec"][0] == r.lookup([-344], [136])[0]
    assert how["icec"].tolist() == ["cell", "kriging"]
    # bounded by the neighbours used (brute force nearest 10 cell centres)
    c = r.centers()
    d = haversine_km(np.array([lon[1], lat[1]])[None], c)
    nb = r.values[np.argsort(d)[:10]]
    assert nb.min() <= vals["icec"][1] <= nb.max()
    idw = idw_fill(c, r.values, [lon[1], lat[1]], metric="haversine")
    assert abs(vals["icec"][1] - idw) < 0.1


def test_collocate_missing_date_errors():
    with pytest.raises(GeostatError, match="no raster"):
        collocate([-170.0], [69.0], [150], {"icec": {100: field()}}, CollocationConfig(day_tolerance=0))


def test_collocate_static_field_and_tolerance():
    vals, how = collocate([-171.75, -171.75], [68.25, 68.25], [5, 90], {"bathy": {STATIC_DATE: field()}})
    assert vals["bathy"].nunique() == 1 and set(how["bathy"]) == {"cell"}
    vals, _ = collocate([-171.75], [68.25], [101], {"icec": {100: field(100, 1), 103: field(103, 2)}}, CollocationConfig(day_tolerance=2))
    assert vals["icec"][0] == field(100, 1).lookup([-344], [136])[0]
