"""Collocation of gridded environmental fields with vessel positions: daily
rasterization, inverse-distance gap filling, variogram estimation and
ordinary kriging.

Coordinates are ``(x, y)`` pairs. With ``metric="haversine"`` they are
(lon, lat) degrees and distances are great-circle km; with
``metric="euclidean"`` they are planar and distances are in the same units.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy.optimize import least_squares
from scipy.spatial import cKDTree

log = logging.getLogger(__name__)

EARTH_RADIUS_KM = 6371.0088
METRICS = ("haversine", "euclidean")
KINDS = ("spherical", "exponential", "gaussian")
STATIC_DATE = "static"


class GeostatError(ValueError):
    pass


class KrigingError(GeostatError, ArithmeticError):
    pass


class VariogramFitError(GeostatError, ArithmeticError):
    def __init__(self, msg, residual=None):
        super().__init__(msg if residual is None else f"{msg} (best residual {residual:.6g})")
        self.residual = residual


def _xy(points):
    a = np.asarray(points, dtype=float)
    if a.ndim == 1:
        a = a[None, :]
    if a.shape[-1] != 2:
        raise GeostatError("coordinates must be (x, y) pairs")
    return a


def _check_metric(metric):
    if metric not in METRICS:
        raise GeostatError(f"unknown distance metric {metric!r}")


def haversine_km(a, b):
    """Great-circle distance between (lon, lat) degree arrays, broadcasting."""
    a, b = np.radians(a), np.radians(b)
    dlon = b[..., 0] - a[..., 0]
    dlat = b[..., 1] - a[..., 1]
    h = np.sin(dlat / 2) ** 2 + np.cos(a[..., 1]) * np.cos(b[..., 1]) * np.sin(dlon / 2) ** 2
    return 2 * EARTH_RADIUS_KM * np.arcsin(np.sqrt(np.clip(h, 0.0, 1.0)))


def pairwise_distance(a, b, metric="euclidean"):
    _check_metric(metric)
    a, b = _xy(a), _xy(b)
    if metric == "haversine":
        return haversine_km(a[:, None, :], b[None, :, :])
    return np.sqrt(((a[:, None, :] - b[None, :, :]) ** 2).sum(-1))


def _unit_vectors(lonlat):
    lon, lat = np.radians(lonlat[:, 0]), np.radians(lonlat[:, 1])
    return np.column_stack([np.cos(lat) * np.cos(lon), np.cos(lat) * np.sin(lon), np.sin(lat)])


class _Neighbours:
    """k-nearest lookup; haversine queries go through 3-D chord distance,
    which orders points the same way as great-circle distance."""

    def __init__(self, xy, metric):
        _check_metric(metric)
        self.xy = _xy(xy)
        self.metric = metric
        self.tree = cKDTree(_unit_vectors(self.xy) if metric == "haversine" else self.xy)

    def query(self, targets, k):
        t = _xy(targets)
        k = min(k, len(self.xy))
        _, idx = self.tree.query(_unit_vectors(t) if self.metric == "haversine" else t, k=k)
        idx = np.asarray(idx).reshape(len(t), k)
        # exact distances; re-sort stably so equal distances keep index order
        if self.metric == "haversine":
            d = haversine_km(t[:, None, :], self.xy[idx])
        else:
            d = np.sqrt(((self.xy[idx] - t[:, None, :]) ** 2).sum(-1))
        order = np.lexsort((idx, d), axis=1)
        return np.take_along_axis(d, order, 1), np.take_along_axis(idx, order, 1)


# ------------------------------------------------------------------ rasters


@dataclass(frozen=True)
class DailyRaster:
    """Cell means on a regular grid. ``ix``/``iy`` are integer cell indices
    (cell south-west corner = index * resolution)."""

    date: object
    resolution: float
    ix: np.ndarray
    iy: np.ndarray
    values: np.ndarray
    counts: np.ndarray | None = None
    units: str = ""

    @property
    def cells(self):
        return {(int(a), int(b)): float(v) for a, b, v in zip(self.ix, self.iy, self.values)}

    def __len__(self):
        return len(self.values)

    def centers(self):
        return np.column_stack([(self.ix + 0.5) * self.resolution, (self.iy + 0.5) * self.resolution])

    def lookup(self, ix, iy):
        """Cell values at integer indices; NaN where the cell is empty."""
        ix, iy = np.asarray(ix, dtype=np.int64), np.asarray(iy, dtype=np.int64)
        s = pd.Series(self.values, index=pd.MultiIndex.from_arrays([self.ix, self.iy]))
        return s.reindex(pd.MultiIndex.from_arrays([ix, iy])).to_numpy(dtype=float)


def cell_index(x, resolution):
    return np.floor(np.asarray(x, dtype=float) / resolution + 1e-9).astype(np.int64)


def rasterize_daily(lon, lat, value, resolution=0.5, date=None, units="") -> DailyRaster:
    """Average point samples within grid cells. Non-finite values are skipped."""
    lon, lat, value = (np.atleast_1d(np.asarray(a, dtype=float)) for a in (lon, lat, value))
    if not (lon.shape == lat.shape == value.shape):
        raise GeostatError("lon, lat and value must align")
    ok = np.isfinite(lon) & np.isfinite(lat) & np.isfinite(value)
    if not ok.any():
        raise GeostatError("rasterize_daily needs at least one finite sample")
    if resolution <= 0:
        raise GeostatError("resolution must be positive")
    df = pd.DataFrame({"ix": cell_index(lon[ok], resolution), "iy": cell_index(lat[ok], resolution), "v": value[ok]})
    g = df.groupby(["ix", "iy"], sort=True)["v"].agg(["mean", "size"]).reset_index()
    return DailyRaster(date, resolution, g["ix"].to_numpy(), g["iy"].to_numpy(), g["mean"].to_numpy(), g["size"].to_numpy(), units)


def read_raster_csv(path, resolution=0.5, units=""):
    """Rasters from a ``date,lon_cell,lat_cell,value`` CSV, keyed by day
    index. ``lon_cell``/``lat_cell`` are cell south-west corners in degrees.
    A date of ``static`` marks a field valid on every day."""
    df = pd.read_csv(path, comment="#", dtype={"date": str})
    missing = {"date", "lon_cell", "lat_cell", "value"} - set(df.columns)
    if missing:
        raise GeostatError(f"{path}: missing raster columns {sorted(missing)}")
    if df.empty:
        raise GeostatError(f"{path}: no raster rows")
    out = {}
    for date, sub in df.groupby("date", sort=True):
        key = STATIC_DATE if date == STATIC_DATE else _day_index(date)
        out[key] = DailyRaster(
            key,
            resolution,
            cell_index(sub["lon_cell"].to_numpy(float) + resolution / 2, resolution),
            cell_index(sub["lat_cell"].to_numpy(float) + resolution / 2, resolution),
            sub["value"].to_numpy(float),
            None,
            units,
        )
    return out


def write_raster_rows(raster: DailyRaster, date_label):
    return pd.DataFrame(
        {
            "date": date_label,
            "lon_cell": raster.ix * raster.resolution,
            "lat_cell": raster.iy * raster.resolution,
            "value": raster.values,
        }
    )


def _day_index(date):
    ts = pd.Timestamp(date)
    ts = ts.tz_localize("UTC") if ts.tzinfo is None else ts.tz_convert("UTC")
    return int((ts.normalize() - pd.Timestamp("1970-01-01", tz="UTC")).days)


# --------------------------------------------------------------------- IDW


def idw_fill(known_xy, known_z, target_xy, n_max=10, power=2.0, metric="euclidean"):
    """Inverse-distance weighted estimate at each target from its ``n_max``
    nearest known points. A target at zero distance from a known point takes
    that point's value exactly."""
    kz = np.atleast_1d(np.asarray(known_z, dtype=float))
    kxy = _xy(known_xy)
    if len(kz) == 0:
        raise GeostatError("idw_fill needs at least one known point")
    if len(kxy) != len(kz):
        raise GeostatError("known coordinates and values differ in length")
    scalar = np.asarray(target_xy).ndim == 1
    d, idx = _Neighbours(kxy, metric).query(target_xy, n_max)
    z = kz[idx]
    exact = d[:, 0] == 0
    with np.errstate(divide="ignore"):
        w = np.where(exact[:, None], 0.0, d ** (-power))
    out = np.where(exact, z[:, 0], (w * z).sum(1) / np.where(exact, 1.0, w.sum(1)))
    return float(out[0]) if scalar else out


# --------------------------------------------------------------- variogram


@dataclass(frozen=True)
class EmpiricalVariogram:
    """Binned semivariances. ``bin_centers`` are the mean pair separation in
    each bin; empty bins are dropped."""

    bin_centers: np.ndarray
    semivariances: np.ndarray
    pair_counts: np.ndarray
    bin_edges: np.ndarray = field(default_factory=lambda: np.empty(0))

    def __len__(self):
        return len(self.semivariances)

    def to_frame(self):
        return pd.DataFrame({"distance": self.bin_centers, "gamma": self.semivariances, "pairs": self.pair_counts})


def domain_half_diameter(xy, metric="euclidean"):
    a = _xy(xy)
    lo, hi = a.min(0), a.max(0)
    return float(pairwise_distance(lo, hi, metric)[0, 0]) / 2.0


def empirical_variogram(xy, z, bin_width=None, max_dist=None, metric="euclidean", n_bins=15) -> EmpiricalVariogram:
    """Classical (method-of-moments) semivariogram over all pairs ``i < j``
    with separation ``<= max_dist``.

    Defaults: ``max_dist`` is half the bounding-box diagonal and
    ``bin_width = max_dist / n_bins``. Bin ``k`` holds separations in
    ``[k w, (k+1) w)``; a pair exactly at ``max_dist`` falls in the last bin.
    """
    a = _xy(xy)
    z = np.asarray(z, dtype=float)
    if len(a) != len(z):
        raise GeostatError("coordinates and values differ in length")
    if len(z) < 2:
        raise GeostatError("a variogram needs at least two points")
    if max_dist is None:
        max_dist = domain_half_diameter(a, metric)
    if bin_width is None:
        bin_width = max_dist / n_bins if max_dist > 0 else 1.0
    if bin_width <= 0:
        raise GeostatError("bin_width must be positive")
    i, j = np.triu_indices(len(z), k=1)
    d = pairwise_distance(a, a, metric)[i, j]
    keep = d <= max_dist
    d, sq = d[keep], (z[i[keep]] - z[j[keep]]) ** 2
    nb = max(1, int(np.ceil(max_dist / bin_width - 1e-12)))
    edges = np.arange(nb + 1) * bin_width
    if len(d) == 0:
        return EmpiricalVariogram(np.empty(0), np.empty(0), np.empty(0, dtype=np.int64), edges)
    b = np.minimum((d / bin_width).astype(np.int64), nb - 1)
    cnt = np.bincount(b, minlength=nb)
    sum_sq = np.bincount(b, weights=sq, minlength=nb)
    sum_d = np.bincount(b, weights=d, minlength=nb)
    nz = cnt > 0
    return EmpiricalVariogram(sum_d[nz] / cnt[nz], sum_sq[nz] / (2.0 * cnt[nz]), cnt[nz], edges)


@dataclass(frozen=True)
class VariogramModel:
    """``range`` is the raw scale parameter ``a`` of the formula, not a
    practical range."""

    kind: str
    nugget: float
    partial_sill: float
    range: float

    def __post_init__(self):
        if self.kind not in KINDS:
            raise GeostatError(f"unknown variogram kind {self.kind!r}")
        if self.nugget < 0 or self.partial_sill < 0 or not self.range > 0:
            raise GeostatError("need nugget >= 0, partial_sill >= 0, range > 0")

    @property
    def sill(self):
        return self.nugget + self.partial_sill

    def __call__(self, h):
        return variogram_value(self.kind, np.asarray(h, dtype=float), self.nugget, self.partial_sill, self.range)

    def to_dict(self):
        return {"kind": self.kind, "nugget": self.nugget, "partial_sill": self.partial_sill, "range": self.range}


def variogram_value(kind, h, c0, c, a):
    r = h / a
    if kind == "spherical":
        shape = np.where(r < 1.0, 1.5 * r - 0.5 * r**3, 1.0)
    elif kind == "exponential":
        shape = 1.0 - np.exp(-r)
    elif kind == "gaussian":
        shape = 1.0 - np.exp(-(r**2))
    else:
        raise GeostatError(f"unknown variogram kind {kind!r}")
    return c0 + c * shape


def fit_variogram(emp: EmpiricalVariogram, kind="spherical") -> VariogramModel:
    """Weighted least squares, weights = pair counts, over (nugget,
    partial_sill, range) from several starting points."""
    if kind not in KINDS:
        raise GeostatError(f"unknown variogram kind {kind!r}")
    h = np.asarray(emp.bin_centers, dtype=float)
    g = np.asarray(emp.semivariances, dtype=float)
    w = np.sqrt(np.asarray(emp.pair_counts, dtype=float))
    if len(h) < 3:
        raise VariogramFitError(f"need at least 3 non-empty bins, got {len(h)}")
    if not (np.all(np.isfinite(g)) and np.all(np.isfinite(h))):
        raise VariogramFitError("non-finite empirical variogram")
    gmax = float(g.max())
    hmax = float(h.max())
    if hmax <= 0:
        raise VariogramFitError("all bins at zero separation")
    # work in units of (gmax, hmax) so the fit is scale-free
    gs = g / gmax if gmax > 0 else g
    hs = h / hmax

    def resid(p):
        return w * (variogram_value(kind, hs, p[0], p[1], p[2]) - gs)

    lower, upper = [0.0, 0.0, 1e-6], [np.inf, np.inf, 1e3]
    g0 = float(gs.min())
    starts = [(c0, max(1.0 - c0, 1e-3), a) for c0 in (0.0, g0) for a in (0.1, 0.5, 1.0)]
    best = None
    for s in starts:
        try:
            res = least_squares(resid, s, bounds=(lower, upper), method="trf", xtol=1e-15, ftol=1e-15, gtol=1e-15, max_nfev=2000)
        except (ValueError, np.linalg.LinAlgError):
            continue
        cost = float(np.sum(res.fun**2))
        if best is None or cost < best[0] - 1e-14 * max(1.0, cost):
            best = (cost, res.x)
    if best is None or not np.all(np.isfinite(best[1])):
        raise VariogramFitError("variogram optimizer failed", None if best is None else best[0])
    c0, c, a = best[1]
    # a structured part that is already at its sill at every lag is
    # indistinguishable from nugget; report it as such
    if c > 0 and np.all(np.abs(variogram_value(kind, hs, 0.0, c, a) - c) <= 1e-9 * max(c, 1.0)):
        c0, c = c0 + c, 0.0
    scale = gmax if gmax > 0 else 1.0
    return VariogramModel(kind, float(c0 * scale), float(c * scale), float(a * hmax))


# ---------------------------------------------------------------- kriging


def _kriging_system(gam_kk, gam_k0):
    m = gam_kk.shape[-1]
    A = np.zeros(gam_kk.shape[:-2] + (m + 1, m + 1))
    A[..., :m, :m] = gam_kk
    A[..., :m, m] = 1.0
    A[..., m, :m] = 1.0
    rhs = np.concatenate([gam_k0, np.ones(gam_k0.shape[:-1] + (1,))], axis=-1)
    return A, rhs


def _solve_one(gam_kk, gam_k0):
    A, rhs = _kriging_system(gam_kk, gam_k0)
    m = len(gam_k0)
    jitter = 1e-10 * float(np.mean(np.abs(gam_kk))) if m > 1 else 0.0
    for attempt in range(2):
        try:
            sol = np.linalg.solve(A, rhs)
        except np.linalg.LinAlgError:
            sol = None
        if sol is not None and np.all(np.isfinite(sol)) and abs(sol[:m].sum() - 1.0) <= 1e-9:
            return sol[:m]
        if attempt == 0:
            A = A.copy()
            A[np.arange(m), np.arange(m)] += jitter if jitter > 0 else 1e-10
    raise KrigingError("ordinary kriging system is singular")


def kriging_weights(neigh_xy, model: VariogramModel, target_xy, metric="euclidean"):
    """Weights of the ordinary kriging estimator at one target."""
    p = _xy(neigh_xy)
    dkk = pairwise_distance(p, p, metric)
    dk0 = pairwise_distance(p, target_xy, metric)[:, 0]
    # semivariance at zero separation is zero; the nugget is a jump away from 0
    gkk = np.where(dkk == 0, 0.0, model(dkk))
    gk0 = np.where(dk0 == 0, 0.0, model(dk0))
    return _solve_one(gkk, gk0)


def ordinary_krige(known_xy, known_z, model: VariogramModel, target_xy, n_max=10, metric="euclidean", return_weights=False):
    """Ordinary kriging from the ``n_max`` nearest known points.

    Raises KrigingError when the system stays singular after one jitter.
    """
    kxy = _xy(known_xy)
    kz = np.atleast_1d(np.asarray(known_z, dtype=float))
    if len(kz) == 0:
        raise GeostatError("kriging needs at least one known point")
    if len(kxy) != len(kz):
        raise GeostatError("known coordinates and values differ in length")
    scalar = np.asarray(target_xy).ndim == 1
    t = _xy(target_xy)
    _, idx = _Neighbours(kxy, metric).query(t, n_max)
    out = np.empty(len(t))
    weights = []
    for i in range(len(t)):
        lam = kriging_weights(kxy[idx[i]], model, t[i], metric)
        out[i] = lam @ kz[idx[i]]
        weights.append(lam)
    if return_weights:
        return (out[0], weights[0]) if scalar else (out, weights)
    return float(out[0]) if scalar else out


# ------------------------------------------------------------ collocation


@dataclass
class VariableSpec:
    kind: str = "spherical"
    n_max: int = 10
    power: float = 2.0


@dataclass
class CollocationConfig:
    variables: dict = field(default_factory=dict)
    day_tolerance: int = 0
    metric: str = "haversine"
    resolution: float = 0.5
    n_bins: int = 15

    def spec(self, name):
        v = self.variables.get(name, VariableSpec())
        return v if isinstance(v, VariableSpec) else VariableSpec(**v)


def nearest_day(available, days, tolerance=0):
    """Map each requested day to the nearest available day; ties go to the
    earlier day. Raises with the offending dates when none is in tolerance."""
    avail = np.array(sorted(d for d in available if d != STATIC_DATE), dtype=np.int64)
    days = np.asarray(days, dtype=np.int64)
    if STATIC_DATE in available:
        if len(avail) == 0:
            return np.full(len(days), STATIC_DATE, dtype=object)
        return _nearest(avail, days, tolerance, allow_static=True)
    if len(avail) == 0:
        raise GeostatError("no rasters available")
    return _nearest(avail, days, tolerance)


def _nearest(avail, days, tolerance, allow_static=False):
    pos = np.searchsorted(avail, days)
    lo = avail[np.clip(pos - 1, 0, len(avail) - 1)]
    hi = avail[np.clip(pos, 0, len(avail) - 1)]
    pick = np.where(np.abs(days - lo) <= np.abs(hi - days), lo, hi)
    bad = np.abs(pick - days) > tolerance
    out = pick.astype(object)
    if bad.any():
        if allow_static:
            out[bad] = STATIC_DATE
        else:
            dates = sorted({str(pd.Timestamp(int(d), unit="D").date()) for d in days[bad]})
            raise GeostatError(f"no raster within {tolerance} day(s) of: {', '.join(dates)}")
    return out


def _fill_field(raster: DailyRaster, extra_ix, extra_iy, n_max, power, metric):
    """Populated cells plus IDW-filled empty cells over the bounding box of
    the raster and the requested cells."""
    ix_lo = min(raster.ix.min(), extra_ix.min())
    ix_hi = max(raster.ix.max(), extra_ix.max())
    iy_lo = min(raster.iy.min(), extra_iy.min())
    iy_hi = max(raster.iy.max(), extra_iy.max())
    gx, gy = np.meshgrid(np.arange(ix_lo, ix_hi + 1), np.arange(iy_lo, iy_hi + 1), indexing="ij")
    gx, gy = gx.ravel(), gy.ravel()
    vals = raster.lookup(gx, gy)
    res = raster.resolution
    centers = np.column_stack([(gx + 0.5) * res, (gy + 0.5) * res])
    empty = np.isnan(vals)
    if empty.any():
        vals[empty] = idw_fill(raster.centers(), raster.values, centers[empty], n_max, power, metric)
    return centers, vals


def _interpolate_missing(raster, xy, cx, cy, spec: VariableSpec, cfg: CollocationConfig):
    """Kriged values at positions in empty cells, clipped to the range of
    the neighbours used; IDW where the variogram or kriging fails."""
    centers, vals = _fill_field(raster, cx, cy, spec.n_max, spec.power, cfg.metric)
    method = np.full(len(xy), "kriging", dtype=object)
    try:
        emp = empirical_variogram(centers, vals, metric=cfg.metric, n_bins=cfg.n_bins)
        model = fit_variogram(emp, spec.kind)
    except GeostatError as exc:
        log.info("variogram fit failed on day %s (%s); using IDW", raster.date, exc)
        return idw_fill(centers, vals, xy, spec.n_max, spec.power, cfg.metric), np.full(len(xy), "idw", dtype=object)
    _, idx = _Neighbours(centers, cfg.metric).query(xy, spec.n_max)
    out = np.empty(len(xy))
    for i in range(len(xy)):
        nb = vals[idx[i]]
        try:
            lam = kriging_weights(centers[idx[i]], model, xy[i], cfg.metric)
            out[i] = np.clip(lam @ nb, nb.min(), nb.max())
        except KrigingError:
            out[i] = idw_fill(centers[idx[i]], nb, xy[i], spec.n_max, spec.power, cfg.metric)
            method[i] = "idw"
    return out, method


def collocate(lon, lat, day, fields: dict, config: CollocationConfig | None = None):
    """Environmental value per record and variable.

    ``fields`` maps variable name to ``{day_index or "static": DailyRaster}``.
    Records in a populated cell take the cell value; otherwise the day's
    field is IDW-filled and kriged at the record position.

    Returns ``(values, methods)``: DataFrames with one column per variable,
    the second naming the route taken (``cell``, ``kriging`` or ``idw``).
    """
    cfg = config or CollocationConfig()
    _check_metric(cfg.metric)
    lon, lat = np.asarray(lon, dtype=float), np.asarray(lat, dtype=float)
    day = np.asarray(day, dtype=np.int64)
    if not (lon.shape == lat.shape == day.shape):
        raise GeostatError("lon, lat and day must align")
    xy = np.column_stack([lon, lat])
    values, methods = {}, {}
    for name in sorted(fields):
        rasters = fields[name]
        spec = cfg.spec(name)
        matched = nearest_day(rasters.keys(), day, cfg.day_tolerance)
        out = np.full(len(lon), np.nan)
        how = np.empty(len(lon), dtype=object)
        for key in sorted(set(matched.tolist()), key=str):
            rows = np.nonzero(matched == key)[0]
            r = rasters[key]
            cx, cy = cell_index(lon[rows], r.resolution), cell_index(lat[rows], r.resolution)
            v = r.lookup(cx, cy)
            hit = ~np.isnan(v)
            out[rows[hit]] = v[hit]
            how[rows[hit]] = "cell"
            miss = rows[~hit]
            if len(miss):
                vv, mm = _interpolate_missing(r, xy[miss], cx[~hit], cy[~hit], spec, cfg)
                out[miss] = vv
                how[miss] = mm
        values[name] = out
        methods[name] = how
    return pd.DataFrame(values), pd.DataFrame(methods)
