"""AIS records, environmental samples and the covariate/grouping encoding.

Tables are pandas DataFrames with the ingest column names::

    mmsi, timestamp, lon, lat, sog, cog, vessel_group, nav_status,
    icec, u10, v10, bathy, dist_to_coast

The encoder turns them into a dense ``(n, 10)`` float matrix whose columns
follow :data:`sogmodel.FEATURE_NAMES` and an ``(n, 3)`` integer matrix of
vessel / grid-cell / day group codes.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from . import FEATURE_NAMES

AIS_COLUMNS = ("mmsi", "timestamp", "lon", "lat", "sog", "cog", "vessel_group", "nav_status")
ENV_COLUMNS = ("icec", "u10", "v10", "bathy", "dist_to_coast")
CONTINUOUS = (
    "icec",
    "wind_along",
    "wind_cross",
    "dist_to_coast",
    "bathy",
    "cog_sin",
    "cog_cos",
    "delta_cog",
)

UNKNOWN_CATEGORY = 0
UNSEEN_GROUP = -1
_CELL_OFFSET = 1 << 19


class FeatureError(ValueError):
    """Invalid AIS or covariate input."""


def _finite(*arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise FeatureError("non-finite input")


def derive_wind_components(u10, v10, cog):
    """Rotate (u10, v10) into the vessel frame.

    ``along`` is the projection on the heading unit vector
    ``(sin cog, cos cog)`` in the east/north frame, so a tailwind is positive.
    ``cross`` is positive for wind blowing from port toward starboard.
    """
    u10 = np.asarray(u10, dtype=float)
    v10 = np.asarray(v10, dtype=float)
    cog = np.asarray(cog, dtype=float)
    _finite(u10, v10, cog)
    rad = np.deg2rad(cog)
    s, c = np.sin(rad), np.cos(rad)
    along = u10 * s + v10 * c
    cross = u10 * c - v10 * s
    return along, cross


def delta_cog(prev_cog, curr_cog):
    """Absolute circular change in course, in degrees within [0, 180]."""
    prev_cog = np.asarray(prev_cog, dtype=float)
    curr_cog = np.asarray(curr_cog, dtype=float)
    _finite(prev_cog, curr_cog)
    return np.abs(np.mod(curr_cog - prev_cog + 180.0, 360.0) - 180.0)


def encode_cog(cog):
    rad = np.deg2rad(np.asarray(cog, dtype=float))
    return np.sin(rad), np.cos(rad)


def assign_grid_cell(lon, lat, resolution=0.5, bounds=None):
    """Integer cell indices ``(floor(lon/res), floor(lat/res))``.

    Cells are closed on their lower (south/west) edge. ``bounds`` is
    ``(lon_min, lon_max, lat_min, lat_max)``; anything outside it, or outside
    the valid globe, raises :class:`FeatureError`.
    """
    if resolution <= 0:
        raise FeatureError("resolution must be positive")
    lon = np.asarray(lon, dtype=float)
    lat = np.asarray(lat, dtype=float)
    _finite(lon, lat)
    lo = (-180.0, 180.0, -90.0, 90.0) if bounds is None else bounds
    bad = (lon < lo[0]) | (lon > lo[1]) | (lat < lo[2]) | (lat > lo[3])
    if np.any(bad):
        raise FeatureError(f"{int(np.sum(bad))} coordinate(s) outside bounds {tuple(lo)}")
    # the small nudge keeps exact edge values (e.g. 0.3/0.1) on the closed side
    ix = np.floor(lon / resolution + 1e-9).astype(np.int64)
    iy = np.floor(lat / resolution + 1e-9).astype(np.int64)
    return ix, iy


def cell_key(ix, iy):
    """Pack a cell index pair into one sortable int64."""
    return ((np.asarray(ix, dtype=np.int64) + _CELL_OFFSET) << 20) | (
        np.asarray(iy, dtype=np.int64) + _CELL_OFFSET
    )


def cell_from_key(key):
    key = np.asarray(key, dtype=np.int64)
    return (key >> 20) - _CELL_OFFSET, (key & ((1 << 20) - 1)) - _CELL_OFFSET


def parse_timestamps(values) -> pd.Series:
    try:
        ts = pd.to_datetime(pd.Series(values).reset_index(drop=True), utc=True)
    except (ValueError, TypeError) as exc:
        raise FeatureError(f"unparseable timestamp: {exc}") from exc
    if ts.isna().any():
        raise FeatureError("missing timestamp")
    return ts


def assign_time_id(timestamp):
    """Whole UTC days since 1970-01-01."""
    scalar = np.ndim(timestamp) == 0 and not isinstance(timestamp, pd.Series)
    ts = parse_timestamps([timestamp] if scalar else timestamp)
    days = ((ts - pd.Timestamp("1970-01-01", tz="UTC")) // pd.Timedelta(days=1)).to_numpy(dtype=np.int64)
    return int(days[0]) if scalar else days


@dataclass(frozen=True)
class Standardizer:
    columns: tuple
    mean: np.ndarray
    sd: np.ndarray

    def transform(self, table):
        return (np.asarray(table, dtype=float) - self.mean) / self.sd

    def inverse_transform(self, table):
        return np.asarray(table, dtype=float) * self.sd + self.mean

    def to_dict(self):
        return {"columns": list(self.columns), "mean": self.mean.tolist(), "sd": self.sd.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(d["columns"]), np.array(d["mean"], dtype=float), np.array(d["sd"], dtype=float))


def fit_standardizer(rows, columns=CONTINUOUS) -> Standardizer:
    """Column mean and population standard deviation."""
    rows = np.asarray(rows, dtype=float)
    if rows.ndim != 2 or rows.shape[0] < 2:
        raise FeatureError("need at least two rows to standardize")
    _finite(rows)
    mean = rows.mean(axis=0)
    sd = rows.std(axis=0)
    for name, s, col in zip(columns, sd, rows.T):
        if s == 0 or np.all(col == col[0]):
            raise FeatureError(f"column {name!r} is constant; cannot standardize")
    return Standardizer(tuple(columns), mean, sd)


@dataclass(frozen=True)
class CategoryVocab:
    """Categorical levels coded 1..K; 0 is reserved for unseen levels."""

    levels: np.ndarray

    @classmethod
    def fit(cls, values):
        return cls(np.unique(np.asarray(values).astype(str)))

    def transform(self, values):
        v = np.asarray(values).astype(str)
        if len(self.levels) == 0:
            return np.zeros(len(v), dtype=np.int64)
        pos = np.searchsorted(self.levels, v)
        pos = np.minimum(pos, len(self.levels) - 1)
        hit = self.levels[pos] == v
        return np.where(hit, pos + 1, UNKNOWN_CATEGORY).astype(np.int64)

    def labels(self, codes):
        lab = np.concatenate([["<unknown>"], self.levels])
        return lab[np.asarray(codes)]


@dataclass(frozen=True)
class GroupVocab:
    """Dense 0..q-1 codes for grouping keys; unseen keys map to -1."""

    levels: np.ndarray

    @classmethod
    def fit(cls, keys):
        return cls(np.unique(np.asarray(keys)))

    def __len__(self):
        return len(self.levels)

    def transform(self, keys):
        k = np.asarray(keys)
        if len(self.levels) == 0:
            return np.full(len(k), UNSEEN_GROUP, dtype=np.int64)
        pos = np.minimum(np.searchsorted(self.levels, k), len(self.levels) - 1)
        return np.where(self.levels[pos] == k, pos, UNSEEN_GROUP).astype(np.int64)


def validate_records(df: pd.DataFrame) -> pd.DataFrame:
    missing = [c for c in AIS_COLUMNS if c not in df.columns]
    if missing:
        raise FeatureError(f"missing AIS column(s): {', '.join(missing)}")
    if len(df) == 0:
        raise FeatureError("no AIS records")
    out = df.copy()
    out["mmsi"] = out["mmsi"].astype(str)
    out["vessel_group"] = out["vessel_group"].astype(str)
    for col in ("lon", "lat", "sog", "cog"):
        out[col] = pd.to_numeric(out[col], errors="coerce")
        if out[col].isna().any():
            raise FeatureError(f"non-numeric or missing values in {col!r}")
    out["nav_status"] = pd.to_numeric(out["nav_status"], errors="coerce")
    if out["nav_status"].isna().any():
        raise FeatureError("non-numeric or missing values in 'nav_status'")
    out["nav_status"] = out["nav_status"].astype(np.int64)
    if ((out["nav_status"] < 0) | (out["nav_status"] > 15)).any():
        raise FeatureError("nav_status outside 0..15")
    if (out["sog"] < 0).any():
        raise FeatureError("negative SOG")
    out["cog"] = np.mod(out["cog"].to_numpy(dtype=float), 360.0)
    out["timestamp"] = parse_timestamps(out["timestamp"]).set_axis(out.index)
    return out


def validate_env(df: pd.DataFrame) -> pd.DataFrame:
    missing = [c for c in ENV_COLUMNS if c not in df.columns]
    if missing:
        raise FeatureError(f"missing environmental column(s): {', '.join(missing)}")
    out = df[list(ENV_COLUMNS)].apply(pd.to_numeric, errors="coerce")
    if out.isna().any().any():
        raise FeatureError("missing environmental values")
    if ((out["icec"] < 0) | (out["icec"] > 1)).any():
        raise FeatureError("icec outside [0, 1]")
    if (out["dist_to_coast"] < 0).any():
        raise FeatureError("negative distance to coast")
    return out


def vessel_order(records: pd.DataFrame) -> np.ndarray:
    """Row order sorted by vessel then time; remaining ties broken by content
    so the result does not depend on the input order."""
    ts = (pd.to_datetime(records["timestamp"], utc=True) - pd.Timestamp("1970-01-01", tz="UTC")).dt.total_seconds().to_numpy()
    keys = (
        records["lat"].to_numpy(),
        records["lon"].to_numpy(),
        records["cog"].to_numpy(),
        ts,
        records["mmsi"].astype(str).to_numpy(),
    )
    return np.lexsort(keys)


def raw_covariates(records: pd.DataFrame, env: pd.DataFrame) -> np.ndarray:
    """Unscaled continuous covariates in :data:`CONTINUOUS` order.

    A vessel's first observation gets a course change of 0.
    """
    cog = records["cog"].to_numpy(dtype=float)
    along, cross = derive_wind_components(env["u10"].to_numpy(), env["v10"].to_numpy(), cog)
    sin_c, cos_c = encode_cog(cog)

    order = vessel_order(records)
    mmsi = records["mmsi"].astype(str).to_numpy()[order]
    cog_sorted = cog[order]
    dcog_sorted = np.zeros(len(order))
    same = np.zeros(len(order), dtype=bool)
    same[1:] = mmsi[1:] == mmsi[:-1]
    dcog_sorted[1:] = delta_cog(cog_sorted[:-1], cog_sorted[1:])
    dcog_sorted[~same] = 0.0
    dcog = np.empty_like(dcog_sorted)
    dcog[order] = dcog_sorted

    return np.column_stack(
        [
            env["icec"].to_numpy(dtype=float),
            along,
            cross,
            env["dist_to_coast"].to_numpy(dtype=float),
            env["bathy"].to_numpy(dtype=float),
            sin_c,
            cos_c,
            dcog,
        ]
    )


def mean_impute(df: pd.DataFrame, columns, by="vessel_group") -> pd.DataFrame:
    """Fill NaNs in ``columns`` with the mean of the row's ``by`` group, then
    with the column mean for groups that are entirely missing."""
    out = df.copy()
    for col in columns:
        vals = pd.to_numeric(out[col], errors="coerce")
        filled = vals.fillna(vals.groupby(out[by]).transform("mean"))
        out[col] = filled.fillna(vals.mean())
    return out


@dataclass
class FeatureSet:
    X: np.ndarray
    groups: np.ndarray
    sog: np.ndarray
    feature_names: tuple = FEATURE_NAMES


@dataclass
class FeatureEncoder:
    """Standardizer plus frozen vocabularies, fitted on training rows only."""

    resolution: float = 0.5
    standardizer: Standardizer | None = None
    vessel_groups: CategoryVocab | None = None
    statuses: CategoryVocab | None = None
    group_vocabs: dict = field(default_factory=dict)

    def fit(self, records: pd.DataFrame, env: pd.DataFrame) -> "FeatureEncoder":
        records = validate_records(records)
        env = validate_env(env)
        self.standardizer = fit_standardizer(raw_covariates(records, env))
        self.vessel_groups = CategoryVocab.fit(records["vessel_group"])
        self.statuses = CategoryVocab.fit(records["nav_status"])
        keys = self.group_keys(records)
        self.group_vocabs = {name: GroupVocab.fit(k) for name, k in keys.items()}
        return self

    def group_keys(self, records: pd.DataFrame) -> dict:
        ix, iy = assign_grid_cell(records["lon"], records["lat"], self.resolution)
        return {
            "mmsi": records["mmsi"].astype(str).to_numpy(),
            "cell": cell_key(ix, iy),
            "time": assign_time_id(records["timestamp"]),
        }

    def transform(self, records: pd.DataFrame, env: pd.DataFrame) -> FeatureSet:
        if self.standardizer is None:
            raise FeatureError("encoder is not fitted")
        records = validate_records(records)
        env = validate_env(env)
        if len(records) != len(env):
            raise FeatureError("records and environmental samples are not aligned")
        cont = self.standardizer.transform(raw_covariates(records, env))
        X = np.column_stack(
            [
                cont,
                self.vessel_groups.transform(records["vessel_group"]),
                self.statuses.transform(records["nav_status"]),
            ]
        ).astype(float)
        keys = self.group_keys(records)
        groups = np.column_stack([self.group_vocabs[n].transform(keys[n]) for n in ("mmsi", "cell", "time")])
        return FeatureSet(X, groups, records["sog"].to_numpy(dtype=float))

    def to_dict(self):
        return {
            "resolution": self.resolution,
            "standardizer": self.standardizer.to_dict(),
            "vessel_groups": self.vessel_groups.levels.tolist(),
            "statuses": self.statuses.levels.tolist(),
            "groups": {n: v.levels.tolist() for n, v in self.group_vocabs.items()},
        }

    @classmethod
    def from_dict(cls, d):
        vocabs = {}
        for name, levels in d["groups"].items():
            arr = np.array(levels, dtype=str if name == "mmsi" else np.int64)
            vocabs[name] = GroupVocab(arr)
        return cls(
            resolution=d["resolution"],
            standardizer=Standardizer.from_dict(d["standardizer"]),
            vessel_groups=CategoryVocab(np.array(d["vessel_groups"], dtype=str)),
            statuses=CategoryVocab(np.array(d["statuses"], dtype=str)),
            group_vocabs=vocabs,
        )


def build_feature_matrix(records, env, encoder: FeatureEncoder | None = None):
    """Encode records into a :class:`FeatureSet`; fits a new encoder when none
    is supplied. Returns ``(feature_set, encoder)``."""
    if encoder is None:
        encoder = FeatureEncoder().fit(records, env)
    return encoder.transform(records, env), encoder


def filter_study_window(records: pd.DataFrame, bounds=None, months=None) -> pd.DataFrame:
    """Rows inside ``bounds = (lon_min, lon_max, lat_min, lat_max)``
    (closed-lower, open-upper) and the given calendar months."""
    keep = np.ones(len(records), dtype=bool)
    if bounds is not None:
        lo_lon, hi_lon, lo_lat, hi_lat = bounds
        lon, lat = records["lon"].to_numpy(float), records["lat"].to_numpy(float)
        keep &= (lon >= lo_lon) & (lon < hi_lon) & (lat >= lo_lat) & (lat < hi_lat)
    if months is not None:
        m = pd.to_datetime(records["timestamp"], utc=True).dt.month.to_numpy()
        keep &= np.isin(m, list(months))
    return records.loc[keep]


def composition_table(records: pd.DataFrame, column: str) -> pd.DataFrame:
    """Counts of ``column`` levels within each SOG class (zero / positive)
    with the percentage of the class total."""
    sog_class = np.where(records["sog"].to_numpy(float) > 0, "positive", "zero")
    df = pd.DataFrame({"category": records[column].astype(str).to_numpy(), "sog_class": sog_class})
    counts = df.groupby(["sog_class", "category"], sort=True).size().rename("count").reset_index()
    totals = counts.groupby("sog_class")["count"].transform("sum")
    counts["percent"] = 100.0 * counts["count"] / totals
    counts.insert(0, "variable", column)
    return counts
