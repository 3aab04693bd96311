"""Synthetic AIS traffic with known latent structure.

Covariate generators (none is fitted to real traffic):

* distance to coast: log-uniform on [0.1, 300] km
* ice concentration: with probability ``ice_open_fraction`` uniform on
  [0, 0.02], otherwise Beta(4, 1.5)
* winds: independent N(0, 4^2) m/s for u10 and v10
* bathymetry: log-normal, log-mean 4.0, log-sd 0.8 (metres)
* course: uniform on [0, 360)

Vessel, cell and day are drawn uniformly and independently, so the three
random-effect factors are fully crossed. Each stage gets its own draw of
group effects with the configured variances.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy.special import ndtr

from .features import delta_cog, derive_wind_components, vessel_order
from .metrics import roc_auc

STUDY_BOUNDS = (-172.0, -138.0, 66.6, 72.5)

VESSEL_GROUPS = ("Tug/Tow", "Cargo", "Other", "Fishing", "Tanker", "Passenger")
VESSEL_GROUP_PROBS = (0.45, 0.2, 0.15, 0.1, 0.05, 0.05)
STATUSES = (0, 1, 3, 5, 15)
STATUS_PROBS = (0.6, 0.1, 0.1, 0.1, 0.1)

_GROUP_CLS = {"Tug/Tow": -0.3, "Cargo": 0.3, "Other": 0.0, "Fishing": 0.1, "Tanker": 0.2, "Passenger": 0.4}
_GROUP_REG = {"Tug/Tow": -0.2, "Cargo": 0.3, "Other": 0.0, "Fishing": -0.1, "Tanker": 0.2, "Passenger": 0.5}
_STATUS_CLS = {0: 0.4, 1: -0.6, 3: 0.0, 5: -0.9, 15: -0.2}

# named latent mean terms; each maps the raw covariate table to an array
MEAN_TERMS = {
    "flat": lambda c: np.zeros(len(c["dist_to_coast"])),
    "dist_saturating": lambda c: 2.0 * (1.0 - np.exp(-c["dist_to_coast"] / 10.0)) - 1.0,
    "dcog_decay": lambda c: -1.2 * (1.0 - np.exp(-c["delta_cog"] / 20.0)),
    "bathy_log": lambda c: 0.3 * (np.log(c["bathy"]) - 4.0),
    "ice_linear": lambda c: -0.8 * c["icec"],
    "wind_along": lambda c: 0.04 * c["wind_along"],
    "vessel_group": lambda c: np.vectorize(_GROUP_CLS.get)(c["vessel_group"]).astype(float),
    "status": lambda c: np.vectorize(_STATUS_CLS.get)(c["nav_status"]).astype(float),
    "dist_speed": lambda c: 1.5 * (1.0 - np.exp(-c["dist_to_coast"] / 20.0)),
    "ice_slowdown": lambda c: -1.0 * c["icec"] ** 2,
    "vessel_group_speed": lambda c: np.vectorize(_GROUP_REG.get)(c["vessel_group"]).astype(float),
    "dcog_speed": lambda c: -0.6 * (1.0 - np.exp(-c["delta_cog"] / 30.0)),
}


class SynthError(ValueError):
    pass


@dataclass(frozen=True)
class SynthConfig:
    n: int = 20000
    q_mmsi: int = 100
    q_cell: int = 80
    q_time: int = 120
    var_mmsi: float = 0.5
    var_cell: float = 0.3
    var_time: float = 0.2
    var_e: float = 0.25
    zero_prevalence: float = 0.53
    cls_terms: tuple = ("dist_saturating", "dcog_decay", "bathy_log", "ice_linear", "vessel_group", "status")
    reg_terms: tuple = ("dist_speed", "ice_slowdown", "wind_along", "vessel_group_speed", "dcog_speed")
    reg_intercept: float = 2.0
    ice_open_fraction: float = 0.45
    start_year: int = 2010
    resolution: float = 0.5
    bounds: tuple = STUDY_BOUNDS
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.zero_prevalence < 1:
            raise SynthError("zero_prevalence must lie in (0, 1)")
        if min(self.var_mmsi, self.var_cell, self.var_time, self.var_e) < 0:
            raise SynthError("variances must be nonnegative")
        if min(self.q_mmsi, self.q_cell, self.q_time) < 2:
            raise SynthError("each group factor needs at least two levels")
        if self.n < 1:
            raise SynthError("n must be positive")
        for t in (*self.cls_terms, *self.reg_terms):
            if t not in MEAN_TERMS:
                raise SynthError(f"unknown mean term {t!r}")

    @property
    def variances(self):
        return (self.var_mmsi, self.var_cell, self.var_time)


@dataclass
class SynthTruth:
    cls_latent: np.ndarray
    bayes_prob: np.ndarray
    reg_latent: np.ndarray
    reg_response: np.ndarray
    cls_effects: dict = field(default_factory=dict)
    reg_effects: dict = field(default_factory=dict)
    codes: np.ndarray | None = None
    cls_intercept: float = 0.0

    def to_frame(self):
        return pd.DataFrame(
            {
                "row_id": np.arange(len(self.cls_latent)),
                "cls_latent": self.cls_latent,
                "bayes_prob": self.bayes_prob,
                "reg_latent": self.reg_latent,
                "reg_response": self.reg_response,
            }
        )


def _rng(seed, stream):
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, stream])))


def _cells(cfg: SynthConfig):
    lo_lon, hi_lon, lo_lat, hi_lat = cfg.bounds
    res = cfg.resolution
    ix = np.arange(int(np.ceil(lo_lon / res - 1e-9)), int(np.floor(hi_lon / res + 1e-9)))
    iy = np.arange(int(np.ceil(lo_lat / res - 1e-9)), int(np.floor(hi_lat / res + 1e-9)))
    grid = np.array([(a, b) for a in ix for b in iy], dtype=np.int64)
    if len(grid) < cfg.q_cell:
        raise SynthError(f"only {len(grid)} whole cells fit in the bounds; q_cell={cfg.q_cell}")
    return grid


def _season_days(cfg: SynthConfig):
    days = []
    year = cfg.start_year
    while len(days) < cfg.q_time:
        days.extend(pd.date_range(f"{year}-07-01", f"{year}-10-31", freq="D", tz="UTC"))
        year += 1
    return pd.DatetimeIndex(days[: cfg.q_time])


def _solve_intercept(base, target_pos, max_tries=4):
    lo, hi = -20.0, 20.0
    for _ in range(max_tries):
        f_lo, f_hi = ndtr(base + lo).mean(), ndtr(base + hi).mean()
        if f_lo <= target_pos <= f_hi:
            break
        lo, hi = 2 * lo, 2 * hi
    else:
        raise SynthError("cannot reach the requested prevalence with these mean functions")
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if ndtr(base + mid).mean() < target_pos:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def generate(cfg: SynthConfig = SynthConfig()):
    """Returns ``(records, env, truth)``; identical for identical configs."""
    n = cfg.n
    r_struct, r_cov, r_eff, r_out = (_rng(cfg.seed, s) for s in range(4))

    grid = _cells(cfg)
    cells = grid[np.sort(r_struct.choice(len(grid), size=cfg.q_cell, replace=False))]
    days = _season_days(cfg)
    vessel_group = np.array(VESSEL_GROUPS)[r_struct.choice(len(VESSEL_GROUPS), size=cfg.q_mmsi, p=VESSEL_GROUP_PROBS)]

    g_mmsi = r_struct.integers(0, cfg.q_mmsi, n)
    g_cell = r_struct.integers(0, cfg.q_cell, n)
    g_time = r_struct.integers(0, cfg.q_time, n)
    codes = np.column_stack([g_mmsi, g_cell, g_time])

    res = cfg.resolution
    lon = (cells[g_cell, 0] + r_struct.uniform(0, 1, n)) * res
    lat = (cells[g_cell, 1] + r_struct.uniform(0, 1, n)) * res
    lon = np.clip(lon, cfg.bounds[0], cfg.bounds[1])
    lat = np.clip(lat, cfg.bounds[2], cfg.bounds[3])
    secs = r_struct.integers(0, 86400, n)
    ts = days[g_time] + pd.to_timedelta(secs, unit="s")
    status = np.array(STATUSES)[r_struct.choice(len(STATUSES), size=n, p=STATUS_PROBS)]

    dist = np.exp(r_cov.uniform(np.log(0.1), np.log(300.0), n))
    open_water = r_cov.uniform(size=n) < cfg.ice_open_fraction
    icec = np.where(open_water, r_cov.uniform(0, 0.02, n), r_cov.beta(4.0, 1.5, n))
    u10 = r_cov.normal(0, 4.0, n)
    v10 = r_cov.normal(0, 4.0, n)
    bathy = r_cov.lognormal(4.0, 0.8, n)
    cog = r_cov.uniform(0, 360.0, n)

    records = pd.DataFrame(
        {
            "mmsi": (300000000 + g_mmsi).astype(str),
            "timestamp": ts,
            "lon": lon,
            "lat": lat,
            "sog": np.zeros(n),
            "cog": cog,
            "vessel_group": vessel_group[g_mmsi],
            "nav_status": status,
        }
    )
    env = pd.DataFrame({"icec": icec, "u10": u10, "v10": v10, "bathy": bathy, "dist_to_coast": dist})

    order = vessel_order(records)
    m_sorted = records["mmsi"].to_numpy()[order]
    dc = np.zeros(n)
    dc[1:] = delta_cog(cog[order][:-1], cog[order][1:])
    dc[np.r_[True, m_sorted[1:] != m_sorted[:-1]]] = 0.0
    dcog = np.empty(n)
    dcog[order] = dc
    along, cross = derive_wind_components(u10, v10, cog)
    cov = {
        "icec": icec,
        "wind_along": along,
        "wind_cross": cross,
        "dist_to_coast": dist,
        "bathy": bathy,
        "delta_cog": dcog,
        "vessel_group": vessel_group[g_mmsi],
        "nav_status": status,
    }

    sizes = (cfg.q_mmsi, cfg.q_cell, cfg.q_time)
    names = ("mmsi", "cell", "time")

    def draw_effects():
        return {nm: r_eff.normal(0, np.sqrt(v), q) for nm, v, q in zip(names, cfg.variances, sizes)}

    cls_eff = draw_effects()
    reg_eff = draw_effects()

    def group_sum(eff):
        return eff["mmsi"][g_mmsi] + eff["cell"][g_cell] + eff["time"][g_time]

    f_cls = sum(MEAN_TERMS[t](cov) for t in cfg.cls_terms) + group_sum(cls_eff)
    intercept = _solve_intercept(f_cls, 1.0 - cfg.zero_prevalence)
    eta = f_cls + intercept
    prob = ndtr(eta)
    labels = r_out.uniform(size=n) < prob

    mu = cfg.reg_intercept + sum(MEAN_TERMS[t](cov) for t in cfg.reg_terms) + group_sum(reg_eff)
    y = mu + r_out.normal(0, np.sqrt(cfg.var_e), n)
    sqrt_speed = np.maximum(np.abs(y), 1e-3)
    records["sog"] = np.where(labels, sqrt_speed**2, 0.0)

    truth = SynthTruth(eta, prob, mu, y, cls_eff, reg_eff, codes, intercept)
    return records, env, truth


def bayes_auc(truth_latent, labels):
    """ROC AUC of the true latent against realized labels."""
    latent = truth_latent.cls_latent if isinstance(truth_latent, SynthTruth) else truth_latent
    return roc_auc(latent, labels)


def to_ingest_frame(records: pd.DataFrame, env: pd.DataFrame) -> pd.DataFrame:
    out = pd.concat([records.reset_index(drop=True), env.reset_index(drop=True)], axis=1)
    out["timestamp"] = pd.to_datetime(out["timestamp"], utc=True).dt.strftime("%Y-%m-%dT%H:%M:%SZ")
    return out
