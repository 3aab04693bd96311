"""Two-stage zero-inflated vessel speed modelling with boosted trees and
crossed grouped random effects."""

__version__ = "0.1.0"

FEATURE_NAMES = (
    "scaled_icec",
    "scaled_wind_along",
    "scaled_wind_cross",
    "scaled_dist_to_coast",
    "scaled_bathy",
    "scaled_cog_sin",
    "scaled_cog_cos",
    "scaled_delta_cog",
    "vessel_group_idx",
    "status_idx",
)

GROUP_NAMES = ("mmsi", "cell", "time")
