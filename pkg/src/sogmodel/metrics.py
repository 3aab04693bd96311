"""Classification, regression and calibration metrics.

Undefined ratios (zero denominators) are reported as ``None``.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import pandas as pd
from scipy.stats import rankdata


class MetricError(ValueError):
    pass


def _binary(scores, labels):
    s = np.asarray(scores, dtype=float)
    y = np.asarray(labels)
    if s.shape != y.shape:
        raise MetricError("scores and labels differ in length")
    if not np.all((y == 0) | (y == 1)):
        raise MetricError("labels must be 0/1")
    return s, y.astype(bool)


def roc_auc(scores, labels):
    """P(score+ > score-) + P(tie)/2 via midranks."""
    s, y = _binary(scores, labels)
    n1, n0 = int(y.sum()), int((~y).sum())
    if n1 == 0 or n0 == 0:
        raise MetricError("ROC AUC needs both classes")
    ranks = rankdata(s)
    return float((ranks[y].sum() - n1 * (n1 + 1) / 2.0) / (n1 * n0))


def _threshold_counts(s, y):
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    last = np.r_[np.nonzero(np.diff(s))[0], len(s) - 1]
    tp = np.cumsum(y)[last]
    fp = (last + 1) - tp
    return s[last], tp.astype(float), fp.astype(float)


def roc_curve(scores, labels):
    """(fpr, tpr, threshold) at every distinct score, starting from (0, 0)."""
    s, y = _binary(scores, labels)
    thr, tp, fp = _threshold_counts(s, y)
    P, N = y.sum(), (~y).sum()
    if P == 0 or N == 0:
        raise MetricError("ROC curve needs both classes")
    return np.r_[0.0, fp / N], np.r_[0.0, tp / P], np.r_[np.inf, thr]


def pr_curve(scores, labels):
    """(recall, precision, threshold) at every distinct score."""
    s, y = _binary(scores, labels)
    if y.sum() == 0:
        raise MetricError("precision-recall needs positives")
    thr, tp, fp = _threshold_counts(s, y)
    return tp / y.sum(), tp / (tp + fp), thr


def pr_auc(scores, labels):
    """Area under the step precision-recall curve:
    sum over thresholds of (R_k - R_{k-1}) * P_k."""
    recall, precision, _ = pr_curve(scores, labels)
    return float(np.sum(np.diff(np.r_[0.0, recall]) * precision))


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    def __post_init__(self):
        if min(self.tp, self.fp, self.fn, self.tn) < 0:
            raise MetricError("counts must be nonnegative")
        if self.total == 0:
            raise MetricError("empty confusion matrix")

    @property
    def total(self):
        return self.tp + self.fp + self.fn + self.tn

    @classmethod
    def from_predictions(cls, prob, labels, threshold=0.5):
        p, y = _binary(prob, labels)
        pred = p >= threshold
        return cls(int(np.sum(pred & y)), int(np.sum(pred & ~y)), int(np.sum(~pred & y)), int(np.sum(~pred & ~y)))


def _ratio(a, b):
    return a / b if b else None


def confusion_metrics(c: ConfusionCounts) -> dict:
    N = c.total
    sens = _ratio(c.tp, c.tp + c.fn)
    spec = _ratio(c.tn, c.tn + c.fp)
    p_o = (c.tp + c.tn) / N
    # kappa in integer form: (N*agree - chance) / (N^2 - chance)
    chance = (c.tp + c.fp) * (c.tp + c.fn) + (c.fn + c.tn) * (c.fp + c.tn)
    return {
        "accuracy": p_o,
        "balanced_accuracy": (sens + spec) / 2 if sens is not None and spec is not None else None,
        "sensitivity": sens,
        "specificity": spec,
        "precision": _ratio(c.tp, c.tp + c.fp),
        "npv": _ratio(c.tn, c.tn + c.fn),
        "kappa": _ratio(N * (c.tp + c.tn) - chance, N * N - chance),
        "prevalence": (c.tp + c.fn) / N,
        "detection_rate": c.tp / N,
        "detection_prevalence": (c.tp + c.fp) / N,
        "no_information_rate": max(c.tp + c.fn, c.fp + c.tn) / N,
    }


CLASSIFICATION_FIELDS = (
    "accuracy",
    "balanced_accuracy",
    "sensitivity",
    "specificity",
    "precision",
    "npv",
    "kappa",
    "prevalence",
    "detection_rate",
    "detection_prevalence",
    "auc",
    "pr_auc",
)


def classification_report(prob, labels, threshold=0.5) -> dict:
    counts = ConfusionCounts.from_predictions(prob, labels, threshold)
    rep = confusion_metrics(counts)
    rep["auc"] = roc_auc(prob, labels)
    rep["pr_auc"] = pr_auc(prob, labels)
    rep["threshold"] = threshold
    rep["counts"] = asdict(counts)
    rep["pr_interpolation"] = "step"
    return rep


def _scale_metrics(pred, obs):
    err = obs - pred
    sst = float(np.sum((obs - obs.mean()) ** 2))
    sse = float(np.sum(err**2))
    return {
        "r2": 1.0 - sse / sst if sst > 0 else None,
        "mae": float(np.mean(np.abs(err))),
        "rmse": float(np.sqrt(np.mean(err**2))),
    }


def regression_metrics(pred_sqrt, obs_sqrt) -> dict:
    """R2/MAE/RMSE on the square-root scale and, after squaring both series,
    on the original speed scale."""
    p = np.asarray(pred_sqrt, dtype=float)
    o = np.asarray(obs_sqrt, dtype=float)
    if p.shape != o.shape or p.size == 0:
        raise MetricError("need aligned, non-empty series")
    return {"sqrt_scale": _scale_metrics(p, o), "original_scale": _scale_metrics(p**2, o**2)}


def calibration_bins(pred, obs, n_bins=20) -> pd.DataFrame:
    """Equal-frequency bins of the prediction; bin sizes differ by at most one."""
    if n_bins < 1:
        raise MetricError("n_bins must be >= 1")
    p = np.asarray(pred, dtype=float)
    o = np.asarray(obs, dtype=float)
    if p.shape != o.shape or len(p) < n_bins:
        raise MetricError("need aligned series with at least n_bins rows")
    order = np.argsort(p, kind="mergesort")
    rows = []
    for i, idx in enumerate(np.array_split(order, n_bins)):
        rows.append({"bin": i, "mean_predicted": p[idx].mean(), "mean_observed": o[idx].mean(), "count": len(idx)})
    return pd.DataFrame(rows)


def make_bins(values, bins=10, method="equal_width"):
    """Bin edges for a covariate (``equal_width`` or ``quantile``), or pass
    explicit edges as a sequence."""
    v = np.asarray(values, dtype=float)
    if not np.isscalar(bins):
        return np.asarray(bins, dtype=float)
    if method == "quantile":
        return np.unique(np.quantile(v, np.linspace(0, 1, bins + 1)))
    if method == "equal_width":
        lo, hi = float(v.min()), float(v.max())
        if lo == hi:
            hi = lo + 1.0
        return np.linspace(lo, hi, bins + 1)
    raise MetricError(f"unknown binning method {method!r}")


def assign_bins(values, edges):
    idx = np.searchsorted(edges, values, side="right") - 1
    return np.clip(idx, 0, len(edges) - 2)


def stratified_diagnostic(obs, pred, covariate, strata, bins=10, method="equal_width") -> pd.DataFrame:
    """Mean observed and predicted per (stratum, covariate bin). Bins are
    formed within each stratum."""
    df = pd.DataFrame({"obs": obs, "pred": pred, "x": covariate, "stratum": np.asarray(strata).astype(str)})
    out = []
    for level, sub in df.groupby("stratum", sort=True):
        edges = make_bins(sub["x"].to_numpy(), bins, method)
        b = assign_bins(sub["x"].to_numpy(), edges)
        g = sub.assign(bin=b).groupby("bin")
        agg = g.agg(mean_observed=("obs", "mean"), mean_predicted=("pred", "mean"), count=("obs", "size"), x_mean=("x", "mean"))
        agg = agg.reset_index()
        agg["bin_lo"] = edges[agg["bin"]]
        agg["bin_hi"] = edges[agg["bin"] + 1]
        agg.insert(0, "stratum", level)
        out.append(agg)
    cols = ["stratum", "bin", "bin_lo", "bin_hi", "x_mean", "mean_observed", "mean_predicted", "count"]
    return pd.concat(out, ignore_index=True)[cols] if out else pd.DataFrame(columns=cols)


def residual_by_group(obs, pred, labels) -> pd.DataFrame:
    df = pd.DataFrame({"resid": np.asarray(obs, float) - np.asarray(pred, float), "group": np.asarray(labels).astype(str)})
    g = df.groupby("group", sort=True)["resid"]
    return pd.DataFrame({"mean_residual": g.mean(), "count": g.size()}).reset_index()
