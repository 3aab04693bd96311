"""Two-stage zero-inflated speed model: probit occurrence classifier plus a
Gaussian regression of sqrt(SOG) on moving rows, with balanced stratified
cross-validation and the ice-risk grid."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy.special import ndtr

from .mixed import MixedBoostModel, TrainConfig, train_gaussian, train_probit

log = logging.getLogger(__name__)


class TwoStageError(ValueError):
    pass


def derive_binary_label(sog):
    sog = np.asarray(sog, dtype=float)
    if np.any(sog < 0) or not np.all(np.isfinite(sog)):
        raise TwoStageError("SOG must be finite and nonnegative")
    return (sog > 0).astype(np.int64)


def sqrt_transform(sog):
    sog = np.asarray(sog, dtype=float)
    if np.any(sog <= 0):
        raise TwoStageError("the regression stage takes strictly positive SOG")
    return np.sqrt(sog)


def back_transform(y, smearing=None):
    """Square back to knots. ``smearing`` (optional) is added as a
    variance correction ``E[(y+e)^2] = y^2 + var(e)``; off by default."""
    y = np.asarray(y, dtype=float)
    return y * y if smearing is None else y * y + smearing


def _rng(seed, *stream):
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), *stream])))


@dataclass
class FoldPlan:
    K: int
    fold: np.ndarray
    train_balanced: list
    seed: int
    split_seed: int

    def validation(self, k):
        return np.nonzero(self.fold == k)[0]

    def training(self, k):
        return np.nonzero(self.fold != k)[0]


def make_fold_plan(labels, K=5, seed=0, split_seed=0) -> FoldPlan:
    """Stratified folds; per fold the majority class of the training portion
    is subsampled without replacement down to the minority count.

    ``split_seed`` drives the fold assignment and ``seed`` the subsampling, so
    changing ``seed`` keeps the validation partition fixed.
    """
    y = np.asarray(labels)
    if K < 2:
        raise TwoStageError("K must be >= 2")
    if not np.all((y == 0) | (y == 1)):
        raise TwoStageError("labels must be 0/1")
    fold = np.empty(len(y), dtype=np.int64)
    rng = _rng(split_seed, 0)
    for cls in (0, 1):
        idx = np.nonzero(y == cls)[0]
        if len(idx) == 0:
            raise TwoStageError("both classes must be present")
        perm = rng.permutation(idx)
        fold[perm] = np.arange(len(perm)) % K
    balanced = []
    for k in range(K):
        tr = np.nonzero(fold != k)[0]
        pos, neg = tr[y[tr] == 1], tr[y[tr] == 0]
        if len(pos) == 0 or len(neg) == 0:
            raise TwoStageError(f"fold {k} training portion lacks a class")
        minority, majority = (pos, neg) if len(pos) <= len(neg) else (neg, pos)
        sub = _rng(seed, 1, k).choice(majority, size=len(minority), replace=False)
        balanced.append(np.sort(np.concatenate([minority, sub])))
    return FoldPlan(K, fold, balanced, seed, split_seed)


def balanced_subsample(labels, seed=0):
    y = np.asarray(labels)
    pos, neg = np.nonzero(y == 1)[0], np.nonzero(y == 0)[0]
    if len(pos) == 0 or len(neg) == 0:
        raise TwoStageError("both classes must be present")
    minority, majority = (pos, neg) if len(pos) <= len(neg) else (neg, pos)
    sub = _rng(seed, 2).choice(majority, size=len(minority), replace=False)
    return np.sort(np.concatenate([minority, sub]))


@dataclass
class StageConfigs:
    classifier: TrainConfig = field(default_factory=TrainConfig)
    regressor: TrainConfig = field(default_factory=TrainConfig)


@dataclass
class TwoStageModel:
    classifier: MixedBoostModel | None
    regressor: MixedBoostModel | None
    encoder: object = None

    def to_dict(self):
        return {
            "version": 1,
            "classifier": self.classifier.to_dict() if self.classifier else None,
            "regressor": self.regressor.to_dict() if self.regressor else None,
            "encoder": self.encoder.to_dict() if self.encoder is not None else None,
        }

    @classmethod
    def from_dict(cls, d):
        from .features import FeatureEncoder

        return cls(
            MixedBoostModel.from_dict(d["classifier"]) if d.get("classifier") else None,
            MixedBoostModel.from_dict(d["regressor"]) if d.get("regressor") else None,
            FeatureEncoder.from_dict(d["encoder"]) if d.get("encoder") else None,
        )


OOF_COLUMNS = ("row_id", "fold", "stage", "latent", "response")


def _oof_frame(rows, fold, stage, latent, response):
    return pd.DataFrame({"row_id": rows, "fold": fold, "stage": stage, "latent": latent, "response": response})


def train_two_stage(X, groups, sog, plan: FoldPlan, configs: StageConfigs = StageConfigs(), stages=("classifier", "regressor"), final_fit=True, encoder=None):
    """Cross-validated fit of both stages.

    Returns ``(model, oof)`` where ``oof`` has one row per (row, applicable
    stage): every row for the classifier, moving rows for the regressor. The
    final model is refit on all rows when ``final_fit`` is set.
    """
    X = np.asarray(X, dtype=float)
    groups = np.asarray(groups, dtype=np.int64)
    labels = derive_binary_label(sog)
    if len(X) != len(labels) or len(groups) != len(labels) or len(plan.fold) != len(labels):
        raise TwoStageError("X, groups, sog and the fold plan are not aligned")
    if "classifier" in stages and labels.min() == labels.max():
        raise TwoStageError("classifier needs both zero and positive SOG rows")
    sog = np.asarray(sog, dtype=float)
    frames = []
    for k in range(plan.K):
        val = plan.validation(k)
        if "classifier" in stages:
            tr = plan.train_balanced[k]
            log.info("fold %d: classifier on %d balanced rows", k, len(tr))
            clf = train_probit(X[tr], labels[tr], groups[tr], configs.classifier)
            lat = clf.predict_latent(X[val], groups[val])
            frames.append(_oof_frame(val, k, "classifier", lat, ndtr(lat)))
        if "regressor" in stages:
            tr = plan.training(k)
            tr = tr[labels[tr] == 1]
            v = val[labels[val] == 1]
            log.info("fold %d: regressor on %d moving rows", k, len(tr))
            reg = train_gaussian(X[tr], sqrt_transform(sog[tr]), groups[tr], configs.regressor)
            lat = reg.predict_latent(X[v], groups[v])
            frames.append(_oof_frame(v, k, "regressor", lat, back_transform(lat)))
    oof = pd.concat(frames, ignore_index=True) if frames else pd.DataFrame(columns=OOF_COLUMNS)
    oof = oof.sort_values(["stage", "row_id"], kind="mergesort").reset_index(drop=True)

    clf = reg = None
    if final_fit:
        if "classifier" in stages:
            idx = balanced_subsample(labels, plan.seed)
            clf = train_probit(X[idx], labels[idx], groups[idx], configs.classifier)
        if "regressor" in stages:
            pos = np.nonzero(labels == 1)[0]
            reg = train_gaussian(X[pos], sqrt_transform(sog[pos]), groups[pos], configs.regressor)
    return TwoStageModel(clf, reg, encoder), oof


def predict_expected_sog(model: TwoStageModel, X, groups=None):
    """``(p_positive, conditional_sog, expected_sog)`` by plugging the stage
    predictions together; not a joint-likelihood estimator."""
    p = ndtr(model.classifier.predict_latent(X, groups))
    cond = back_transform(model.regressor.predict_latent(X, groups))
    return p, cond, p * cond


class SafeSpeedCurve:
    """Piecewise-linear maximum safe speed (knots) as a function of ice
    concentration. ``inf`` is allowed as an open-water sentinel."""

    def __init__(self, icec, max_knots):
        icec = np.asarray(icec, dtype=float)
        knots = np.asarray(max_knots, dtype=float)
        order = np.argsort(icec)
        icec, knots = icec[order], knots[order]
        if len(icec) == 0 or icec.shape != knots.shape:
            raise TwoStageError("safe-speed curve needs matching, non-empty columns")
        if np.any(np.diff(icec) <= 0):
            raise TwoStageError("safe-speed curve has duplicate ice values")
        if np.any(np.diff(knots) > 0):
            raise TwoStageError("safe-speed curve must be nonincreasing in ice concentration")
        self.icec, self.knots = icec, knots

    @classmethod
    def from_csv(cls, path):
        df = pd.read_csv(path, comment="#")
        if "icec_tenths" in df.columns:
            ice = df["icec_tenths"].to_numpy(dtype=float) / 10.0
        elif "icec" in df.columns:
            ice = df["icec"].to_numpy(dtype=float)
        else:
            raise TwoStageError("curve CSV needs an icec_tenths column")
        return cls(ice, pd.to_numeric(df["max_knots"], errors="raise").to_numpy(dtype=float))

    def __call__(self, icec):
        icec = np.asarray(icec, dtype=float)
        out = np.empty_like(icec)
        below, above = icec <= self.icec[0], icec >= self.icec[-1]
        out[below] = self.knots[0]
        out[above] = self.knots[-1]
        mid = ~(below | above)
        if mid.any():
            j = np.searchsorted(self.icec, icec[mid], side="right")
            x0, x1 = self.icec[j - 1], self.icec[j]
            y0, y1 = self.knots[j - 1], self.knots[j]
            t = (icec[mid] - x0) / (x1 - x0)
            with np.errstate(invalid="ignore"):
                interp = y0 + t * (y1 - y0)
            # a segment leaving an infinite knot stays unbounded until the next knot
            out[mid] = np.where(np.isnan(interp), np.inf, interp)
        return out


def ice_risk_indicator(sog, icec, curve: SafeSpeedCurve):
    """1 where SOG is strictly above the safe speed for the ice concentration."""
    sog = np.asarray(sog, dtype=float)
    icec = np.asarray(icec, dtype=float)
    if np.any((icec < 0) | (icec > 1)):
        raise TwoStageError("icec outside [0, 1]")
    return (sog > curve(icec)).astype(np.int64)


def aggregate_risk_grid(lon, lat, flags, resolution=0.5, top_n=10):
    """Per-cell counts and risky proportion; also returns the ``top_n``
    cells with the most observations."""
    from .features import assign_grid_cell

    flags = np.asarray(flags)
    if not np.all((flags == 0) | (flags == 1)):
        raise TwoStageError("risk flags must be 0/1")
    ix, iy = assign_grid_cell(lon, lat, resolution)
    df = pd.DataFrame({"ix": ix, "iy": iy, "flag": flags})
    g = df.groupby(["ix", "iy"], sort=True)["flag"]
    grid = pd.DataFrame({"n": g.size(), "risky": g.sum()}).reset_index()
    grid["proportion"] = grid["risky"] / grid["n"]
    grid.insert(0, "lat_cell", grid["iy"] * resolution)
    grid.insert(0, "lon_cell", grid["ix"] * resolution)
    grid = grid.drop(columns=["ix", "iy"])
    top = grid.sort_values(["n", "lon_cell", "lat_cell"], ascending=[False, True, True], kind="mergesort").head(top_n)
    return grid, top.reset_index(drop=True)
