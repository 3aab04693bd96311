"""Shapley attributions for the tree ensemble part of a fitted model.

Value function: the tree-conditional expectation, where a split on a feature
outside the coalition averages both children weighted by training cover.
Random effects are not attributed; the decomposition explains the ensemble
output ``F(x)`` only.

Two exact algorithms are provided:

* ``shap_tree_enumerate``: direct enumeration of all coalitions of the
  features a tree uses. Simple, exponential in the number of used features.
* ``shap_tree``: the polynomial path algorithm (path extension/unwinding
  over the unique features on each root-to-leaf path), vectorised over rows.
  This is the default for ensembles.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations
from math import factorial

import numpy as np
import pandas as pd

from . import FEATURE_NAMES
from .metrics import assign_bins, make_bins
from .trees import Ensemble, RegressionTree


class ExplainError(ValueError):
    pass


SCALES = {"gaussian": "sqrt_sog_latent", "bernoulli_probit": "probit_latent"}


@dataclass
class ShapMatrix:
    base_value: float
    phi: np.ndarray
    feature_names: tuple = FEATURE_NAMES
    scale: str = "latent"
    random_effects_included: bool = False
    row_ids: np.ndarray | None = None
    metadata: dict = field(default_factory=dict)

    @property
    def n_rows(self):
        return self.phi.shape[0]

    def prediction(self):
        return self.base_value + self.phi.sum(1)

    def to_frame(self):
        df = pd.DataFrame(self.phi, columns=list(self.feature_names))
        df.insert(0, "row_id", self.row_ids if self.row_ids is not None else np.arange(self.n_rows))
        df["base"] = self.base_value
        return df


def _check_tree(tree: RegressionTree):
    if np.any(tree.cover <= 0):
        raise ExplainError("tree has a node with zero cover")


def expected_value(tree: RegressionTree):
    """Cover-weighted mean of the leaf values."""
    leaves = tree.feature < 0
    return float(np.sum(tree.value[leaves] * tree.cover[leaves]) / tree.cover[0]) if tree.n_nodes > 1 else float(tree.value[0])


def _conditional_expectation(tree: RegressionTree, X, in_coalition):
    """v(S) for every row: follow x on features in S, average by cover
    elsewhere."""

    def rec(node, rows_weight):
        f = tree.feature[node]
        if f < 0:
            return rows_weight * tree.value[node]
        lc, rc = tree.left[node], tree.right[node]
        if in_coalition[f]:
            go = X[:, f] <= tree.threshold[node]
            return rec(lc, rows_weight * go) + rec(rc, rows_weight * ~go)
        c = tree.cover[node]
        return rec(lc, rows_weight * (tree.cover[lc] / c)) + rec(rc, rows_weight * (tree.cover[rc] / c))

    return rec(0, np.ones(len(X)))


def shap_tree_enumerate(tree: RegressionTree, X, n_features=None):
    """Exact Shapley values by enumerating coalitions of the used features.
    Returns ``(base, phi)`` with ``phi`` of shape ``(n, n_features)``."""
    _check_tree(tree)
    X = np.atleast_2d(np.asarray(X, dtype=float))
    p = X.shape[1] if n_features is None else n_features
    phi = np.zeros((len(X), p))
    used = tree.used_features()
    base = expected_value(tree)
    m = len(used)
    if m == 0:
        return base, phi
    values = {}
    for size in range(m + 1):
        for S in combinations(range(m), size):
            mask = np.zeros(p, dtype=bool)
            mask[[used[k] for k in S]] = True
            values[S] = _conditional_expectation(tree, X, mask)
    for a in range(m):
        others = [k for k in range(m) if k != a]
        for size in range(m):
            wt = factorial(size) * factorial(m - size - 1) / factorial(m)
            for S in combinations(others, size):
                with_a = tuple(sorted(S + (a,)))
                phi[:, used[a]] += wt * (values[with_a] - values[S])
    return base, phi


# -- path algorithm -----------------------------------------------------------
# A path is a list of [feature, zero_fraction, one_fraction, pweight] where the
# zero fraction is a scalar cover ratio and one_fraction/pweight are per-row
# vectors (one_fraction is 0 or 1 for each row).


def _extend(path, zero, one, feature, n):
    d = len(path)
    path = [list(el) for el in path]
    path.append([feature, zero, one, np.ones(n) if d == 0 else np.zeros(n)])
    for i in range(d - 1, -1, -1):
        path[i + 1][3] = path[i + 1][3] + one * path[i][3] * (i + 1) / (d + 1)
        path[i][3] = zero * path[i][3] * (d - i) / (d + 1)
    return path


def _unwind(path, k):
    d = len(path) - 1
    _, zero, one, _ = path[k]
    weights = [el[3] for el in path]
    nxt = weights[d]
    hot = one != 0
    for i in range(d - 1, -1, -1):
        w_hot = nxt * (d + 1) / ((i + 1) * np.where(hot, one, 1.0))
        w_cold = weights[i] * (d + 1) / (zero * (d - i)) if zero != 0 else np.zeros_like(weights[i])
        new = np.where(hot, w_hot, w_cold)
        nxt = np.where(hot, weights[i] - new * zero * (d - i) / (d + 1), nxt)
        weights[i] = new
    out = []
    for i in range(d):
        src = path[i + 1] if i >= k else path[i]
        out.append([src[0], src[1], src[2], weights[i]])
    return out


def _unwound_sum(path, k):
    d = len(path) - 1
    _, zero, one, _ = path[k]
    hot = one != 0
    one_safe = np.where(hot, one, 1.0)
    nxt = path[d][3]
    total = np.zeros_like(nxt)
    for i in range(d - 1, -1, -1):
        tmp = nxt * (d + 1) / ((i + 1) * one_safe)
        cold = (path[i][3] / zero) / ((d - i) / (d + 1)) if zero != 0 else np.zeros_like(tmp)
        total = total + np.where(hot, tmp, cold)
        nxt = np.where(hot, path[i][3] - tmp * zero * (d - i) / (d + 1), nxt)
    return total


def shap_tree(tree: RegressionTree, X, n_features=None):
    """Exact Shapley values by the path algorithm. Returns ``(base, phi)``."""
    _check_tree(tree)
    X = np.atleast_2d(np.asarray(X, dtype=float))
    n = len(X)
    p = X.shape[1] if n_features is None else n_features
    phi = np.zeros((n, p))
    base = expected_value(tree)
    if tree.n_nodes == 1:
        return base, phi

    def rec(node, path, zero, one, feature):
        path = _extend(path, zero, one, feature, n)
        f = tree.feature[node]
        if f < 0:
            v = tree.value[node]
            for k in range(1, len(path)):
                w = _unwound_sum(path, k)
                el = path[k]
                phi[:, el[0]] += w * (el[2] - el[1]) * v
            return
        in_zero, in_one = 1.0, np.ones(n)
        for k in range(1, len(path)):
            if path[k][0] == f:
                in_zero, in_one = path[k][1], path[k][2]
                path = _unwind(path, k)
                break
        lc, rc = tree.left[node], tree.right[node]
        go = (X[:, f] <= tree.threshold[node]).astype(float)
        c = tree.cover[node]
        rec(lc, path, tree.cover[lc] / c * in_zero, in_one * go, f)
        rec(rc, path, tree.cover[rc] / c * in_zero, in_one * (1.0 - go), f)

    rec(0, [], 1.0, np.ones(n), -1)
    return base, phi


def shap_ensemble(model, X, method="path", feature_names=None, row_ids=None) -> ShapMatrix:
    """Sum of per-tree attributions scaled by the learning rate.

    ``model`` is a ``MixedBoostModel`` or a bare ``Ensemble``. The base value
    is ``base_score + learning_rate * sum(tree expected values)``.
    """
    ens = model if isinstance(model, Ensemble) else model.ensemble
    X = np.atleast_2d(np.asarray(X, dtype=float))
    n_feat = getattr(model, "n_features", X.shape[1])
    if X.shape[1] != n_feat:
        raise ExplainError(f"expected {n_feat} feature columns, got {X.shape[1]}")
    if method not in ("path", "enumerate"):
        raise ExplainError(f"unknown method {method!r}")
    fn = shap_tree if method == "path" else shap_tree_enumerate
    phi = np.zeros(X.shape)
    base = ens.base_score
    for tree in ens.trees:
        b, ph = fn(tree, X, n_feat)
        base += ens.learning_rate * b
        phi += ens.learning_rate * ph
    if feature_names is None:
        feature_names = FEATURE_NAMES if n_feat == len(FEATURE_NAMES) else tuple(f"x{j}" for j in range(n_feat))
    scale = SCALES.get(getattr(model, "likelihood", None), "latent")
    meta = {"method": method, "note": "random effects excluded; explains the tree ensemble output only"}
    return ShapMatrix(float(base), phi, tuple(feature_names), scale, False, row_ids, meta)


def sample_rows(n, size=20000, seed=0):
    """Sorted uniform sample without replacement (all rows if ``n <= size``)."""
    if n <= size:
        return np.arange(n)
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), 7])))
    return np.sort(rng.choice(n, size=size, replace=False))


def global_importance(shap: ShapMatrix) -> pd.DataFrame:
    """Mean |phi| per feature, descending; ties keep feature order."""
    if shap.n_rows == 0:
        raise ExplainError("no rows to summarise")
    imp = np.abs(shap.phi).mean(0)
    order = np.argsort(-imp, kind="mergesort")
    return pd.DataFrame({"feature": [shap.feature_names[j] for j in order], "mean_abs_shap": imp[order]})


def _feature_col(shap: ShapMatrix, feature):
    if isinstance(feature, str):
        if feature not in shap.feature_names:
            raise ExplainError(f"unknown feature {feature!r}")
        return shap.feature_names.index(feature)
    return int(feature)


def binned_marginal(shap: ShapMatrix, feature, values, bins=10, method="equal_width") -> pd.DataFrame:
    """Mean SHAP of one feature per covariate bin; empty bins are dropped."""
    j = _feature_col(shap, feature)
    v = np.asarray(values, dtype=float)
    if len(v) != shap.n_rows:
        raise ExplainError("covariate values and SHAP rows differ in length")
    edges = make_bins(v, bins, method)
    b = assign_bins(v, edges)
    df = pd.DataFrame({"bin": b, "phi": shap.phi[:, j]})
    g = df.groupby("bin", sort=True)["phi"].agg(["mean", "size"]).reset_index()
    lo, hi = edges[g["bin"]], edges[g["bin"] + 1]
    return pd.DataFrame(
        {
            "bin": g["bin"].to_numpy(),
            "bin_lo": lo,
            "bin_hi": hi,
            "bin_center": (lo + hi) / 2,
            "mean_shap": g["mean"].to_numpy(),
            "count": g["size"].to_numpy(),
        }
    )


def categorical_summary(shap: ShapMatrix, feature, labels) -> pd.DataFrame:
    """Mean SHAP of a categorical feature per level, sorted by the mean."""
    j = _feature_col(shap, feature)
    labels = np.asarray(labels).astype(str)
    if len(labels) != shap.n_rows:
        raise ExplainError("labels and SHAP rows differ in length")
    df = pd.DataFrame({"level": labels, "phi": shap.phi[:, j]})
    g = df.groupby("level", sort=True)["phi"].agg(["mean", "size"]).reset_index()
    g = g.rename(columns={"mean": "mean_shap", "size": "count"})
    return g.sort_values(["mean_shap", "level"], kind="mergesort").reset_index(drop=True)
