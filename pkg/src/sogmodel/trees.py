"""Weighted regression trees on histogram split candidates, and the additive
ensemble ``base_score + learning_rate * sum(tree(x))``.

Split candidates for a feature are midpoints between adjacent distinct
training values. When a feature has more distinct values than ``max_bins``
the candidates are thinned to count-quantiles. A row goes left iff its value
is ``<= threshold``.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

SERIAL_VERSION = 1


class TreeError(ValueError):
    pass


@dataclass(frozen=True)
class TreeParams:
    max_depth: int = 6
    min_samples_leaf: int = 50
    max_bins: int = 256
    feature_fraction: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.max_depth < 1:
            raise TreeError("max_depth must be >= 1")
        if self.min_samples_leaf < 1:
            raise TreeError("min_samples_leaf must be >= 1")
        if self.max_bins < 2:
            raise TreeError("max_bins must be >= 2")
        if not 0 < self.feature_fraction <= 1:
            raise TreeError("feature_fraction must lie in (0, 1]")


class RegressionTree:
    """Array-backed binary tree. ``feature[i] == -1`` marks a leaf."""

    def __init__(self, feature, threshold, left, right, value, cover):
        self.feature = np.asarray(feature, dtype=np.int64)
        self.threshold = np.asarray(threshold, dtype=float)
        self.left = np.asarray(left, dtype=np.int64)
        self.right = np.asarray(right, dtype=np.int64)
        self.value = np.asarray(value, dtype=float)
        self.cover = np.asarray(cover, dtype=float)

    @classmethod
    def leaf(cls, value, cover=1.0):
        return cls([-1], [0.0], [-1], [-1], [value], [cover])

    @property
    def n_nodes(self):
        return len(self.feature)

    def is_leaf(self, node):
        return self.feature[node] < 0

    def depth(self):
        def rec(i):
            return 0 if self.feature[i] < 0 else 1 + max(rec(self.left[i]), rec(self.right[i]))

        return rec(0)

    def used_features(self):
        return sorted(set(self.feature[self.feature >= 0].tolist()))

    def apply(self, X):
        """Leaf index reached by each row."""
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X[None, :]
        node = np.zeros(len(X), dtype=np.int64)
        active = np.nonzero(self.feature[node] >= 0)[0]
        while active.size:
            nd = node[active]
            f = self.feature[nd]
            go_left = X[active, f] <= self.threshold[nd]
            node[active] = np.where(go_left, self.left[nd], self.right[nd])
            active = active[self.feature[node[active]] >= 0]
        return node

    def predict(self, X):
        X = np.asarray(X, dtype=float)
        out = self.value[self.apply(X)]
        return out[0] if X.ndim == 1 else out

    def to_dict(self):
        return {
            "feature": self.feature.tolist(),
            "threshold": self.threshold.tolist(),
            "left": self.left.tolist(),
            "right": self.right.tolist(),
            "value": self.value.tolist(),
            "cover": self.cover.tolist(),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(d["feature"], d["threshold"], d["left"], d["right"], d["value"], d["cover"])

    def __eq__(self, other):
        if not isinstance(other, RegressionTree):
            return NotImplemented
        return all(
            np.array_equal(getattr(self, a), getattr(other, a))
            for a in ("feature", "threshold", "left", "right", "value", "cover")
        )


def candidate_edges(col, max_bins=256):
    """Split thresholds for one feature column."""
    values, counts = np.unique(np.asarray(col, dtype=float), return_counts=True)
    if len(values) < 2:
        return np.empty(0)
    mids = values[:-1] + (values[1:] - values[:-1]) / 2.0
    if len(values) <= max_bins:
        return mids
    cum = np.cumsum(counts)[:-1]
    targets = np.arange(1, max_bins) * (cum[-1] + counts[-1]) / max_bins
    pick = np.unique(np.minimum(np.searchsorted(cum, targets), len(mids) - 1))
    return mids[pick]


class Binner:
    """Per-feature split candidates and the binned view of a matrix."""

    def __init__(self, edges):
        self.edges = [np.asarray(e, dtype=float) for e in edges]

    @classmethod
    def fit(cls, X, max_bins=256):
        X = np.asarray(X, dtype=float)
        return cls([candidate_edges(X[:, j], max_bins) for j in range(X.shape[1])])

    def transform(self, X):
        """``(n_features, n)`` bin codes; code ``b`` means ``x <= edges[b]``
        and ``x > edges[b-1]``."""
        X = np.asarray(X, dtype=float)
        out = np.empty((X.shape[1], X.shape[0]), dtype=np.uint16)
        for j, e in enumerate(self.edges):
            out[j] = np.searchsorted(e, X[:, j], side="left")
        return out


def _histograms(codes, feats, idx, w, wt, nbins):
    hist = {}
    for j in feats:
        b = codes[j][idx]
        n = nbins[j] + 1
        hist[j] = (
            np.bincount(b, weights=w[idx], minlength=n),
            np.bincount(b, weights=wt[idx], minlength=n),
            np.bincount(b, minlength=n).astype(float),
        )
    return hist


def _best_split(hist, feats, nbins, W, S, C, scale, min_leaf):
    """Best (gain, feature, bin) under weighted squared error; ties go to the
    lowest feature index, then the lowest threshold."""
    tol = 1e-12 * scale
    best = (tol, -1, -1)
    parent = S * S / W
    for j in feats:
        nb = nbins[j]
        if nb == 0:
            continue
        hw, hs, hc = hist[j]
        cw = np.cumsum(hw)[:nb]
        cs = np.cumsum(hs)[:nb]
        cc = np.cumsum(hc)[:nb]
        rw = W - cw
        ok = (cc >= min_leaf) & (C - cc >= min_leaf) & (cw > 0) & (rw > 0)
        if not ok.any():
            continue
        with np.errstate(divide="ignore", invalid="ignore"):
            gain = cs * cs / cw + (S - cs) ** 2 / rw - parent
        gain = np.where(ok, gain, -np.inf)
        gmax = gain.max()
        if gmax > best[0] + tol:
            b = int(np.argmax(gain >= gmax - tol))
            best = (gmax, j, b)
    return best


def fit_tree(X, targets, weights=None, params: TreeParams | None = None, binner: Binner | None = None, codes=None):
    """Grow one tree by greedy weighted variance reduction.

    ``binner``/``codes`` may be passed to reuse binning across boosting
    rounds. Leaves hold the weighted mean target of their rows and their
    cover is the summed weight.
    """
    params = params or TreeParams()
    X = np.asarray(X, dtype=float)
    t = np.asarray(targets, dtype=float)
    n, p = X.shape
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=float)
    if n == 0 or len(t) != n or len(w) != n:
        raise TreeError("X, targets and weights must be non-empty and aligned")
    if np.any(w < 0) or not np.all(np.isfinite(w)) or not np.all(np.isfinite(t)):
        raise TreeError("weights must be finite and nonnegative, targets finite")
    if w.sum() <= 0:
        raise TreeError("all weights are zero")
    if binner is None:
        binner = Binner.fit(X, params.max_bins)
    if codes is None:
        codes = binner.transform(X)
    nbins = [len(e) for e in binner.edges]

    feats = list(range(p))
    if params.feature_fraction < 1.0:
        rng = np.random.Generator(np.random.Philox(params.seed))
        k = max(1, int(round(params.feature_fraction * p)))
        feats = sorted(rng.choice(p, size=k, replace=False).tolist())

    wt = w * t
    feature, threshold, left, right, value, cover = [], [], [], [], [], []

    def new_node(W, S):
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        value.append(S / W if W > 0 else 0.0)
        cover.append(W)
        return len(feature) - 1

    root_idx = np.arange(n)
    W0, S0 = w.sum(), wt.sum()
    stack = [(new_node(W0, S0), root_idx, 0, None)]
    while stack:
        node, idx, depth, hist = stack.pop()
        W, S, C = cover[node], wt[idx].sum(), float(len(idx))
        if depth >= params.max_depth or C < 2 * params.min_samples_leaf or W <= 0:
            continue
        if hist is None:
            hist = _histograms(codes, feats, idx, w, wt, nbins)
        scale = float(np.sum(wt[idx] * t[idx])) + abs(S * S / W) + 1e-300
        gain, j, b = _best_split(hist, feats, nbins, W, S, C, scale, params.min_samples_leaf)
        if j < 0:
            continue
        go_left = codes[j][idx] <= b
        li, ri = idx[go_left], idx[~go_left]
        lnode = new_node(w[li].sum(), wt[li].sum())
        rnode = new_node(w[ri].sum(), wt[ri].sum())
        feature[node] = j
        threshold[node] = float(binner.edges[j][b])
        left[node], right[node] = lnode, rnode
        if depth + 1 < params.max_depth:
            small, large = (li, ri) if len(li) <= len(ri) else (ri, li)
            hs = _histograms(codes, feats, small, w, wt, nbins)
            hl = {f: tuple(hist[f][k] - hs[f][k] for k in range(3)) for f in feats}
            if small is li:
                hl_l, hl_r = hs, hl
            else:
                hl_l, hl_r = hl, hs
        else:
            hl_l = hl_r = None
        stack.append((rnode, ri, depth + 1, hl_r))
        stack.append((lnode, li, depth + 1, hl_l))

    return RegressionTree(feature, threshold, left, right, value, cover)


class Ensemble:
    def __init__(self, base_score=0.0, learning_rate=0.1, trees=None):
        if not 0 < learning_rate <= 1:
            raise TreeError("learning_rate must lie in (0, 1]")
        self.base_score = float(base_score)
        self.learning_rate = float(learning_rate)
        self.trees = list(trees or [])

    def append(self, tree: RegressionTree):
        self.trees.append(tree)

    def __len__(self):
        return len(self.trees)

    def predict(self, X):
        X = np.asarray(X, dtype=float)
        out = np.full(len(X), self.base_score)
        for tree in self.trees:
            out += self.learning_rate * tree.predict(X)
        return out

    def to_dict(self):
        return {
            "version": SERIAL_VERSION,
            "base_score": self.base_score,
            "learning_rate": self.learning_rate,
            "trees": [t.to_dict() for t in self.trees],
        }

    @classmethod
    def from_dict(cls, d):
        if d.get("version") != SERIAL_VERSION:
            raise TreeError(f"unsupported ensemble version {d.get('version')!r}")
        return cls(d["base_score"], d["learning_rate"], [RegressionTree.from_dict(t) for t in d["trees"]])


def predict_tree(tree: RegressionTree, x):
    return tree.predict(x)


def predict_ensemble(ens: Ensemble, X):
    return ens.predict(X)


def params_dict(params: TreeParams):
    return asdict(params)
