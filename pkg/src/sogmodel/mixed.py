"""Boosted trees with crossed grouped Gaussian random effects.

The latent predictor is ``eta = f(x) + sum_k b_k[group_k]`` with
``b_k ~ N(0, sigma2_k I)``. Two likelihoods are supported:

* ``gaussian``: ``y = eta + e``, ``e ~ N(0, sigma2_e)``. The marginal
  covariance ``Sigma = sigma2_e I + Z D Z^T`` is never formed; everything goes
  through the q x q system ``A = Z^T Z + sigma2_e D^{-1}``.
* ``bernoulli_probit``: ``P(y=1) = Phi(eta)``; random effects are integrated
  out with a Laplace approximation around the posterior mode.

Boosting alternates with variance-component updates every ``cadence``
rounds. For the Gaussian case the tree target is ``sigma2_e Sigma^{-1}
(y - F)``, which equals the residual after removing the current BLUPs.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np
import scipy.linalg as sl
from scipy.special import log_ndtr, ndtr, ndtri

from . import GROUP_NAMES
from .trees import Binner, Ensemble, TreeParams, fit_tree

log = logging.getLogger(__name__)

LIKELIHOODS = ("gaussian", "bernoulli_probit")
_LOG2PI = math.log(2 * math.pi)
_GOLDEN = (math.sqrt(5) - 1) / 2
SERIAL_VERSION = 1


class MixedModelError(ArithmeticError):
    pass


class GroupDesign:
    """Stacked one-hot design Z over crossed factors.

    ``codes`` is ``(n, K)`` with entries in ``0..n_levels[k]-1``.
    """

    def __init__(self, codes, n_levels=None):
        codes = np.asarray(codes, dtype=np.int64)
        if codes.ndim == 1:
            codes = codes[:, None]
        if codes.size and codes.min() < 0:
            raise MixedModelError("group codes must be nonnegative")
        if n_levels is None:
            n_levels = [int(c.max()) + 1 if len(c) else 0 for c in codes.T]
        self.codes = codes
        self.n_levels = tuple(int(q) for q in n_levels)
        for k, q in enumerate(self.n_levels):
            if len(codes) and codes[:, k].max() >= q:
                raise MixedModelError(f"group code out of range for factor {k}")
        self.offsets = np.concatenate([[0], np.cumsum(self.n_levels)]).astype(np.int64)

    @property
    def n(self):
        return self.codes.shape[0]

    @property
    def q(self):
        return int(self.offsets[-1])

    @property
    def n_factors(self):
        return self.codes.shape[1]

    def zt(self, v, factors=None):
        """Z^T v restricted to ``factors``."""
        factors = range(self.n_factors) if factors is None else factors
        parts = [np.bincount(self.codes[:, k], weights=v, minlength=self.n_levels[k]) for k in factors]
        return np.concatenate(parts) if parts else np.empty(0)

    def z(self, b, factors=None):
        factors = list(range(self.n_factors)) if factors is None else list(factors)
        out = np.zeros(self.n)
        pos = 0
        for k in factors:
            qk = self.n_levels[k]
            out += b[pos : pos + qk][self.codes[:, k]]
            pos += qk
        return out

    def gram(self, w=None, factors=None):
        """Dense Z^T W Z for the selected factors."""
        factors = list(range(self.n_factors)) if factors is None else list(factors)
        sizes = [self.n_levels[k] for k in factors]
        offs = np.concatenate([[0], np.cumsum(sizes)]).astype(int)
        G = np.zeros((offs[-1], offs[-1]))
        for a, k in enumerate(factors):
            ck, qk = self.codes[:, k], sizes[a]
            d = np.bincount(ck, weights=w, minlength=qk)
            G[offs[a] + np.arange(qk), offs[a] + np.arange(qk)] = d
            for bb in range(a + 1, len(factors)):
                l, ql = factors[bb], sizes[bb]
                block = np.bincount(ck * ql + self.codes[:, l], weights=w, minlength=qk * ql).reshape(qk, ql)
                G[offs[a] : offs[a + 1], offs[bb] : offs[bb + 1]] = block
                G[offs[bb] : offs[bb + 1], offs[a] : offs[a + 1]] = block.T
        return G


@dataclass
class RandomEffectsSpec:
    names: tuple
    n_levels: tuple
    variances: tuple
    resid_variance: float | None = None

    def __post_init__(self):
        self.names = tuple(self.names)
        self.n_levels = tuple(int(q) for q in self.n_levels)
        self.variances = tuple(float(v) for v in self.variances)
        if not (len(self.names) == len(self.n_levels) == len(self.variances)):
            raise MixedModelError("spec fields have inconsistent lengths")
        if any(v < 0 or not math.isfinite(v) for v in self.variances):
            raise MixedModelError("variances must be finite and nonnegative")
        if self.resid_variance is not None and not self.resid_variance > 0:
            raise MixedModelError("residual variance must be positive")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def _design(groups, spec_or_levels=None):
    if isinstance(groups, GroupDesign):
        return groups
    n_levels = spec_or_levels.n_levels if isinstance(spec_or_levels, RandomEffectsSpec) else spec_or_levels
    return GroupDesign(groups, n_levels)


def _cho(A):
    try:
        cf = sl.cho_factor(A, lower=True, check_finite=False)
    except np.linalg.LinAlgError as exc:
        raise MixedModelError("inner system is not positive definite") from exc
    diag = np.diag(cf[0])
    if not np.all(np.isfinite(diag)) or np.any(diag <= 0):
        raise MixedModelError("inner system is not positive definite")
    return cf, 2.0 * float(np.sum(np.log(diag)))


def _split(vec, sizes):
    return np.split(vec, np.cumsum(sizes)[:-1]) if len(sizes) else []


class GaussianSystem:
    """Cached pieces of the Gaussian marginal for a fixed design.

    ``ratios`` are ``sigma2_k / sigma2_e``; a zero ratio drops the factor.
    """

    def __init__(self, design: GroupDesign):
        self.design = design
        self._gram = design.gram()
        self._cache_key = None
        self._cache = None

    def factor(self, ratios):
        key = tuple(float(r) for r in ratios)
        if key != self._cache_key:
            active = [k for k, r in enumerate(ratios) if r > 0]
            idx = np.concatenate(
                [np.arange(self.design.offsets[k], self.design.offsets[k + 1]) for k in active]
            ) if active else np.empty(0, dtype=int)
            A = self._gram[np.ix_(idx, idx)].copy()
            prec = np.concatenate([np.full(self.design.n_levels[k], 1.0 / ratios[k]) for k in active]) if active else np.empty(0)
            A[np.diag_indices_from(A)] += prec
            cf, logdet = _cho(A) if len(idx) else (None, 0.0)
            self._cache_key, self._cache = key, (active, cf, logdet)
        return self._cache

    def blup(self, r, ratios):
        """Per-factor posterior means (dropped factors get zeros)."""
        active, cf, _ = self.factor(ratios)
        out = [np.zeros(q) for q in self.design.n_levels]
        if not active:
            return out
        sol = sl.cho_solve(cf, self.design.zt(r, active), check_finite=False)
        for k, part in zip(active, _split(sol, [self.design.n_levels[k] for k in active])):
            out[k] = part
        return out

    def parts(self, r, ratios):
        """``(quad, logdet_term)`` with quad = r^T (I + Z G Z^T)^{-1} r and
        logdet_term = log det(I + Z G Z^T), G = diag(ratios)."""
        active, cf, logdet = self.factor(ratios)
        rr = float(r @ r)
        if not active:
            return rr, 0.0
        c = self.design.zt(r, active)
        quad = rr - float(c @ sl.cho_solve(cf, c, check_finite=False))
        ld = logdet + sum(self.design.n_levels[k] * math.log(ratios[k]) for k in active)
        return quad, ld

    def nll(self, r, variances, resid_variance):
        ratios = [v / resid_variance for v in variances]
        quad, ld = self.parts(r, ratios)
        n = len(r)
        return 0.5 * (n * _LOG2PI + n * math.log(resid_variance) + ld + quad / resid_variance)

    def profiled_nll(self, r, ratios):
        """NLL with sigma2_e at its closed-form maximiser. Returns (nll, s2e)."""
        quad, ld = self.parts(r, ratios)
        n = len(r)
        s2e = max(quad / n, 1e-300)
        return 0.5 * (n * _LOG2PI + n * math.log(s2e) + n + ld), s2e


def solve_mixed_equations(offset, y, groups, spec: RandomEffectsSpec):
    """BLUPs solving ``(sigma2_e D^{-1} + Z^T Z) b = Z^T (y - offset)``."""
    if spec.resid_variance is None:
        raise MixedModelError("Gaussian residual variance is required")
    design = _design(groups, spec)
    r = np.asarray(y, dtype=float) - np.asarray(offset, dtype=float)
    ratios = [v / spec.resid_variance for v in spec.variances]
    return GaussianSystem(design).blup(r, ratios)


def marginal_nll_gaussian(offset, y, groups, spec: RandomEffectsSpec):
    """-log N(y | offset, sum_k sigma2_k Z_k Z_k^T + sigma2_e I)."""
    if spec.resid_variance is None:
        raise MixedModelError("Gaussian residual variance is required")
    design = _design(groups, spec)
    r = np.asarray(y, dtype=float) - np.asarray(offset, dtype=float)
    return GaussianSystem(design).nll(r, spec.variances, spec.resid_variance)


def sigma_inv_dot(v, groups, spec: RandomEffectsSpec):
    """Sigma^{-1} v through the Woodbury identity."""
    design = _design(groups, spec)
    v = np.asarray(v, dtype=float)
    ratios = [s / spec.resid_variance for s in spec.variances]
    b = GaussianSystem(design).blup(v, ratios)
    return (v - design.z(np.concatenate(b))) / spec.resid_variance


# ---------------------------------------------------------------- probit


def probit_terms(eta, y):
    """Per-row log-likelihood, gradient and negative Hessian of
    ``log Phi(s * eta)`` with ``s = 2y - 1``."""
    s = 2.0 * np.asarray(y, dtype=float) - 1.0
    z = s * eta
    logcdf = log_ndtr(z)
    lam = np.exp(-0.5 * z * z - 0.5 * _LOG2PI - logcdf)
    return logcdf, s * lam, lam * (lam + z)


@dataclass
class ProbitMode:
    b: np.ndarray
    eta: np.ndarray
    grad: np.ndarray
    weight: np.ndarray
    loglik: float
    penalty: float
    logdet: float
    iterations: int

    @property
    def laplace_nll(self):
        return -self.loglik + self.penalty + 0.5 * self.logdet


def probit_mode(F, y, design: GroupDesign, variances, b0=None, tol=1e-8, max_iter=50):
    """Posterior mode of the stacked random effects given the fixed part F.

    Newton iterations with step-halving. ``logdet`` is
    ``log det(I + D Z^T W Z)`` at the mode.
    """
    active = [k for k, v in enumerate(variances) if v > 0]
    sizes = [design.n_levels[k] for k in active]
    prec = np.concatenate([np.full(design.n_levels[k], 1.0 / variances[k]) for k in active]) if active else np.empty(0)
    b = np.zeros(len(prec)) if b0 is None or len(b0) != len(prec) else np.array(b0, dtype=float)

    def objective(bv):
        eta = F + (design.z(bv, active) if active else 0.0)
        ll, g, w = probit_terms(eta, y)
        pen = 0.5 * float(np.sum(prec * bv * bv))
        return float(np.sum(ll)) - pen, eta, g, w, pen

    obj, eta, g, w, pen = objective(b)
    it = 0
    for it in range(1, max_iter + 1):
        if not active:
            break
        grad = design.zt(g, active) - prec * b
        H = design.gram(w, active)
        H[np.diag_indices_from(H)] += prec
        cf, _ = _cho(H)
        step = sl.cho_solve(cf, grad, check_finite=False)
        t = 1.0
        for _ in range(40):
            cand = objective(b + t * step)
            if cand[0] >= obj - 1e-12 * abs(obj):
                break
            t *= 0.5
        else:
            raise MixedModelError("probit Newton iterations diverged")
        improvement = cand[0] - obj
        b = b + t * step
        obj, eta, g, w, pen = cand
        if np.max(np.abs(t * step)) < tol or improvement < 1e-12 * (1.0 + abs(obj)):
            break
    if active:
        H = design.gram(w, active)
        H[np.diag_indices_from(H)] += prec
        _, ld = _cho(H)
        ld += sum(design.n_levels[k] * math.log(variances[k]) for k in active)
    else:
        ld = 0.0
    return ProbitMode(b, eta, g, w, obj + pen, pen, ld, it)


def expand_coefficients(b, variances, n_levels):
    out = [np.zeros(q) for q in n_levels]
    active = [k for k, v in enumerate(variances) if v > 0]
    for k, part in zip(active, _split(b, [n_levels[k] for k in active])):
        out[k] = part
    return out


# ----------------------------------------------------- variance estimation


def golden_section(f, lo, hi, tol=1e-3):
    """Minimise a unimodal ``f`` on [lo, hi]; returns the best point seen."""
    a, b = lo, hi
    c = b - _GOLDEN * (b - a)
    d = a + _GOLDEN * (b - a)
    fc, fd = f(c), f(d)
    best = (c, fc) if fc <= fd else (d, fd)
    while b - a > tol:
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - _GOLDEN * (b - a)
            fc = f(c)
            if fc < best[1]:
                best = (c, fc)
        else:
            a, c, fc = c, d, fd
            d = a + _GOLDEN * (b - a)
            fd = f(d)
            if fd < best[1]:
                best = (d, fd)
    return best


def coordinate_descent(f, x0, lo, hi, window=None, tol_x=1e-3, rel_tol=1e-6, max_sweeps=20):
    """Derivative-free minimisation of ``f`` over a box by cyclic golden-section
    line searches; a coordinate moves only when it strictly improves ``f``."""
    x = np.array(x0, dtype=float)
    fx = f(x)
    for sweep in range(max_sweeps):
        f_start = fx
        w = window if sweep == 0 else (window or 3.0)
        for k in range(len(x)):
            a = lo if w is None else max(lo, x[k] - w)
            b = hi if w is None else min(hi, x[k] + w)

            def fk(v, k=k):
                xx = x.copy()
                xx[k] = v
                return f(xx)

            xk, fk_val = golden_section(fk, a, b, tol_x)
            if fk_val < fx:
                x[k], fx = xk, fk_val
        if f_start - fx <= rel_tol * max(1.0, abs(fx)):
            break
    return x, fx


@dataclass
class VarianceFit:
    spec: RandomEffectsSpec
    nll: float
    improved: bool
    warning: str | None = None


def _fit_result(spec, fx, start_nll, start):
    improved = fx < start_nll - 1e-12 * abs(start_nll)
    warning = None if improved or start is not None else "no improvement over starting values"
    return VarianceFit(spec, fx, improved, warning)


def _resid_scale(r):
    v = float(np.var(r))
    return v if v > 0 else 1.0


def _estimate_gaussian(system: GaussianSystem, r, names, start=None, restarts=(0.01, 0.1, 1.0), window=None, tol_x=1e-3, rel_tol=1e-6):
    K = system.design.n_factors
    lo, hi = math.log(1e-8), math.log(1e4)

    def f(x):
        ratios = [math.exp(v) if v > lo + 1e-12 else 0.0 for v in x]
        return system.profiled_nll(r, ratios)[0]

    if start is not None:
        s2e = start.resid_variance
        starts = [np.array([math.log(max(v / s2e, 1e-8)) for v in start.variances])]
    else:
        starts = [np.full(K, math.log(c)) for c in restarts]
    best = None
    start_nll = f(starts[0])
    for x0 in starts:
        x, fx = coordinate_descent(f, x0, lo, hi, window=window, tol_x=tol_x, rel_tol=rel_tol)
        if best is None or fx < best[1]:
            best = (x, fx)
    x, fx = best
    # boundary check: a factor whose variance is better set to exactly zero
    for k in range(K):
        xx = x.copy()
        xx[k] = lo
        fz = f(xx)
        if fz <= fx:
            x, fx = xx, fz
    ratios = [math.exp(v) if v > lo + 1e-12 else 0.0 for v in x]
    _, s2e = system.profiled_nll(r, ratios)
    spec = RandomEffectsSpec(names, system.design.n_levels, [g * s2e for g in ratios], s2e)
    return _fit_result(spec, fx, start_nll, start)


def _estimate_probit(F, y, design, names, start=None, restarts=(0.01, 0.1, 1.0), window=None, tol_x=1e-2, rel_tol=1e-6):
    K = design.n_factors
    lo, hi = math.log(1e-6), math.log(1e2)
    warm = {"b": None}

    def f(x):
        var = [math.exp(v) if v > lo + 1e-12 else 0.0 for v in x]
        mode = probit_mode(F, y, design, var, warm["b"])
        warm["b"] = mode.b
        return mode.laplace_nll

    if start is not None:
        starts = [np.array([math.log(max(v, 1e-6)) for v in start.variances])]
    else:
        starts = [np.full(K, math.log(c)) for c in restarts]
    start_nll = f(starts[0])
    best = None
    for x0 in starts:
        warm["b"] = None
        x, fx = coordinate_descent(f, x0, lo, hi, window=window, tol_x=tol_x, rel_tol=rel_tol)
        if best is None or fx < best[1]:
            best = (x, fx)
    x, fx = best
    for k in range(K):
        xx = x.copy()
        xx[k] = lo
        fz = f(xx)
        if fz <= fx:
            x, fx = xx, fz
    var = [math.exp(v) if v > lo + 1e-12 else 0.0 for v in x]
    spec = RandomEffectsSpec(names, design.n_levels, var, None)
    return _fit_result(spec, fx, start_nll, start)


def estimate_variances(offset, y, groups, likelihood="gaussian", names=GROUP_NAMES, n_levels=None, start=None, **kw):
    """Maximise the (Laplace-approximate, for probit) marginal likelihood over
    log-variances. For the Gaussian likelihood sigma2_e is profiled out."""
    design = _design(groups, n_levels)
    names = tuple(names)[: design.n_factors]
    for k in range(design.n_factors):
        if len(np.unique(design.codes[:, k])) < 2:
            raise MixedModelError(f"factor {names[k]!r} needs at least two observed levels")
    y = np.asarray(y, dtype=float)
    offset = np.broadcast_to(np.asarray(offset, dtype=float), y.shape)
    if likelihood == "gaussian":
        return _estimate_gaussian(GaussianSystem(design), y - offset, names, start, **kw)
    if likelihood == "bernoulli_probit":
        return _estimate_probit(offset, y, design, names, start, **kw)
    raise MixedModelError(f"unknown likelihood {likelihood!r}")


# ---------------------------------------------------------------- training


@dataclass(frozen=True)
class TrainConfig:
    n_rounds: int = 100
    learning_rate: float = 0.1
    tree: TreeParams = field(default_factory=TreeParams)
    cadence: int = 10
    tol: float = 1e-6
    seed: int = 0
    fixed_variances: tuple | None = None
    fixed_resid_variance: float | None = None

    def __post_init__(self):
        if self.n_rounds < 0:
            raise MixedModelError("n_rounds must be >= 0")
        if self.cadence < 1:
            raise MixedModelError("cadence must be >= 1")
        if not 0 < self.learning_rate <= 1:
            raise MixedModelError("learning_rate must lie in (0, 1]")

    def to_dict(self):
        d = asdict(self)
        d["fixed_variances"] = list(self.fixed_variances) if self.fixed_variances is not None else None
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["tree"] = TreeParams(**d.get("tree", {}))
        if d.get("fixed_variances") is not None:
            d["fixed_variances"] = tuple(d["fixed_variances"])
        return cls(**d)

    def digest(self):
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


class MixedBoostModel:
    """Fitted tree ensemble plus per-level random-effect coefficients.

    ``levels[k]`` holds the group codes seen in training for factor ``k`` and
    ``coefficients[k]`` the matching posterior means. Codes not in ``levels``
    (including -1) contribute zero.
    """

    def __init__(self, likelihood, ensemble, spec, levels, coefficients, n_features, history=None, metadata=None):
        if likelihood not in LIKELIHOODS:
            raise MixedModelError(f"unknown likelihood {likelihood!r}")
        self.likelihood = likelihood
        self.ensemble = ensemble
        self.spec = spec
        self.levels = [np.asarray(lv, dtype=np.int64) for lv in levels]
        self.coefficients = [np.asarray(c, dtype=float) for c in coefficients]
        self.n_features = int(n_features)
        self.history = list(history or [])
        self.metadata = dict(metadata or {})

    def random_effects(self, groups):
        groups = np.asarray(groups, dtype=np.int64)
        if groups.ndim == 1:
            groups = groups[:, None]
        out = np.zeros(len(groups))
        for k, (lv, coef) in enumerate(zip(self.levels, self.coefficients)):
            if k >= groups.shape[1] or len(lv) == 0:
                continue
            g = groups[:, k]
            pos = np.minimum(np.searchsorted(lv, g), len(lv) - 1)
            hit = lv[pos] == g
            out[hit] += coef[pos[hit]]
        return out

    def predict_latent(self, X, groups=None):
        X = np.asarray(X, dtype=float)
        if X.ndim != 2 or X.shape[1] != self.n_features:
            raise MixedModelError(f"expected {self.n_features} feature columns, got shape {X.shape}")
        latent = self.ensemble.predict(X)
        if groups is not None:
            groups = np.asarray(groups)
            if len(groups) != len(X):
                raise MixedModelError("groups and X are not aligned")
            latent = latent + self.random_effects(groups)
        return latent

    def response(self, latent):
        return ndtr(latent) if self.likelihood == "bernoulli_probit" else np.asarray(latent)

    def to_dict(self):
        return {
            "version": SERIAL_VERSION,
            "likelihood": self.likelihood,
            "n_features": self.n_features,
            "ensemble": self.ensemble.to_dict(),
            "spec": self.spec.to_dict(),
            "levels": [lv.tolist() for lv in self.levels],
            "coefficients": [c.tolist() for c in self.coefficients],
            "history": self.history,
            "metadata": self.metadata,
        }

    @classmethod
    def from_dict(cls, d):
        if d.get("version") != SERIAL_VERSION:
            raise MixedModelError(f"unsupported model version {d.get('version')!r}")
        return cls(
            d["likelihood"],
            Ensemble.from_dict(d["ensemble"]),
            RandomEffectsSpec.from_dict(d["spec"]),
            d["levels"],
            d["coefficients"],
            d["n_features"],
            d.get("history"),
            d.get("metadata"),
        )


def predict(model: MixedBoostModel, X, groups=None):
    """Latent and response-scale predictions."""
    latent = model.predict_latent(X, groups)
    return latent, model.response(latent)


def _local_groups(groups):
    groups = np.asarray(groups, dtype=np.int64)
    if groups.ndim == 1:
        groups = groups[:, None]
    if groups.size and groups.min() < 0:
        raise MixedModelError("training rows must have known group codes")
    levels, local = [], []
    for k in range(groups.shape[1]):
        lv, inv = np.unique(groups[:, k], return_inverse=True)
        levels.append(lv)
        local.append(inv.reshape(-1))
    return levels, GroupDesign(np.column_stack(local) if local else np.empty((len(groups), 0), int), [len(lv) for lv in levels])


def _prune(variances, scale):
    return [v if v >= 1e-8 * scale else 0.0 for v in variances]


def _prepare(X, target, groups, config):
    X = np.asarray(X, dtype=float)
    target = np.asarray(target, dtype=float)
    if X.ndim != 2 or len(X) != len(target):
        raise MixedModelError("X and the response are not aligned")
    if not np.all(np.isfinite(target)):
        raise MixedModelError("response must be finite")
    levels, design = _local_groups(groups)
    if design.n != len(X):
        raise MixedModelError("groups and X are not aligned")
    binner = Binner.fit(X, config.tree.max_bins)
    return X, target, levels, design, binner, binner.transform(X)


def _warm_kw(start):
    # between boosting rounds the variances move little: search a narrow
    # log-window around the previous values at a coarser tolerance
    return {} if start is None else {"window": 1.0, "tol_x": 2e-2}


def _round_params(config: TrainConfig, m):
    return replace(config.tree, seed=config.tree.seed + config.seed * 100003 + m)


def train_gaussian(X, y, groups, config: TrainConfig = TrainConfig(), names=GROUP_NAMES):
    """Boosting with Gaussian likelihood and crossed random intercepts."""
    X, y, levels, design, binner, codes = _prepare(X, y, groups, config)
    names = tuple(names)[: design.n_factors]
    system = GaussianSystem(design)
    base = float(np.mean(y))
    F = np.full(len(y), base)
    ens = Ensemble(base, config.learning_rate)
    scale = _resid_scale(y - F)
    estimate = config.fixed_variances is None

    def refit(start):
        fit = estimate_variances(F, y, design, "gaussian", names, start=start, rel_tol=config.tol, **_warm_kw(start))
        if fit.warning:
            log.warning("variance update: %s", fit.warning)
        v = _prune(fit.spec.variances, scale)
        return RandomEffectsSpec(names, design.n_levels, v, fit.spec.resid_variance)

    if estimate:
        spec = refit(None)
    else:
        s2e = config.fixed_resid_variance or scale
        spec = RandomEffectsSpec(names, design.n_levels, config.fixed_variances, s2e)
    ratios = [v / spec.resid_variance for v in spec.variances]
    history = [system.nll(y - F, spec.variances, spec.resid_variance)]

    for m in range(config.n_rounds):
        if estimate and m > 0 and m % config.cadence == 0:
            spec = refit(spec)
            ratios = [v / spec.resid_variance for v in spec.variances]
            history.append(system.nll(y - F, spec.variances, spec.resid_variance))
        r = y - F
        b = system.blup(r, ratios)
        g = r - design.z(np.concatenate(b))
        tree = fit_tree(X, g, None, _round_params(config, m), binner, codes)
        ens.append(tree)
        F = F + config.learning_rate * tree.predict(X)
    if estimate and config.n_rounds > 0:
        spec = refit(spec)
        ratios = [v / spec.resid_variance for v in spec.variances]
        history.append(system.nll(y - F, spec.variances, spec.resid_variance))
    coefs = system.blup(y - F, ratios)
    meta = {"seed": config.seed, "config_hash": config.digest(), "n_train": len(y), "config": config.to_dict()}
    return MixedBoostModel("gaussian", ens, spec, levels, coefs, X.shape[1], history, meta)


def train_probit(X, labels, groups, config: TrainConfig = TrainConfig(), names=GROUP_NAMES):
    """Boosting with a Bernoulli-probit likelihood; random effects enter via
    the Laplace approximation and each tree takes a Newton step on F."""
    X, y, levels, design, binner, codes = _prepare(X, labels, groups, config)
    if not np.all((y == 0) | (y == 1)):
        raise MixedModelError("labels must be 0/1")
    if y.min() == y.max():
        raise MixedModelError("both classes must be present")
    names = tuple(names)[: design.n_factors]
    base = float(ndtri(np.mean(y)))
    F = np.full(len(y), base)
    ens = Ensemble(base, config.learning_rate)
    estimate = config.fixed_variances is None

    def refit(start):
        fit = estimate_variances(F, y, design, "bernoulli_probit", names, start=start, rel_tol=config.tol, **_warm_kw(start))
        if fit.warning:
            log.warning("variance update: %s", fit.warning)
        return RandomEffectsSpec(names, design.n_levels, _prune(fit.spec.variances, 1.0), None)

    spec = refit(None) if estimate else RandomEffectsSpec(names, design.n_levels, config.fixed_variances, None)
    mode = probit_mode(F, y, design, spec.variances)
    history = [mode.laplace_nll]
    for m in range(config.n_rounds):
        if estimate and m > 0 and m % config.cadence == 0:
            spec = refit(spec)
            mode = probit_mode(F, y, design, spec.variances, mode.b)
            history.append(mode.laplace_nll)
        w = np.maximum(mode.weight, 1e-12)
        tree = fit_tree(X, mode.grad / w, w, _round_params(config, m), binner, codes)
        ens.append(tree)
        F = F + config.learning_rate * tree.predict(X)
        mode = probit_mode(F, y, design, spec.variances, mode.b)
    if estimate and config.n_rounds > 0:
        spec = refit(spec)
        mode = probit_mode(F, y, design, spec.variances, mode.b)
        history.append(mode.laplace_nll)
    coefs = expand_coefficients(mode.b, spec.variances, design.n_levels)
    meta = {"seed": config.seed, "config_hash": config.digest(), "n_train": len(y), "config": config.to_dict()}
    return MixedBoostModel("bernoulli_probit", ens, spec, levels, coefs, X.shape[1], history, meta)
