import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from sogmodel.metrics import (
    CLASSIFICATION_FIELDS,
    ConfusionCounts,
    MetricError,
    calibration_bins,
    classification_report,
    confusion_metrics,
    pr_auc,
    pr_curve,
    regression_metrics,
    residual_by_group,
    roc_auc,
    roc_curve,
    stratified_diagnostic,
)


def pairwise_auc(s, y):
    pos, neg = s[y == 1], s[y == 0]
    wins = (pos[:, None] > neg[None, :]).sum() + 0.5 * (pos[:, None] == neg[None, :]).sum()
    return wins / (len(pos) * len(neg))


def test_auc_examples():
    assert roc_auc([0.9, 0.8, 0.1, 0.2], [1, 1, 0, 0]) == 1.0
    assert roc_auc([0.3] * 6, [1, 0, 1, 0, 1, 0]) == 0.5
    assert roc_auc([0.9, 0.4, 0.5, 0.1], [1, 1, 0, 0]) == 0.75
    with pytest.raises(MetricError):
        roc_auc([0.1, 0.2], [1, 1])


@settings(max_examples=60, deadline=None)
@given(arrays(np.int64, st.integers(2, 200), elements=st.integers(0, 9)), st.integers(0, 10**6))
def test_auc_matches_pairwise_oracle_and_rank_invariance(scores, seed):
    y = np.random.default_rng(seed).integers(0, 2, len(scores))
    if y.min() == y.max():
        y[0] = 1 - y[0]
    s = scores.astype(float)
    auc = roc_auc(s, y)
    assert auc == pairwise_auc(s, y)
    assert roc_auc(np.exp(s) * 3 - 1, y) == auc


def test_roc_curve_endpoints():
    fpr, tpr, thr = roc_curve([0.9, 0.4, 0.5, 0.1], [1, 1, 0, 0])
    assert (fpr[0], tpr[0], fpr[-1], tpr[-1]) == (0, 0, 1, 1)
    assert np.isinf(thr[0]) and np.all(np.diff(thr) < 0)
    assert np.trapezoid(tpr, fpr) == pytest.approx(0.75)


def test_pr_auc_examples():
    assert pr_auc([0.9, 0.8, 0.1, 0.2], [1, 1, 0, 0]) == 1.0
    assert pr_auc(np.r_[1.0, np.zeros(9) + np.linspace(0, 0.5, 9)], np.r_[1, np.zeros(9)]) == 1.0
    rng = np.random.default_rng(0)
    y = (rng.uniform(size=10000) < 0.3).astype(int)
    assert abs(pr_auc(rng.uniform(size=10000), y) - y.mean()) < 0.02
    with pytest.raises(MetricError):
        pr_auc([0.1, 0.2], [0, 0])


def test_pr_auc_step_hand_value():
    # ranks: +, -, +  -> precision 1 at recall .5, 2/3 at recall 1
    assert pr_auc([0.9, 0.5, 0.2], [1, 0, 1]) == pytest.approx(0.5 + 0.5 * 2 / 3)
    r, p, _ = pr_curve([0.9, 0.5, 0.2], [1, 0, 1])
    assert r.tolist() == [0.5, 0.5, 1.0]


def test_confusion_kappa_example():
    m = confusion_metrics(ConfusionCounts(tp=40, fp=10, fn=20, tn=30))
    assert m["accuracy"] == pytest.approx(0.7)
    assert m["kappa"] == pytest.approx(0.4)
    perfect = confusion_metrics(ConfusionCounts(5, 0, 0, 7))
    assert perfect["kappa"] == 1.0


def test_confusion_reproduces_reported_table():
    # counts rebuilt from the reported sensitivity, specificity and prevalence at N = 100000
    P, N = 47100, 52900
    tp, tn = round(0.703 * P), round(0.810 * N)
    m = confusion_metrics(ConfusionCounts(tp, N - tn, P - tp, tn))
    reported = {
        "accuracy": 0.760,
        "balanced_accuracy": 0.757,
        "sensitivity": 0.703,
        "specificity": 0.810,
        "precision": 0.767,
        "npv": 0.754,
        "kappa": 0.516,
        "prevalence": 0.471,
        "detection_rate": 0.331,
        "detection_prevalence": 0.431,
    }
    for k, v in reported.items():
        assert m[k] == pytest.approx(v, abs=1e-3), k


def test_undefined_ratios_are_none():
    m = confusion_metrics(ConfusionCounts(0, 0, 0, 5))
    assert m["sensitivity"] is None and m["precision"] is None and m["balanced_accuracy"] is None
    assert m["specificity"] == 1.0
    with pytest.raises(MetricError):
        ConfusionCounts(0, 0, 0, 0)


@settings(max_examples=80)
@given(st.integers(0, 500), st.integers(0, 500), st.integers(0, 500), st.integers(0, 500))
def test_confusion_identities(tp, fp, fn, tn):
    if tp + fp + fn + tn == 0:
        return
    m = confusion_metrics(ConfusionCounts(tp, fp, fn, tn))
    N = tp + fp + fn + tn
    if m["sensitivity"] is not None:
        assert m["detection_rate"] == pytest.approx(m["sensitivity"] * m["prevalence"])
    if m["balanced_accuracy"] is not None:
        assert m["balanced_accuracy"] == pytest.approx((m["sensitivity"] + m["specificity"]) / 2)
    assert m["detection_prevalence"] == pytest.approx((tp + fp) / N)
    for k, v in m.items():
        if v is not None:
            assert (-1 - 1e-12 if k == "kappa" else -1e-12) <= v <= 1 + 1e-12


def test_classification_report_fields():
    rng = np.random.default_rng(1)
    y = rng.integers(0, 2, 300)
    rep = classification_report(np.clip(y * 0.3 + rng.uniform(size=300) * 0.7, 0, 1), y)
    assert set(CLASSIFICATION_FIELDS) <= set(rep)
    assert rep["threshold"] == 0.5 and rep["pr_interpolation"] == "step"
    assert sum(rep["counts"].values()) == 300


def test_regression_examples():
    r = regression_metrics([1.0, 2.0, 3.0], [1.0, 2.0, 3.0])
    for scale in ("sqrt_scale", "original_scale"):
        assert r[scale] == {"r2": 1.0, "mae": 0.0, "rmse": 0.0}
    obs = np.array([1.0, 2.0, 4.0])
    assert regression_metrics(np.full(3, obs.mean()), obs)["sqrt_scale"]["r2"] == pytest.approx(0.0)
    r = regression_metrics([1.0, 1.0], [1.0, 3.0])
    assert r["sqrt_scale"]["r2"] == pytest.approx(-1.0)
    # squared series: obs {1, 9}, pred {1, 1}: SSE 64, SST 32
    assert r["original_scale"]["r2"] == pytest.approx(-1.0)
    assert r["original_scale"]["mae"] == pytest.approx(4.0)
    assert regression_metrics([1.0, 2.0], [3.0, 3.0])["sqrt_scale"]["r2"] is None


@settings(max_examples=50)
@given(arrays(np.float64, st.integers(2, 40), elements=st.floats(0, 10)), st.floats(-5, 5), st.integers(0, 1000))
def test_regression_properties(obs, c, seed):
    pred = obs + np.random.default_rng(seed).normal(size=len(obs))
    a = regression_metrics(pred, obs)["sqrt_scale"]
    assert a["rmse"] >= a["mae"] - 1e-12
    if np.ptp(obs) > 1e-3:
        b = regression_metrics(pred + c, obs + c)["sqrt_scale"]
        assert b["r2"] == pytest.approx(a["r2"], rel=1e-9, abs=1e-9)


def test_calibration_examples():
    rng = np.random.default_rng(2)
    obs = rng.gamma(2, 2, 103)
    t = calibration_bins(obs, obs, 10)
    assert np.allclose(t.mean_predicted, t.mean_observed)
    t = calibration_bins(obs + 1, obs, 10)
    assert np.allclose(t.mean_predicted - t.mean_observed, 1.0)
    assert t["count"].max() - t["count"].min() <= 1
    assert np.all(np.diff(t.mean_predicted) >= 0)
    pred = obs + rng.normal(size=103)
    t = calibration_bins(pred, obs, 7)
    assert np.average(t.mean_observed, weights=t["count"]) == pytest.approx(obs.mean(), abs=1e-10)
    assert np.average(t.mean_predicted, weights=t["count"]) == pytest.approx(pred.mean(), abs=1e-10)
    with pytest.raises(MetricError):
        calibration_bins(obs, obs, 0)


def test_stratified_diagnostic_examples():
    rng = np.random.default_rng(3)
    x = np.r_[rng.uniform(0, 1, 50), rng.uniform(5, 6, 40)]
    obs = rng.normal(size=90)
    strata = np.r_[["a"] * 50, ["b"] * 40]
    t = stratified_diagnostic(obs, obs, x, strata, bins=4)
    assert np.allclose(t.mean_observed, t.mean_predicted)
    assert t["count"].sum() == 90
    a, b = t[t.stratum == "a"], t[t.stratum == "b"]
    assert a.bin_hi.max() < b.bin_lo.min()


def test_residual_by_group_examples():
    obs = np.arange(6.0)
    t = residual_by_group(obs, obs, list("aabbcc"))
    assert np.all(t.mean_residual == 0) and t["count"].sum() == 6
    pred = obs.copy()
    pred[2:4] -= 1
    t = residual_by_group(obs, pred, list("aabbcc")).set_index("group")
    assert t.mean_residual.tolist() == [0.0, 1.0, 0.0]
