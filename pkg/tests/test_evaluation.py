import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dmelab.evaluation import (
    ConfusionCounts,
    DegenerateResampleError,
    ScoredCase,
    ScoredCases,
    auc,
    binary_error_thickness_profile,
    bootstrap_ci,
    bootstrap_metrics,
    bootstrap_replicate_indices,
    cohens_kappa,
    confusion_at,
    error_thickness_profile,
    majority_vote,
    mann_whitney_auc,
    match_operating_point,
    metric_function,
    nearest_rank,
    permutation_test,
    predictive_values,
    roc_and_auc,
    summary_metrics,
)


def pair_count_auc(score, truth):
    """Brute-force oracle: fraction of (positive, negative) pairs ordered correctly, ties 1/2."""
    pos = [s for s, t in zip(score, truth) if t]
    neg = [s for s, t in zip(score, truth) if not t]
    total = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p in pos for n in neg)
    return total / (len(pos) * len(neg))


def sets(pos, neg):
    return np.array(pos + neg, dtype=float), np.array([1] * len(pos) + [0] * len(neg))


def test_auc_examples():
    assert roc_and_auc(sets([0.9, 0.8], [0.7, 0.4]))[1] == 1.0
    assert roc_and_auc(sets([0.8, 0.5], [0.5, 0.3]))[1] == 0.875


def test_roc_curve_shape():
    curve, _ = roc_and_auc(sets([0.8, 0.5], [0.5, 0.3]))
    assert curve[0].tolist() == [0.0, 0.0, math.inf]
    assert curve[-1, :2].tolist() == [1.0, 1.0]
    assert np.all(np.diff(curve[:, 0]) >= 0) and np.all(np.diff(curve[:, 1]) >= 0)


def test_auc_matches_pair_count_oracle():
    rng = np.random.default_rng(0)
    for trial in range(50):
        n = int(rng.integers(2, 201))
        score = rng.integers(0, 20, n) / 20.0  # coarse grid forces ties
        truth = rng.integers(0, 2, n)
        truth[:2] = (0, 1)
        _, a = roc_and_auc((score, truth))
        assert a == pytest.approx(pair_count_auc(score, truth), abs=1e-9)
        assert a == pytest.approx(mann_whitney_auc(score, truth), abs=1e-9)


def test_single_class_errors():
    with pytest.raises(ValueError):
        roc_and_auc(sets([0.2, 0.3], []))
    assert math.isnan(auc(sets([], [0.2])))


@settings(max_examples=50)
@given(st.lists(st.integers(0, 1000), min_size=2, max_size=40, unique=True), st.integers(0, 10**6))
def test_auc_properties(scores, seed):
    score = np.array(scores) / 1000.0
    truth = np.random.default_rng(seed).integers(0, 2, len(score))
    truth[:2] = (0, 1)
    a = auc((score, truth))
    assert auc((np.exp(3 * score) - 7, truth)) == pytest.approx(a, abs=1e-12)
    assert a + auc((1 - score, truth)) == pytest.approx(1.0, abs=1e-12)


def test_confusion_examples():
    cases = ScoredCases.from_arrays([0.9, 0.7, 0.6, 0.2], [1, 0, 1, 0])
    assert confusion_at(cases, 0.65) == ConfusionCounts(1, 1, 1, 1)
    c0 = confusion_at(cases, 0.0)
    assert c0.fn == c0.tn == 0
    c1 = confusion_at(cases, np.nextafter(0.9, 1))
    assert c1.tp == c1.fp == 0
    assert confusion_at(cases, 0.6).tp == 2  # inclusive


def test_summary_metrics():
    m = summary_metrics(ConfusionCounts(tp=85, fp=20, fn=15, tn=80))
    assert m["sensitivity"] == pytest.approx(0.85)
    assert m["specificity"] == pytest.approx(0.80)
    assert m["accuracy"] == pytest.approx(0.825)
    assert math.isnan(summary_metrics(ConfusionCounts(0, 0, 5, 5))["ppv"])


def test_predictive_values_table_consistency():
    ppv, npv = predictive_values(0.85, 0.80, 0.272)
    assert ppv == pytest.approx(0.2312 / 0.3768)
    assert abs(ppv - 0.614) < 0.005 and abs(npv - 0.934) < 0.005


def test_kappa():
    assert cohens_kappa(ConfusionCounts(40, 10, 20, 30)) == pytest.approx(0.4, abs=1e-15)
    assert cohens_kappa(ConfusionCounts(50, 0, 0, 50)) == 1.0
    assert cohens_kappa(ConfusionCounts(25, 25, 25, 25)) == 0.0
    assert math.isnan(cohens_kappa(ConfusionCounts(10, 0, 0, 0)))


@given(st.integers(1, 50), st.integers(1, 50), st.integers(1, 50), st.integers(1, 50))
def test_kappa_zero_for_product_joint(a, b, c, d):
    # joint = outer product of marginals (pred: a:b, truth: c:d)
    counts = ConfusionCounts(tp=a * c, fp=a * d, fn=b * c, tn=b * d)
    assert cohens_kappa(counts) == pytest.approx(0.0, abs=1e-12)


def test_match_sensitivity_example():
    cases = ScoredCases.from_arrays([0.9, 0.7, 0.4, 0.2, 0.5, 0.3, 0.1], [1, 1, 1, 1, 0, 0, 0])
    op = match_operating_point(cases, "sensitivity", 0.75)
    assert op.threshold == 0.4 and op.achieved_sensitivity == 0.75 and op.attained
    zero = match_operating_point(cases, "sensitivity", 0.0)
    assert zero.threshold > 0.9 and zero.achieved_specificity == 1.0


def test_match_operating_point_is_consistent_with_confusion():
    rng = np.random.default_rng(1)
    cases = ScoredCases.from_arrays(rng.random(60), rng.integers(0, 2, 60))
    for kind in ("sensitivity", "specificity"):
        for target in np.linspace(0, 1, 11):
            op = match_operating_point(cases, kind, target)
            m = summary_metrics(confusion_at(cases, op.threshold))
            assert m["sensitivity"] == op.achieved_sensitivity
            assert m["specificity"] == op.achieved_specificity
            assert getattr(op, f"achieved_{kind}") >= target


def test_match_unattainable_flag():
    cases = ScoredCases.from_arrays([0.5, 0.5], [1, 1])
    op = match_operating_point(cases, "specificity", 0.5)  # no negatives: specificity undefined
    assert not op.attained


def test_sensitivity_monotone_in_threshold():
    rng = np.random.default_rng(2)
    cases = ScoredCases.from_arrays(rng.random(80), rng.integers(0, 2, 80))
    grid = np.linspace(0, 1, 41)
    sens = [summary_metrics(confusion_at(cases, t))["sensitivity"] for t in grid]
    spec = [summary_metrics(confusion_at(cases, t))["specificity"] for t in grid]
    assert np.all(np.diff(sens) <= 0) and np.all(np.diff(spec) >= 0)


def test_model_dominating_grader_has_higher_matched_specificity():
    rng = np.random.default_rng(3)
    truth = rng.integers(0, 2, 400)
    score = np.clip(truth * 0.35 + rng.normal(0.3, 0.15, 400), 0, 1)
    grader = np.where(rng.random(400) < 0.25, 1 - truth, truth)
    g = summary_metrics(confusion_at((grader.astype(float), truth), 0.5))
    op = match_operating_point(ScoredCases.from_arrays(score, truth), "sensitivity", g["sensitivity"])
    assert op.achieved_specificity > g["specificity"]


def test_nearest_rank_and_trivial_bootstrap():
    vals = np.arange(1, 11) / 10
    assert nearest_rank(vals, 2.5) == 0.1
    assert nearest_rank(vals, 97.5) == 1.0
    assert nearest_rank(vals, 50) == 0.5
    cases = ScoredCases.from_arrays([0.7] * 6, [1] * 6, patient_id=["a", "a", "b", "c", "c", "d"])
    res = bootstrap_ci(cases, lambda c: float(np.median(c.score)), replicates=50, seed=0)
    assert res.ci_low == res.ci_high == res.point_estimate == 0.7


def test_bootstrap_nearest_rank_on_ten_replicates():
    # metric = the value chosen by each replicate's first draw; check against a hand replay
    cases = ScoredCases.from_arrays(np.arange(10) / 10, [0, 1] * 5, patient_id=[f"p{i}" for i in range(10)])
    res = bootstrap_ci(cases, lambda c: float(np.mean(c.score)), replicates=10, seed=7)
    replay = sorted(float(np.mean(cases.score[bootstrap_replicate_indices(cases.patient_id, 7, r)]))
                    for r in range(10))
    assert res.ci_low == replay[0] and res.ci_high == replay[-1]


def test_bootstrap_deterministic_and_parallel_equivalent():
    rng = np.random.default_rng(4)
    cases = ScoredCases.from_arrays(rng.random(80), rng.integers(0, 2, 80),
                                    patient_id=[f"p{i // 2}" for i in range(80)])
    a = bootstrap_ci(cases, auc, replicates=200, seed=11)
    b = bootstrap_ci(cases, auc, replicates=200, seed=11)
    c = bootstrap_ci(cases, auc, replicates=200, seed=11, workers=4)
    assert a == b == c
    assert a.ci_low <= a.point_estimate <= a.ci_high
    multi = bootstrap_metrics(cases, {"auc": auc}, replicates=200, seed=11)
    assert multi["auc"] == a


def test_bootstrap_resamples_patients():
    pid = np.array(["a", "a", "a", "b", "c", "c"])
    for r in range(20):
        idx = bootstrap_replicate_indices(pid, 3, r)
        counts = {p: int(np.sum(pid[idx] == p)) for p in "abc"}
        # every patient contributes a multiple of its image count
        assert counts["a"] % 3 == 0 and counts["c"] % 2 == 0
        assert counts["a"] // 3 + counts["b"] + counts["c"] // 2 == 3


def test_bootstrap_degenerate_errors():
    cases = ScoredCases.from_arrays([0.1, 0.9, 0.2, 0.8], [0, 1, 0, 1], patient_id=["a", "b", "c", "d"])
    with pytest.raises(DegenerateResampleError):
        bootstrap_ci(cases, lambda c: math.nan, replicates=20)
    with pytest.raises(ValueError):
        bootstrap_ci(cases.take([0, 1]).with_scores([0.1, 0.2]).__class__.from_arrays([0.1], [1]), auc)
    lax = bootstrap_metrics(cases, {"nan": lambda c: math.nan}, replicates=20, strict=False)
    assert math.isnan(lax["nan"].ci_low) and lax["nan"].undefined_fraction == 1.0


def test_bootstrap_coverage():
    # binormal scores, population AUC = Phi(d / sqrt(2))
    from scipy.stats import norm

    d = 1.0
    true_auc = norm.cdf(d / np.sqrt(2))
    hits = 0
    for trial in range(200):
        rng = np.random.default_rng([99, trial])
        truth = rng.integers(0, 2, 150)
        score = rng.normal(d * truth, 1.0)
        score = 1 / (1 + np.exp(-score))
        cases = ScoredCases.from_arrays(score, truth)
        res = bootstrap_ci(cases, auc, replicates=200, seed=trial)
        hits += res.ci_low <= true_auc <= res.ci_high
    assert hits / 200 >= 0.88


def test_permutation_identical_gives_one():
    a = np.array([1, 0, 1, 1, 0])
    res = permutation_test(a, a, [1, 0, 0, 1, 0], metric_function("sensitivity"), permutations=100)
    assert res.observed_difference == 0 and res.p_value == 1.0


def test_permutation_minimum_p():
    truth = np.array([0] * 20)
    model = np.zeros(20, dtype=int)
    grader = np.ones(20, dtype=int)
    res = permutation_test(model, grader, truth, metric_function("specificity"), permutations=2000, seed=0)
    assert res.observed_difference == 1.0
    assert res.p_value == pytest.approx(1 / 2001)


def test_permutation_null_calibration():
    spec = metric_function("specificity")
    rejections = 0
    for trial in range(200):
        rng = np.random.default_rng([5, trial])
        truth = rng.integers(0, 2, 120)
        flip = lambda: np.where(rng.random(120) < 0.2, 1 - truth, truth)  # noqa: E731
        res = permutation_test(flip(), flip(), truth, spec, permutations=200, seed=trial)
        rejections += res.p_value < 0.05
    assert rejections / 200 <= 0.08


def test_permutation_errors():
    with pytest.raises(ValueError):
        permutation_test([], [], [], metric_function("ppv"))
    with pytest.raises(ValueError):
        permutation_test([1], [1, 0], [1], metric_function("ppv"))


def test_majority_vote():
    assert majority_vote([1, 1, 0]) == 1
    assert majority_vote([1, 0, 0]) == 0
    assert majority_vote([1, 0, 1], [True, True, False]) == 1
    assert majority_vote([1, 0, None]) == 1
    with pytest.raises(ValueError):
        majority_vote([1, 0], [False, False])


def test_majority_vote_exhaustive():
    for grades in itertools.product((0, 1), repeat=3):
        for ok in itertools.product((False, True), repeat=3):
            if not any(ok):
                continue
            votes = [g for g, k in zip(grades, ok) if k]
            assert majority_vote(grades, ok) == int(sum(votes) * 2 >= len(votes))


def test_error_thickness_profile():
    prof = binary_error_thickness_profile([1, 1, 1, 0], [0, 0, 0, 1], [240, 200, 230, 300])
    assert prof["fp_fraction_above"] == pytest.approx(2 / 3)
    assert prof["fn_fraction_below"] == 0.0
    cases = ScoredCases.from_arrays([0.9, 0.1], [1, 0], thickness=[300, 200])
    perfect = error_thickness_profile(cases, 0.5)
    assert math.isnan(perfect["fp_fraction_above"]) and math.isnan(perfect["fn_fraction_below"])
    with pytest.raises(ValueError):
        error_thickness_profile(ScoredCases.from_arrays([0.9], [1]), 0.5)


def test_scored_case_validation():
    with pytest.raises(ValueError):
        ScoredCases.from_arrays([math.nan], [1])
    with pytest.raises(ValueError):
        ScoredCases.from_arrays([0.5], [2])
    cases = ScoredCases.from_cases([ScoredCase("p", "p_L", 0.3, 1, 250.0), ScoredCase("q", "q_R", 0.2, 0, 240.0)])
    assert cases.thickness.tolist() == [250.0, 240.0]
