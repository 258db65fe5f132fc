"""Screening statistics: ROC/AUC, confusion metrics, operating points, kappa,
patient-level bootstrap, paired permutation tests and grader fusion.

Undefined quantities (zero denominators, single-class ROC inputs inside a
resample) are reported as NaN rather than 0.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np


@dataclass(frozen=True)
class ScoredCase:
    patient_id: str
    image_id: str
    score: float
    truth: int
    thickness: Optional[float] = None


@dataclass(frozen=True)
class ScoredCases:
    """Column-wise collection of scored cases; the unit all statistics work on."""

    patient_id: np.ndarray
    image_id: np.ndarray
    score: np.ndarray
    truth: np.ndarray
    thickness: Optional[np.ndarray] = None

    def __post_init__(self):
        score = np.asarray(self.score, dtype=np.float64)
        truth = np.asarray(self.truth)
        if not np.all(np.isfinite(score)):
            raise ValueError("scores must be finite")
        if not np.isin(truth, (0, 1)).all():
            raise ValueError("truth must be 0 or 1")
        object.__setattr__(self, "score", score)
        object.__setattr__(self, "truth", truth.astype(np.int8))
        object.__setattr__(self, "patient_id", np.asarray(self.patient_id))
        object.__setattr__(self, "image_id", np.asarray(self.image_id))
        if self.thickness is not None:
            object.__setattr__(self, "thickness", np.asarray(self.thickness, dtype=np.float64))
        n = len(score)
        for name in ("patient_id", "image_id", "truth"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"{name} length differs from score length")

    @classmethod
    def from_arrays(cls, score, truth, patient_id=None, image_id=None, thickness=None) -> "ScoredCases":
        n = len(score)
        ids = np.array([f"c{i}" for i in range(n)])
        return cls(ids if patient_id is None else patient_id, ids if image_id is None else image_id,
                   score, truth, thickness)

    @classmethod
    def from_cases(cls, cases: Sequence[ScoredCase]) -> "ScoredCases":
        thick = [c.thickness for c in cases]
        return cls(
            np.array([c.patient_id for c in cases]),
            np.array([c.image_id for c in cases]),
            np.array([c.score for c in cases], dtype=float),
            np.array([c.truth for c in cases]),
            None if any(t is None for t in thick) else np.array(thick, dtype=float),
        )

    def __len__(self) -> int:
        return len(self.score)

    def take(self, idx) -> "ScoredCases":
        return ScoredCases(self.patient_id[idx], self.image_id[idx], self.score[idx], self.truth[idx],
                           None if self.thickness is None else self.thickness[idx])

    def with_scores(self, score) -> "ScoredCases":
        return ScoredCases(self.patient_id, self.image_id, score, self.truth, self.thickness)

    def with_truth(self, truth) -> "ScoredCases":
        return ScoredCases(self.patient_id, self.image_id, self.score, truth, self.thickness)


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


@dataclass(frozen=True)
class OperatingPoint:
    threshold: float
    achieved_sensitivity: float
    achieved_specificity: float
    attained: bool = True


@dataclass(frozen=True)
class BootstrapResult:
    point_estimate: float
    ci_low: float
    ci_high: float
    replicates: int
    seed: int
    n: int
    undefined_fraction: float = 0.0

    def to_dict(self) -> dict:
        return {"value": self.point_estimate, "ci_low": self.ci_low, "ci_high": self.ci_high, "n": self.n,
                "replicates": self.replicates, "seed": self.seed, "undefined_fraction": self.undefined_fraction}


@dataclass(frozen=True)
class PermutationResult:
    observed_difference: float
    p_value: float
    permutations: int
    seed: int


# -- ROC ----------------------------------------------------------------------

def _roc_points(score, truth):
    """Cumulative (fp, tp, threshold) at each distinct score, thresholds descending."""
    order = np.argsort(-score, kind="mergesort")
    s = score[order]
    t = truth[order]
    tp = np.cumsum(t, dtype=np.int64)
    fp = np.arange(1, len(t) + 1) - tp
    last = np.r_[s[1:] != s[:-1], True]
    return fp[last], tp[last], s[last]


def _as_arrays(cases):
    if isinstance(cases, ScoredCases):
        return cases.score, cases.truth
    score, truth = cases
    return np.asarray(score, dtype=np.float64), np.asarray(truth).astype(np.int8)


def roc_and_auc(cases) -> tuple[np.ndarray, float]:
    """ROC curve as ``(k, 3)`` rows of (fpr, tpr, threshold) and the trapezoidal AUC.

    A case is called positive when ``score >= threshold``. The curve starts at
    (0, 0) with threshold ``+inf`` and ends at (1, 1). Ties between a positive
    and a negative count one half, so the AUC equals the Mann-Whitney statistic.
    ``cases`` is a :class:`ScoredCases` or a ``(score, truth)`` pair.
    """
    score, truth = _as_arrays(cases)
    n_pos = int(truth.sum())
    n_neg = len(truth) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("ROC needs at least one positive and one negative case")
    fp, tp, thr = _roc_points(score, truth)
    fpr = np.r_[0.0, fp / n_neg]
    tpr = np.r_[0.0, tp / n_pos]
    thr = np.r_[np.inf, thr]
    auc = float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1])) / 2.0)
    return np.column_stack([fpr, tpr, thr]), auc


def auc(cases) -> float:
    """AUC, or NaN when only one class is present."""
    score, truth = _as_arrays(cases)
    n_pos = int(truth.sum())
    if n_pos == 0 or n_pos == len(truth):
        return math.nan
    return roc_and_auc((score, truth))[1]


def mann_whitney_auc(score, truth) -> float:
    """Pair-count AUC via mid-ranks; an independent route to the same number."""
    score = np.asarray(score, dtype=np.float64)
    truth = np.asarray(truth).astype(bool)
    n_pos, n_neg = truth.sum(), (~truth).sum()
    order = np.argsort(score, kind="mergesort")
    s = score[order]
    ranks = np.empty(len(s))
    i = 0
    while i < len(s):
        j = i
        while j + 1 < len(s) and s[j + 1] == s[i]:
            j += 1
        ranks[i:j + 1] = (i + j) / 2.0 + 1.0
        i = j + 1
    r = np.empty_like(ranks)
    r[order] = ranks
    return float((r[truth].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


# -- confusion metrics --------------------------------------------------------

def confusion_from_predictions(predicted, truth) -> ConfusionCounts:
    predicted = np.asarray(predicted).astype(bool)
    truth = np.asarray(truth).astype(bool)
    return ConfusionCounts(
        tp=int(np.sum(predicted & truth)),
        fp=int(np.sum(predicted & ~truth)),
        fn=int(np.sum(~predicted & truth)),
        tn=int(np.sum(~predicted & ~truth)),
    )


def confusion_at(cases, threshold: float) -> ConfusionCounts:
    score, truth = _as_arrays(cases)
    if len(score) == 0:
        raise ValueError("no cases")
    return confusion_from_predictions(score >= threshold, truth)


def _ratio(num, den):
    return num / den if den > 0 else math.nan


def summary_metrics(counts: ConfusionCounts) -> dict:
    c = counts
    return {
        "sensitivity": _ratio(c.tp, c.tp + c.fn),
        "specificity": _ratio(c.tn, c.tn + c.fp),
        "ppv": _ratio(c.tp, c.tp + c.fp),
        "npv": _ratio(c.tn, c.tn + c.fn),
        "accuracy": _ratio(c.tp + c.tn, c.total),
    }


def predictive_values(sensitivity: float, specificity: float, prevalence: float) -> tuple[float, float]:
    """PPV and NPV implied by sensitivity and specificity at a given prevalence."""
    tp = sensitivity * prevalence
    fp = (1 - specificity) * (1 - prevalence)
    tn = specificity * (1 - prevalence)
    fn = (1 - sensitivity) * prevalence
    return tp / (tp + fp), tn / (tn + fn)


def cohens_kappa(counts: ConfusionCounts) -> float:
    c = counts
    n = c.total
    if n == 0:
        raise ValueError("kappa needs at least one case")
    p_o = (c.tp + c.tn) / n
    pred_pos, truth_pos = (c.tp + c.fp) / n, (c.tp + c.fn) / n
    p_e = pred_pos * truth_pos + (1 - pred_pos) * (1 - truth_pos)
    if p_e == 1.0:
        return math.nan
    return (p_o - p_e) / (1 - p_e)


METRIC_NAMES = ("ppv", "npv", "sensitivity", "specificity", "accuracy", "kappa")


def binary_metrics(predicted, truth) -> dict:
    counts = confusion_from_predictions(predicted, truth)
    out = summary_metrics(counts)
    out["kappa"] = cohens_kappa(counts) if counts.total else math.nan
    return out


# -- operating points ---------------------------------------------------------

def _threshold_table(score, truth):
    """Candidate thresholds ascending (every distinct score plus one above the max) with sens/spec."""
    n_pos = int(truth.sum())
    n_neg = len(truth) - n_pos
    fp, tp, thr = _roc_points(score, truth)  # descending thresholds
    thr = np.r_[np.nextafter(thr[0], np.inf), thr][::-1]
    tp = np.r_[0, tp][::-1]
    fp = np.r_[0, fp][::-1]
    sens = tp / n_pos if n_pos else np.full(len(tp), math.nan)
    spec = (n_neg - fp) / n_neg if n_neg else np.full(len(fp), math.nan)
    return thr, sens, spec


def match_operating_point(cases, kind: str, value: float) -> OperatingPoint:
    """Threshold matching a target sensitivity or specificity.

    For ``kind='sensitivity'`` the largest threshold whose sensitivity is at
    least ``value`` (which maximises specificity under that floor); for
    ``kind='specificity'`` the smallest threshold whose specificity is at least
    ``value``. If nothing qualifies the boundary threshold is returned with
    ``attained=False``.
    """
    if not 0.0 <= value <= 1.0:
        raise ValueError("target must be in [0, 1]")
    score, truth = _as_arrays(cases)
    thr, sens, spec = _threshold_table(score, truth)
    if kind == "sensitivity":
        ok = np.nonzero(sens >= value)[0]
        i, attained = (ok[-1], True) if len(ok) else (0, False)
    elif kind == "specificity":
        ok = np.nonzero(spec >= value)[0]
        i, attained = (ok[0], True) if len(ok) else (len(thr) - 1, False)
    else:
        raise ValueError(f"kind must be 'sensitivity' or 'specificity', got {kind!r}")
    return OperatingPoint(float(thr[i]), float(sens[i]), float(spec[i]), attained)


# -- resampling ---------------------------------------------------------------

class DegenerateResampleError(ValueError):
    pass


def nearest_rank(values, pct: float) -> float:
    """Nearest-rank percentile: the ceil(pct/100 * n)-th smallest value (1-based)."""
    v = np.sort(np.asarray(values, dtype=np.float64))
    rank = max(1, math.ceil(pct / 100.0 * len(v)))
    return float(v[rank - 1])


def _patient_index(patient_id):
    uniq, inverse = np.unique(patient_id, return_inverse=True)
    return len(uniq), inverse


def bootstrap_replicate_indices(patient_id, seed: int, replicate: int) -> np.ndarray:
    """Case indices of one patient-level resample: N patients drawn with replacement, each bringing all its images."""
    n_patients, inverse = _patient_index(patient_id)
    draw = np.random.default_rng([seed, replicate]).integers(0, n_patients, n_patients)
    multiplicity = np.bincount(draw, minlength=n_patients)
    return np.repeat(np.arange(len(inverse)), multiplicity[inverse])


def _bootstrap_values(cases: ScoredCases, fn: Callable[[ScoredCases], np.ndarray], replicates: int, seed: int,
                      workers: int) -> np.ndarray:
    n_patients, inverse = _patient_index(cases.patient_id)
    if n_patients < 2:
        raise ValueError("bootstrap needs at least two distinct patients")
    base = np.arange(len(inverse))

    def one(r):
        draw = np.random.default_rng([seed, r]).integers(0, n_patients, n_patients)
        idx = np.repeat(base, np.bincount(draw, minlength=n_patients)[inverse])
        return np.atleast_1d(np.asarray(fn(cases.take(idx)), dtype=np.float64))

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            return np.array(list(pool.map(one, range(replicates))))
    return np.array([one(r) for r in range(replicates)])


def _summarise(point, values, replicates, seed, n, max_undefined, name="metric"):
    defined = values[~np.isnan(values)]
    undefined = 1.0 - len(defined) / replicates
    if undefined > max_undefined:
        raise DegenerateResampleError(f"{name} undefined on {undefined:.0%} of bootstrap replicates")
    return BootstrapResult(float(point), nearest_rank(defined, 2.5), nearest_rank(defined, 97.5), replicates, seed,
                           n, undefined)


def bootstrap_ci(cases: ScoredCases, metric: Callable[[ScoredCases], float], replicates: int = 2000,
                 seed: int = 0, workers: int = 1, max_undefined: float = 0.2) -> BootstrapResult:
    """Patient-level percentile bootstrap (nearest-rank 2.5 / 97.5).

    Each replicate draws N of the N patients with replacement and carries all
    of their images. Replicate ``r`` uses ``default_rng([seed, r])`` so results
    do not depend on evaluation order or ``workers``. Replicates where the
    metric is undefined (NaN) are dropped; more than ``max_undefined`` of them
    is an error.
    """
    values = _bootstrap_values(cases, metric, replicates, seed, workers)[:, 0]
    return _summarise(metric(cases), values, replicates, seed, len(cases), max_undefined)


def bootstrap_metrics(cases: ScoredCases, metrics: dict, replicates: int = 2000, seed: int = 0,
                      workers: int = 1, max_undefined: float = 0.2, strict: bool = True) -> dict:
    """Like :func:`bootstrap_ci` for several metrics evaluated on the same resamples.

    With ``strict=False`` a metric that is undefined too often gets NaN bounds
    instead of raising.
    """
    names = list(metrics)

    def fn(c):
        return [metrics[k](c) for k in names]

    values = _bootstrap_values(cases, fn, replicates, seed, workers)
    point = fn(cases)
    out = {}
    for i, k in enumerate(names):
        try:
            out[k] = _summarise(point[i], values[:, i], replicates, seed, len(cases), max_undefined, k)
        except DegenerateResampleError:
            if strict:
                raise
            undefined = float(np.mean(np.isnan(values[:, i])))
            out[k] = BootstrapResult(float(point[i]), math.nan, math.nan, replicates, seed, len(cases), undefined)
    return out


def permutation_test(model_binary, grader_binary, truth, metric: Callable[[np.ndarray, np.ndarray], float],
                     permutations: int = 2000, seed: int = 0) -> PermutationResult:
    """Paired permutation test of ``metric(model) - metric(grader)``.

    Each permutation swaps the model and grader calls of every case
    independently with probability one half, using ``default_rng([seed, i])``.
    The p-value is ``(1 + #{|permuted| >= |observed|}) / (1 + permutations)``.
    """
    a = np.asarray(model_binary).astype(np.int8)
    b = np.asarray(grader_binary).astype(np.int8)
    y = np.asarray(truth).astype(np.int8)
    if len(a) == 0:
        raise ValueError("no cases in common")
    if not (len(a) == len(b) == len(y)):
        raise ValueError("model, grader and truth must cover the same cases")
    observed = float(metric(a, y) - metric(b, y))
    hits = 0
    for i in range(permutations):
        swap = np.random.default_rng([seed, i]).random(len(a)) < 0.5
        pa = np.where(swap, b, a)
        pb = np.where(swap, a, b)
        # tolerance guards against float noise between equal differences
        if abs(metric(pa, y) - metric(pb, y)) >= abs(observed) - 1e-12:
            hits += 1
    return PermutationResult(observed, (1 + hits) / (1 + permutations), permutations, seed)


def metric_function(name: str) -> Callable[[np.ndarray, np.ndarray], float]:
    """``f(predicted, truth)`` for one of :data:`METRIC_NAMES`."""
    if name == "kappa":
        return lambda p, t: cohens_kappa(confusion_from_predictions(p, t))
    if name not in METRIC_NAMES:
        raise ValueError(f"unknown metric {name!r}")
    return lambda p, t: summary_metrics(confusion_from_predictions(p, t))[name]


# -- grader fusion and error analysis -----------------------------------------

def majority_vote(grades: Sequence[Optional[int]], gradable: Optional[Sequence[bool]] = None) -> int:
    """Positive iff more than half of the gradable grades are positive; a tie refers (returns 1)."""
    if gradable is None:
        gradable = [g is not None for g in grades]
    votes = [int(g) for g, ok in zip(grades, gradable) if ok]
    if not votes:
        raise ValueError("no gradable assessments")
    pos = sum(votes)
    return int(2 * pos >= len(votes))


def binary_error_thickness_profile(predicted, truth, thickness, fp_cut: float = 225.0, fn_cut: float = 275.0) -> dict:
    predicted = np.asarray(predicted).astype(bool)
    truth = np.asarray(truth).astype(bool)
    thickness = np.asarray(thickness, dtype=np.float64)
    if np.isnan(thickness).any():
        raise ValueError("thickness required for every case")
    fp = thickness[predicted & ~truth]
    fn = thickness[~predicted & truth]
    return {
        "fp_fraction_above": float(np.mean(fp > fp_cut)) if len(fp) else math.nan,
        "fn_fraction_below": float(np.mean(fn < fn_cut)) if len(fn) else math.nan,
        "n_fp": int(len(fp)),
        "n_fn": int(len(fn)),
        "fp_thickness": fp.tolist(),
        "fn_thickness": fn.tolist(),
        "fp_cut": fp_cut,
        "fn_cut": fn_cut,
    }


def error_thickness_profile(cases: ScoredCases, threshold: float, fp_cut: float = 225.0, fn_cut: float = 275.0) -> dict:
    """Fraction of false positives thicker than ``fp_cut`` and of false negatives thinner than ``fn_cut``."""
    if cases.thickness is None:
        raise ValueError("thickness required for every case")
    return binary_error_thickness_profile(cases.score >= threshold, cases.truth, cases.thickness, fp_cut, fn_cut)
