"""Screening statistics on a toy reader study.

Walks through the evaluation toolkit on simulated scores: ROC/AUC, the
operating point matched to a grader, predictive values at a given
prevalence, agreement (kappa), a patient-level bootstrap CI and the paired
permutation test.

    python demos/screening_statistics.py
"""

import numpy as np

from dmelab.evaluation import (
    ScoredCases,
    auc,
    binary_metrics,
    bootstrap_ci,
    cohens_kappa,
    confusion_from_predictions,
    match_operating_point,
    metric_function,
    permutation_test,
    predictive_values,
)

rng = np.random.default_rng(1)

# 300 patients, two eyes each; eyes of one patient share a severity
n_patients = 300
severity = np.repeat(rng.normal(0, 1, n_patients), 2) + rng.normal(0, 0.3, 2 * n_patients)
truth = (severity > 0.6).astype(int)
score = 1 / (1 + np.exp(-(2.0 * severity + rng.normal(0, 1, len(severity)))))
patients = np.repeat([f"P{i:03d}" for i in range(n_patients)], 2)
cases = ScoredCases.from_arrays(score, truth, patient_id=patients)

# a human grader who misses 25% of positives and flags 15% of negatives
grader = np.where(truth == 1, rng.random(len(truth)) > 0.25, rng.random(len(truth)) < 0.15).astype(int)

print(f"{len(cases)} images, {truth.mean():.1%} positive")
print(f"model AUC {auc(cases):.3f}")

g = binary_metrics(grader, truth)
print(f"grader: sensitivity {g['sensitivity']:.3f}, specificity {g['specificity']:.3f}")

op = match_operating_point(cases, "sensitivity", g["sensitivity"])
model_calls = (cases.score >= op.threshold).astype(int)
print(f"model at matched sensitivity: threshold {op.threshold:.3f}, "
      f"sensitivity {op.achieved_sensitivity:.3f}, specificity {op.achieved_specificity:.3f}")

# the same operating point means different things in a low-prevalence clinic
for prevalence in (truth.mean(), 0.08):
    ppv, npv = predictive_values(op.achieved_sensitivity, op.achieved_specificity, prevalence)
    print(f"prevalence {prevalence:.2f}: PPV {ppv:.3f}, NPV {npv:.3f}")

kappa = cohens_kappa(confusion_from_predictions(grader, truth))
print(f"grader kappa vs truth {kappa:.3f}")

ci = bootstrap_ci(cases, auc, replicates=1000, seed=0)
print(f"AUC 95% CI (patient bootstrap) [{ci.ci_low:.3f}, {ci.ci_high:.3f}]")

spec = metric_function("specificity")
res = permutation_test(model_calls, grader, truth, spec, permutations=2000, seed=0)
print(f"specificity difference model - grader {res.observed_difference:+.3f}, p = {res.p_value:.4f}")
