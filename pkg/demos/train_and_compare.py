"""Train a small model and compare it with simulated graders.

A reduced version of the default experiment (32 px inputs, 300 patients,
300 steps) that runs in a couple of minutes. Prints per-head AUCs and the
model-vs-grader comparison at the grader's sensitivity, then writes the
report to the directory given on the command line (default ``demo_report``).

    python demos/train_and_compare.py /tmp/demo_report
"""

import sys
from dataclasses import replace

from dmelab.experiments import ExperimentConfig, run_suite
from dmelab.model import NetworkConfig, TrainConfig
from dmelab.synthgen import SynthConfig

out = sys.argv[1] if len(sys.argv) > 1 else "demo_report"
net = NetworkConfig(input_size=32, blocks=((16, 3, 1), (32, 3, 1), (32, 3, 1)), global_average_pool=False)
train = TrainConfig(learning_rate=0.01, ema_decay=0.98, total_steps=300)
config = replace(ExperimentConfig(), synth=SynthConfig(image_size=32), n_patients=300, net=net, train=train,
                 replicates=500, permutations=500, experiments=("train_eval",))

records = run_suite(config, out)
results = records[0].results
for head, value in results["heads"].items():
    print(f"{head:6s} AUC {value['value']:.3f} [{value['ci_low']:.3f}, {value['ci_high']:.3f}]"
          if isinstance(value, dict) else f"{head:6s} {value}")

for name, comp in results["comparisons"].items():
    if isinstance(comp, str):
        print(f"{name}: {comp}")
        continue
    m, g = comp["model"]["specificity"], comp["grader"]["specificity"]
    p = comp["permutation"]["specificity"]["p_value"]
    print(f"{name:16s} sensitivity {comp['target']:.3f}: specificity model {m['value']:.3f} "
          f"vs grader {g['value']:.3f} (p = {p:.4f})")
print(f"report in {out}")
