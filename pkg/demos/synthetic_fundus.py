"""A small synthetic fundus dataset, augmentation and crop masks.

Generates a few patients, writes example augmentations and fovea/disc crops
as PPM files, and prints the label counts. Output goes to the directory given
on the command line (default ``demo_fundus``).

    python demos/synthetic_fundus.py /tmp/demo_fundus
"""

import sys
from collections import Counter
from pathlib import Path

import numpy as np

from dmelab.imageops import AugmentConfig, CropSpec, augment, circular_mask, read_ppm, write_ppm
from dmelab.synthgen import SynthConfig, generate_dataset

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_fundus")
manifest = generate_dataset(SynthConfig(image_size=128, seed=7), n_patients=20, out_dir=out / "data")
print(f"wrote {len(manifest)} images to {out / 'data'}")

labels = Counter()
for rec in manifest.records:
    labels["ci-DME"] += rec.labels.center_point_thickness >= 250
    labels["SRF"] += bool(rec.labels.srf_present)
    labels["IRF"] += bool(rec.labels.irf_present)
print("positives:", dict(labels))

# the thickest eye makes the lesion easiest to see
rec = max(manifest.records, key=lambda r: r.labels.center_point_thickness)
image = read_ppm(manifest.resolve(rec), dtype=np.float32)
print(f"{rec.image_id}: CPT {rec.labels.center_point_thickness:.0f} um")

rng = np.random.default_rng(0)
for k in range(4):
    write_ppm(out / f"augmented_{k}.ppm", augment(image, AugmentConfig(), rng))

for spec in (CropSpec("fovea", 0.5), CropSpec("fovea", 1.0), CropSpec("disc", 1.0)):
    masked = circular_mask(image, rec.landmarks, spec)
    write_ppm(out / f"crop_{spec.center}_{spec.radius_dd}.ppm", masked)
    print(f"{spec.center} {spec.radius_dd} DD keeps {np.mean(masked.any(axis=-1)):.1%} of pixels")
