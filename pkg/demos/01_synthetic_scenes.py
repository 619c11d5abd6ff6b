"""
Synthetic scenes and dataset splits
===================================

"""

import tempfile

import numpy as np

from no2dense.datamodel import compute_norm_stats, generate_synthetic, split_counts, split_dataset, synthetic_label_spec

# write 40 synthetic 200x200 scenes, each with one NO2 value tied to its center
out = tempfile.mkdtemp(prefix="no2dense_demo_")
manifest = generate_synthetic(40, seed=0, out_dir=out)
scene = manifest.load(manifest.entries[0])
print(scene.station_id, scene.inputs.shape, scene.landcover.shape, round(scene.no2_value, 2))

# the label law is linear in the center land-cover fractions and the trace-gas mean
spec = synthetic_label_spec()
print("intercept", spec["intercept"], "class coefficients", spec["class_coefficients"])

# 70/15/15 split, reproducible from the seed
print("split sizes for 2871 samples:", split_counts(2871))
manifest = split_dataset(manifest.entries, seed=7, root=out)
print(manifest.counts())

# normalization statistics come from the train split only
stats = compute_norm_stats(manifest)
print("target mean/std", round(stats.target_mean, 2), round(stats.target_std, 2))
print("channel means", np.round(stats.mean[:3], 1), "...")
