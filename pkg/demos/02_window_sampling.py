"""
Window sampling around the measurement
======================================

"""

import tempfile

import numpy as np

from no2dense.datamodel import generate_synthetic
from no2dense.sampler import SamplerConfig, admissible_offsets, center_crop, sample_window

m = generate_synthetic(1, seed=1, out_dir=tempfile.mkdtemp())
scene = m.load(m.entries[0])

# a 128x128 window is cut so the measured pixel falls inside the central P x P area
for P in (2, 8, 64):
    offs = admissible_offsets(SamplerConfig(P))
    print(f"P={P:2d}: offsets {offs.start}..{offs.stop - 1}")

rng = np.random.default_rng(0)
cfg = SamplerConfig(8)
for _ in range(3):
    w = sample_window(scene, cfg, rng)
    print("offset", w.offset, "gt pixel", w.gt_pixel, "in crop", w.gt_cropped(8))

# cropping the window keeps the measured pixel's values
w = sample_window(scene, cfg, offset=(33, 40))
ci, cj = w.gt_cropped(8)
assert np.array_equal(center_crop(w.inputs, 8)[:, ci, cj], scene.inputs[:, 100, 100])
