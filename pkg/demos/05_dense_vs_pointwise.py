"""
Dense tiling versus the point-wise baseline
===========================================

Both mosaics come from the same untrained network; the point is the pass count.
"""

import tempfile
from pathlib import Path

import numpy as np
import torch

from no2dense.datamodel import NormStats
from no2dense.inference import Scene, infer_dense, infer_pointwise, plan_tiling, render_mosaic
from no2dense.model import BackboneConfig, Checkpoint, DenseEstimator

torch.manual_seed(0)
model = DenseEstimator(BackboneConfig("autoencoder", [8, 16, 16, 16], 16, 64)).eval()
ck = Checkpoint(model, NormStats(np.zeros(13), np.ones(13), 25.0, 8.0), 8, {})
scene = Scene(np.random.default_rng(0).normal(size=(13, 96, 96)))

plan = plan_tiling(96, 96, 8)
print("margin", plan.margin, "windows", len(plan.tiles))

dense = infer_dense(scene, ck, 8)
for P in (8, 32):
    print(f"dense P={P}: {infer_dense(scene, ck, P).pass_count} passes")
point = infer_pointwise(scene, ck, stride=8)
print("point-wise stride 8:", point.pass_count, "passes")

out = Path(tempfile.mkdtemp())
print(render_mosaic(dense, out / "dense.png"), render_mosaic(point, out / "pointwise.png"))
