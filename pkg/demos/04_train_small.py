"""
A short training run on synthetic data
======================================

Small widths keep this to well under a minute on a laptop CPU.
"""

import tempfile
from pathlib import Path

from no2dense.datamodel import generate_synthetic, split_dataset
from no2dense.evaluator import evaluate_split, format_table
from no2dense.loss import LossConfig
from no2dense.model import BackboneConfig
from no2dense.sampler import SamplerConfig
from no2dense.trainer import TrainConfig, train

work = Path(tempfile.mkdtemp(prefix="no2dense_train_"))
m = generate_synthetic(30, seed=2, out_dir=work / "data")
m = split_dataset(m.entries, seed=0, root=work / "data")

cfg = TrainConfig(
    backbone=BackboneConfig("autoencoder", [8, 16, 16, 16], 16, 64),
    sampler=SamplerConfig(8),
    loss=LossConfig(lam=0.1),
    learning_rate=3e-3,
    batch_size=8,
    max_epochs=6,
    checkpoint_dir=str(work / "ck"),
)
state = train(cfg, m, log=lambda r: print(r) if "val_mae" in r else None)
print("best checkpoint:", state.best_checkpoint)

report = evaluate_split(state.best_checkpoint, m, "test")
print(format_table([report], literature=None))
