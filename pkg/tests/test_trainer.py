import math
from dataclasses import replace

import numpy as np
import pytest
import torch

from no2dense.datamodel import compute_norm_stats
from no2dense.errors import ConfigError, InsufficientDataError
from no2dense.loss import LossConfig
from no2dense.model import BackboneConfig, load_checkpoint
from no2dense.sampler import SamplerConfig
from no2dense.trainer import SceneStore, TrainConfig, train, validate, with_overrides

from .conftest import TINY


def tiny_cfg(tmp_path, **kw):
    base = dict(
        backbone=BackboneConfig("autoencoder", **TINY),
        sampler=SamplerConfig(8),
        loss=LossConfig(0.0),
        batch_size=4,
        max_epochs=2,
        checkpoint_dir=str(tmp_path / "ck"),
    )
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def split_manifest(synth_dir):
    _, manifest = synth_dir
    labels = ["train"] * 8 + ["val"] * 2 + ["test"] * 2
    return replace(manifest, entries=[replace(e, split=s) for e, s in zip(manifest.entries, labels)])


@pytest.fixture(scope="module")
def store(split_manifest):
    return SceneStore(split_manifest)


class TestConfig:
    def test_round_trip(self, tmp_path):
        cfg = tiny_cfg(tmp_path, lr_schedule="cosine")
        cfg.save(tmp_path / "c.json")
        assert TrainConfig.from_file(tmp_path / "c.json") == cfg

    def test_unknown_keys(self):
        with pytest.raises(ConfigError, match="bogus"):
            TrainConfig.from_dict({"bogus": 1})
        with pytest.raises(ConfigError, match="loss.gamma"):
            TrainConfig.from_dict({"loss": {"gamma": 1}})

    def test_overrides(self, tmp_path):
        cfg = with_overrides(tiny_cfg(tmp_path), {"sampler.prediction_space": "32", "loss.lam": 0.5, "lr_schedule": "cosine"})
        assert cfg.sampler.prediction_space == 32 and cfg.loss.lam == 0.5 and cfg.lr_schedule == "cosine"
        with pytest.raises(ConfigError):
            with_overrides(cfg, {"sampler.nothing": 1})
        with pytest.raises(ConfigError):
            with_overrides(cfg, {"sampler.prediction_space": 7})

    @pytest.mark.parametrize("kw", [{"learning_rate": 0}, {"batch_size": 0}, {"max_steps": 0}, {"precision": "fp16"}, {"lr_schedule": "step"}])
    def test_invalid(self, kw):
        with pytest.raises(ConfigError):
            TrainConfig(**kw)

    def test_cosine_schedule(self):
        cfg = TrainConfig(learning_rate=2e-3, batch_size=4, max_steps=100, max_epochs=1000, lr_schedule="cosine")
        assert cfg.total_steps(16) == 100
        assert cfg.lr_at(0, 16) == 2e-3
        assert cfg.lr_at(50, 16) == pytest.approx(1e-3)
        assert TrainConfig(max_epochs=3, batch_size=4).total_steps(10) == 9


def test_empty_splits(tmp_path, split_manifest):
    only_train = replace(split_manifest, entries=[replace(e, split="train") for e in split_manifest.entries])
    with pytest.raises(InsufficientDataError):
        train(tiny_cfg(tmp_path), only_train)
    with pytest.raises(InsufficientDataError):
        train(tiny_cfg(tmp_path), replace(split_manifest, entries=[]))


def test_training_is_deterministic(tmp_path, split_manifest, store):
    a = train(tiny_cfg(tmp_path / "a", seed=4), split_manifest, store=store)
    b = train(tiny_cfg(tmp_path / "b", seed=4), split_manifest, store=store)
    assert [r["total"] for r in a.history] == [r["total"] for r in b.history]
    ha = load_checkpoint(a.best_checkpoint).manifest["content_hash"]
    hb = load_checkpoint(b.best_checkpoint).manifest["content_hash"]
    assert ha == hb
    c = train(tiny_cfg(tmp_path / "c", seed=5, max_epochs=1), split_manifest, store=store)
    assert [r["total"] for r in c.history] != [r["total"] for r in a.history[: len(c.history)]]


def test_resume_matches_uninterrupted(tmp_path, split_manifest, store):
    full = train(tiny_cfg(tmp_path / "full", max_epochs=3, seed=2), split_manifest, store=store)
    part = tiny_cfg(tmp_path / "part", max_epochs=2, seed=2)
    train(part, split_manifest, store=store)
    resumed = train(replace(part, max_epochs=3), split_manifest, resume_from=tmp_path / "part" / "ck" / "last", store=store)
    assert [r["total"] for r in resumed.history] == [r["total"] for r in full.history]
    a = load_checkpoint(tmp_path / "full" / "ck" / "last")
    b = load_checkpoint(tmp_path / "part" / "ck" / "last")
    assert a.manifest["content_hash"] == b.manifest["content_hash"]


def test_best_checkpoint_tracks_minimum(tmp_path, split_manifest, store):
    state = train(tiny_cfg(tmp_path, max_epochs=4, learning_rate=3e-3), split_manifest, store=store)
    maes = [v["mae"] for v in state.val_history]
    assert len(maes) == 4
    assert state.best_val_mae == min(maes)
    ck = load_checkpoint(state.best_checkpoint)
    stats = compute_norm_stats(split_manifest)
    cfg = tiny_cfg(tmp_path)
    report = validate(ck.model, [store(e) for e in split_manifest.split("val")], stats, cfg)
    assert report.mae == pytest.approx(state.best_val_mae, rel=1e-6)
    assert ck.manifest["offset_seed"] == 0 and ck.manifest["train_config"]["batch_size"] == 4


def test_log_records(tmp_path, split_manifest, store):
    seen = []
    state = train(tiny_cfg(tmp_path, max_steps=3, loss=LossConfig(0.2)), split_manifest, log=seen.append, store=store)
    steps = [r for r in seen if "sel" in r]
    assert [r["step"] for r in steps] == [1, 2, 3] and state.step == 3
    for r in steps:
        assert math.isfinite(r["total"]) and r["cel"] > 0
        assert r["total"] == pytest.approx(r["sel"] + 0.2 * r["cel"], rel=1e-5)
    assert any("val_mae" in r for r in seen)


def test_frequency_weights_run(tmp_path, split_manifest, store):
    state = train(tiny_cfg(tmp_path, max_steps=2, loss=LossConfig(1.0), frequency_class_weights=True), split_manifest, store=store)
    assert all(math.isfinite(r["total"]) for r in state.history)


def test_bf16_precision_runs(tmp_path, split_manifest, store):
    state = train(tiny_cfg(tmp_path, max_steps=2, precision="bf16"), split_manifest, store=store)
    assert all(math.isfinite(r["total"]) for r in state.history)


@pytest.mark.slow
def test_loss_decreases(tmp_path, split_manifest, store):
    cfg = tiny_cfg(tmp_path, max_epochs=30, learning_rate=3e-3, backbone=BackboneConfig("autoencoder", [8, 16, 16, 16], 16, 64))
    state = train(cfg, split_manifest, store=store)
    first = np.mean([state.epoch_mean_loss(e) for e in (1, 2, 3)])
    final = np.mean([state.epoch_mean_loss(e) for e in (28, 29, 30)])
    assert final < 0.5 * first


class ConstantModel:
    """Stand-in exposing ``predict_planes``; returns a fixed normalized value everywhere."""

    def __init__(self, value):
        self.value = value

    def predict_planes(self, x, P):
        return torch.full((x.shape[0], 1, P, P), float(self.value))


def test_validate_constant_predictor(tmp_path, split_manifest, store):
    stats = compute_norm_stats(split_manifest)
    val = [store(e) for e in split_manifest.split("val") + split_manifest.split("test")]
    y = np.array([s.no2_value for s in val])
    # normalized 0 decodes to the train target mean
    rep = validate(ConstantModel(0.0), val, stats, tiny_cfg(tmp_path))
    assert rep.mae == pytest.approx(np.abs(y - stats.target_mean).mean(), rel=1e-6)
    assert rep.r2 <= 0


def test_validate_perfect_predictor(tmp_path, split_manifest, store):
    stats = compute_norm_stats(split_manifest)
    val = [store(e) for e in split_manifest.split("train")]
    targets = iter(stats.normalize_target(np.array([s.no2_value for s in val])))

    class Oracle:
        def predict_planes(self, x, P):
            return torch.stack([torch.full((1, P, P), float(next(targets)), dtype=torch.float64) for _ in range(x.shape[0])])

    rep = validate(Oracle(), val, stats, tiny_cfg(tmp_path, batch_size=3))
    assert rep.mae == pytest.approx(0.0, abs=1e-9) and rep.r2 == pytest.approx(1.0, abs=1e-12)


@pytest.mark.slow
def test_large_lambda_trades_no2_for_segmentation(tmp_path, split_manifest, store):
    from no2dense.trainer import segmentation_accuracy

    backbone = BackboneConfig("autoencoder", [8, 16, 16, 16], 16, 64)
    common = dict(max_epochs=40, batch_size=2, learning_rate=3e-3, backbone=backbone, seed=1)
    a = train(tiny_cfg(tmp_path / "a", loss=LossConfig(0.0), **common), split_manifest, val_split="train", store=store)
    b = train(tiny_cfg(tmp_path / "b", loss=LossConfig(1e3), **common), split_manifest, val_split="train", store=store)
    stats = compute_norm_stats(split_manifest)
    scenes = [store(e) for e in split_manifest.split("train")]
    cfg = tiny_cfg(tmp_path)
    acc_b = segmentation_accuracy(load_checkpoint(b.best_checkpoint).model, scenes, stats, cfg)
    assert acc_b > 1 / 11
    assert b.best_val_mae > a.best_val_mae, (a.best_val_mae, b.best_val_mae, acc_b)
