"""Mini-batch training on fresh-offset windows with best-validation-MAE checkpointing."""
from __future__ import annotations

import copy
import dataclasses
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from .datamodel import AnnotatedScene, DatasetManifest, ManifestEntry, NormStats, compute_norm_stats
from .errors import ConfigError, InsufficientDataError, NonFiniteLossError
from .evaluator import EvalReport, predict_at_gt
from .loss import LossConfig, class_weights_from_frequencies, combined_loss
from .model import BackboneConfig, DenseEstimator, content_hash, load_checkpoint, save_checkpoint
from .sampler import SamplerConfig, sample_window

logger = logging.getLogger(__name__)

STATE_FILE = "trainer_state.pt"


@dataclass
class TrainConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    learning_rate: float = 1e-3
    batch_size: int = 16
    max_epochs: int = 50
    max_steps: int | None = None
    seed: int = 0
    checkpoint_dir: str = "checkpoints"
    eval_every: int = 1
    frequency_class_weights: bool = False
    lr_schedule: str = "constant"
    deterministic: bool = True
    precision: str = "fp32"

    def __post_init__(self):
        if not self.learning_rate > 0 or self.batch_size < 1 or self.max_epochs < 1 or self.eval_every < 1:
            raise ConfigError("learning_rate, batch_size, max_epochs and eval_every must be positive")
        if self.max_steps is not None and self.max_steps < 1:
            raise ConfigError("max_steps must be positive when set")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ConfigError(f"lr_schedule must be 'constant' or 'cosine', got {self.lr_schedule!r}")
        if self.precision not in ("fp32", "bf16"):
            raise ConfigError(f"precision must be 'fp32' or 'bf16', got {self.precision!r}")

    def total_steps(self, n_train: int) -> int:
        per_epoch = math.ceil(n_train / self.batch_size)
        total = per_epoch * self.max_epochs
        return total if self.max_steps is None else min(total, self.max_steps)

    def lr_at(self, step: int, n_train: int) -> float:
        """Learning rate for the 0-based ``step``."""
        if self.lr_schedule == "constant":
            return self.learning_rate
        return 0.5 * self.learning_rate * (1.0 + math.cos(math.pi * step / self.total_steps(n_train)))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        _reject_unknown(cls, d, "")
        nested = {"backbone": BackboneConfig, "sampler": SamplerConfig, "loss": LossConfig}
        for key, sub in nested.items():
            if key in d:
                _reject_unknown(sub, d[key], key + ".")
                d[key] = sub(**d[key])
        return cls(**d)

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        return path


def _reject_unknown(cls, d, prefix):
    if not isinstance(d, dict):
        raise ConfigError(f"{prefix or 'config'}: expected a mapping")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(d) - known)
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(prefix + k for k in unknown)}")


def _parse_value(text):
    try:
        return json.loads(text)
    except (json.JSONDecodeError, TypeError):
        return text


def with_overrides(cfg: TrainConfig, overrides: dict) -> TrainConfig:
    """Apply dotted ``key=value`` overrides; values may be JSON literals."""
    d = cfg.to_dict()
    for key, value in overrides.items():
        parts = key.split(".")
        node = d
        for p in parts[:-1]:
            if not isinstance(node.get(p), dict):
                raise ConfigError(f"unknown config key: {key}")
            node = node[p]
        if parts[-1] not in node:
            raise ConfigError(f"unknown config key: {key}")
        node[parts[-1]] = _parse_value(value) if isinstance(value, str) else value
    return TrainConfig.from_dict(d)


@dataclass
class TrainState:
    epoch: int = 0
    step: int = 0
    best_val_mae: float = math.inf
    best_checkpoint: str | None = None
    history: list[dict] = field(default_factory=list)
    val_history: list[dict] = field(default_factory=list)
    rng: dict = field(default_factory=dict)

    def epoch_mean_loss(self, epoch: int) -> float:
        vals = [r["total"] for r in self.history if r["epoch"] == epoch]
        return float(np.mean(vals))


class SceneStore:
    """Loads scenes once and keeps them in memory."""

    def __init__(self, manifest: DatasetManifest):
        self.manifest = manifest
        self._cache: dict[str, AnnotatedScene] = {}

    def __call__(self, entry: ManifestEntry) -> AnnotatedScene:
        key = entry.sample_path
        if key not in self._cache:
            self._cache[key] = self.manifest.load(entry)
        return self._cache[key]


def _rng_streams(seed: int):
    data, init, offsets = np.random.SeedSequence(int(seed)).spawn(3)
    return np.random.default_rng(data), int(init.generate_state(1)[0]), np.random.default_rng(offsets)


def validate(model, scenes, stats: NormStats, cfg: TrainConfig, name: str = "val") -> EvalReport:
    if not scenes:
        raise InsufficientDataError(f"split {name!r} is empty")
    P = cfg.sampler.prediction_space
    preds, targets = predict_at_gt(model, scenes, stats, P, cfg.sampler.seed, batch_size=cfg.batch_size)
    return EvalReport.from_predictions(name, preds, targets, {"kind": cfg.backbone.kind, "loss": "combined" if cfg.loss.lam > 0 else "no2", "P": P})


def _make_batch(scenes, cfg, stats, rng):
    P = cfg.sampler.prediction_space
    wins = [sample_window(s, cfg.sampler, rng, stats) for s in scenes]
    x = torch.from_numpy(np.stack([w.inputs for w in wins]))
    mask = torch.from_numpy(np.stack([w.landcover_win for w in wins]).astype(np.int64))
    y = torch.tensor([w.no2_norm for w in wins], dtype=torch.float32)
    gt = torch.tensor([w.gt_cropped(P) for w in wins], dtype=torch.long)
    return x, mask, y, gt


def _rng_snapshot(data_rng, offset_rng):
    return {
        "data": data_rng.bit_generator.state,
        "offsets": offset_rng.bit_generator.state,
        "torch": torch.get_rng_state(),
    }


def train(
    cfg: TrainConfig,
    manifest: DatasetManifest,
    stats: NormStats | None = None,
    val_split: str = "val",
    resume_from=None,
    log: Callable[[dict], None] | None = None,
    store: SceneStore | None = None,
) -> TrainState:
    """Train and return the final state; ``state.best_checkpoint`` holds the best model.

    ``resume_from`` is a ``last`` checkpoint directory written by a previous
    run with the same config.
    """
    if cfg.deterministic:
        torch.use_deterministic_algorithms(True)
    store = store or SceneStore(manifest)
    train_entries = manifest.split("train")
    val_entries = manifest.split(val_split)
    if not train_entries:
        raise InsufficientDataError("train split is empty")
    if not val_entries:
        raise InsufficientDataError(f"split {val_split!r} is empty")
    stats = stats or compute_norm_stats(manifest)
    loss_cfg = cfg.loss
    if cfg.frequency_class_weights:
        loss_cfg = LossConfig(cfg.loss.lam, list(class_weights_from_frequencies(manifest)))

    data_rng, init_seed, offset_rng = _rng_streams(cfg.seed)
    torch.manual_seed(init_seed)
    model = DenseEstimator(cfg.backbone).to(memory_format=torch.channels_last)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
    state = TrainState()
    ckpt_dir = Path(cfg.checkpoint_dir)

    if resume_from is not None:
        ck = load_checkpoint(resume_from)
        model.load_state_dict(ck.model.state_dict())
        saved = torch.load(Path(resume_from) / STATE_FILE, map_location="cpu", weights_only=False)
        opt.load_state_dict(saved["optimizer"])
        data_rng.bit_generator.state = saved["rng"]["data"]
        offset_rng.bit_generator.state = saved["rng"]["offsets"]
        torch.set_rng_state(saved["rng"]["torch"])
        state = saved["state"]

    P = cfg.sampler.prediction_space
    extra = {"offset_seed": cfg.sampler.seed, "train_config": cfg.to_dict()}
    ckpt_kw = dict(P=P, stats=stats, lam=loss_cfg.lam, seed=cfg.seed, extra=extra)
    val_scenes = [store(e) for e in val_entries]
    need_lc = loss_cfg.lam > 0

    def out_of_steps():
        return cfg.max_steps is not None and state.step >= cfg.max_steps

    while state.epoch < cfg.max_epochs and not out_of_steps():
        state.epoch += 1
        order = data_rng.permutation(len(train_entries))
        model.train()
        for start in range(0, len(order), cfg.batch_size):
            if out_of_steps():
                break
            idx = order[start : start + cfg.batch_size]
            batch_entries = [train_entries[i] for i in idx]
            x, mask, y, gt = _make_batch([store(e) for e in batch_entries], cfg, stats, offset_rng)
            x = x.contiguous(memory_format=torch.channels_last)
            # bf16 autocast only covers the forward pass; weights and loss stay fp32
            with torch.autocast("cpu", dtype=torch.bfloat16, enabled=cfg.precision == "bf16"):
                out = model(x, P, with_landcover=need_lc)
            plane = out.no2_plane.float()
            logits = out.lc_logits.float() if out.lc_logits is not None else None
            total, sel_part, cel_part = combined_loss(y, plane, gt, logits, mask, loss_cfg)
            parts = {"sel": sel_part.item(), "cel": cel_part.item(), "total": total.item()}
            if not all(math.isfinite(v) for v in parts.values()):
                raise NonFiniteLossError(state.step, [e.station_id for e in batch_entries], parts)
            lr = cfg.lr_at(state.step, len(train_entries))
            for group in opt.param_groups:
                group["lr"] = lr
            opt.zero_grad(set_to_none=True)
            total.backward()
            opt.step()
            state.step += 1
            record = {"epoch": state.epoch, "step": state.step, **parts, "lr": lr}
            state.history.append(record)
            if log:
                log(record)

        last_epoch = state.epoch >= cfg.max_epochs or out_of_steps()
        if state.epoch % cfg.eval_every == 0 or last_epoch:
            report = validate(model, val_scenes, stats, cfg, val_split)
            state.val_history.append({"epoch": state.epoch, "step": state.step, "mae": report.mae})
            if log:
                log({"epoch": state.epoch, "step": state.step, "val_mae": report.mae, "val_mse": report.mse, "val_r2": report.r2})
            if report.mae < state.best_val_mae:
                state.best_val_mae = report.mae
                state.best_checkpoint = str(save_checkpoint(model, ckpt_dir / "best", **ckpt_kw))
            _save_last(model, opt, state, data_rng, offset_rng, ckpt_dir / "last", ckpt_kw)
    state.rng = {"data": data_rng.bit_generator.state, "offsets": offset_rng.bit_generator.state}
    return state


def _save_last(model, opt, state, data_rng, offset_rng, path, ckpt_kw):
    save_checkpoint(model, path, **ckpt_kw)
    snap = copy.deepcopy(state)
    torch.save(
        {"optimizer": opt.state_dict(), "rng": _rng_snapshot(data_rng, offset_rng), "state": snap},
        Path(path) / STATE_FILE,
    )


def segmentation_accuracy(model, scenes, stats: NormStats, cfg: TrainConfig) -> float:
    """Pixel accuracy of the land-cover head on fixed-offset windows."""
    from .sampler import fixed_offset

    correct = total = 0
    model.eval()
    with torch.no_grad():
        for s in scenes:
            off = fixed_offset(s.station_id, cfg.sampler.seed, cfg.sampler)
            w = sample_window(s, cfg.sampler, stats=stats, offset=off)
            logits = model(torch.from_numpy(w.inputs[None]), cfg.sampler.prediction_space).lc_logits[0]
            pred = logits.argmax(0).numpy()
            correct += int((pred == w.landcover_win).sum())
            total += pred.size
    return correct / total


__all__ = [
    "TrainConfig",
    "TrainState",
    "SceneStore",
    "train",
    "validate",
    "with_overrides",
    "segmentation_accuracy",
    "content_hash",
]
