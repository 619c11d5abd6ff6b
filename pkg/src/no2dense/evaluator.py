"""MAE / MSE / R2 in ug/m3 over splits and external regions, plus table reports."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np
import torch

from .datamodel import AnnotatedScene, DatasetManifest, NormStats
from .errors import ConfigError, InsufficientDataError, UndefinedR2Error, ValidationError
from .sampler import PREDICTION_SPACES, SamplerConfig, fixed_offset, sample_window

# Published reference rows, echoed in report footers only.
LITERATURE = {
    "table1": [
        {"model": "UNet", "loss": "combined", "r2": 0.49, "mse": 47.25, "mae": 5.06},
        {"model": "UNet", "loss": "no2", "r2": 0.49, "mse": 46.83, "mae": 5.03},
        {"model": "AE", "loss": "combined", "r2": 0.47, "mse": 50.94, "mae": 4.98},
        {"model": "AE", "loss": "no2", "r2": 0.46, "mse": 49.55, "mae": 4.99},
        {"model": "Point-wise", "loss": "", "r2": 0.55, "mse": 61.25, "mae": 5.65},
        {"model": "Point-wise (pre-trained)", "loss": "", "r2": 0.57, "mse": 58.47, "mae": 5.50},
    ],
    "table2": [
        {"model": "UNet", "loss": "combined", "r2": -1.41, "mse": 140.69, "mae": 10.17},
        {"model": "UNet", "loss": "no2", "r2": -1.42, "mse": 140.74, "mae": 10.09},
        {"model": "AE", "loss": "combined", "r2": 0.15, "mse": 62.18, "mae": 6.19},
        {"model": "AE", "loss": "no2", "r2": -0.02, "mse": 71.43, "mae": 6.69},
        {"model": "Point-wise", "loss": "", "r2": 0.28, "mse": 89.92, "mae": 7.86},
    ],
    "table3": [
        {"P": 2, "r2": 0.49, "mse": 50.21, "mae": 4.95},
        {"P": 4, "r2": 0.49, "mse": 49.11, "mae": 5.04},
        {"P": 8, "r2": 0.47, "mse": 50.94, "mae": 4.98},
        {"P": 16, "r2": 0.46, "mse": 50.15, "mae": 5.00},
        {"P": 32, "r2": 0.50, "mse": 47.12, "mae": 4.95},
        {"P": 64, "r2": 0.49, "mse": 47.13, "mae": 4.99},
    ],
}


class Metrics(NamedTuple):
    mae: float
    mse: float
    r2: float


def metrics(preds, targets) -> Metrics:
    p = np.asarray(preds, dtype=np.float64).ravel()
    y = np.asarray(targets, dtype=np.float64).ravel()
    if p.shape != y.shape:
        raise ValidationError(f"preds and targets differ in length ({p.size} vs {y.size})")
    if y.size < 2:
        raise InsufficientDataError("metrics need at least 2 samples")
    if not (np.all(np.isfinite(p)) and np.all(np.isfinite(y))):
        raise ValidationError("metrics need finite values")
    err = p - y
    mae = float(np.abs(err).mean())
    mse = float((err**2).mean())
    ss_tot = float(((y - y.mean()) ** 2).sum())
    if ss_tot == 0.0:
        raise UndefinedR2Error(mae, mse)
    return Metrics(mae, mse, 1.0 - float((err**2).sum()) / ss_tot)


@dataclass
class EvalReport:
    name: str
    n: int
    mae: float
    mse: float
    r2: float
    model: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.mae < 0 or self.mse < 0 or self.r2 > 1 + 1e-12:
            raise ValidationError(f"inconsistent report {self}")
        if self.mae**2 > self.mse * (1 + 1e-9) + 1e-12:
            raise ValidationError(f"report violates mae^2 <= mse: {self.mae}^2 > {self.mse}")

    @classmethod
    def from_predictions(cls, name, preds, targets, model=None) -> "EvalReport":
        m = metrics(preds, targets)
        return cls(name, len(np.ravel(targets)), m.mae, m.mse, m.r2, dict(model or {}))

    def to_dict(self) -> dict:
        return asdict(self)


def predict_at_gt(model, scenes: Iterable[AnnotatedScene], stats: NormStats, P: int, seed: int, batch_size: int = 16):
    """Denormalized plane value at each scene's ground-truth pixel, fixed offsets.

    Returns ``(preds, targets)`` in ug/m3.
    """
    cfg = SamplerConfig(prediction_space=P, seed=seed)
    preds, targets = [], []
    batch = []

    def flush():
        x = torch.from_numpy(np.stack([w.inputs for w in batch]))
        planes = model.predict_planes(x, P)[:, 0].numpy()
        for w, plane in zip(batch, planes):
            i, j = w.gt_cropped(P)
            preds.append(float(stats.denormalize_target(np.float64(plane[i, j]))))
            targets.append(w.no2_value)
        batch.clear()

    for scene in scenes:
        off = fixed_offset(scene.station_id, seed, cfg)
        batch.append(sample_window(scene, cfg, stats=stats, offset=off, require_landcover=False))
        if len(batch) == batch_size:
            flush()
    if batch:
        flush()
    return np.asarray(preds), np.asarray(targets)


def _offset_seed(ckpt) -> int:
    return int(ckpt.manifest.get("offset_seed", ckpt.manifest.get("seed", 0)))


def evaluate_split(checkpoint, manifest: DatasetManifest, split: str = "test", P: int | None = None) -> EvalReport:
    """Score a checkpoint (path or loaded :class:`~no2dense.model.Checkpoint`) on one split."""
    from .model import load_checkpoint

    ckpt = load_checkpoint(checkpoint) if isinstance(checkpoint, (str, Path)) else checkpoint
    P = ckpt.P if P is None else P
    entries = manifest.split(split)
    if not entries:
        raise InsufficientDataError(f"split {split!r} is empty")
    preds, targets = predict_at_gt(ckpt.model, (manifest.load(e) for e in entries), ckpt.stats, P, _offset_seed(ckpt))
    return EvalReport.from_predictions(split, preds, targets, {**ckpt.descriptor, "P": P})


def evaluate_region(checkpoint, external_manifest: DatasetManifest, region: str | None = None) -> EvalReport:
    """Score every sample of an external manifest, regardless of split labels."""
    from .model import load_checkpoint

    ckpt = load_checkpoint(checkpoint) if isinstance(checkpoint, (str, Path)) else checkpoint
    entries = external_manifest.entries
    if not entries:
        raise InsufficientDataError("external manifest is empty")
    if region is None:
        tags = sorted({e.region_tag for e in entries})
        region = "+".join(t for t in tags if t) or "external"
    preds, targets = predict_at_gt(ckpt.model, (external_manifest.load(e) for e in entries), ckpt.stats, ckpt.P, _offset_seed(ckpt))
    return EvalReport.from_predictions(region, preds, targets, ckpt.descriptor)


@dataclass
class SweepRow:
    P: int
    report: EvalReport
    pass_count: int
    checkpoint: str | None = None


def sweep_prediction_space(
    template,
    manifest: DatasetManifest,
    P_list: Sequence[int],
    checkpoints: dict | None = None,
    split: str = "test",
    scene_shape: tuple[int, int] = (1200, 1200),
    stats: NormStats | None = None,
    log=None,
) -> list[SweepRow]:
    """One evaluated model per prediction space.

    ``template`` is a :class:`~no2dense.trainer.TrainConfig`; its sampler P is
    replaced per row. Supplying ``checkpoints`` (``{P: path}``) skips training.
    """
    from .inference import dense_pass_count
    from .trainer import train, with_overrides

    for P in P_list:
        if P not in PREDICTION_SPACES:
            raise ConfigError(f"inadmissible prediction space {P}")
    rows = []
    for P in P_list:
        if checkpoints and P in checkpoints:
            ckpt_path = checkpoints[P]
        else:
            cfg = with_overrides(
                template,
                {"sampler.prediction_space": P, "checkpoint_dir": str(Path(template.checkpoint_dir) / f"P{P}")},
            )
            state = train(cfg, manifest, stats=stats, log=log)
            ckpt_path = state.best_checkpoint
        report = evaluate_split(ckpt_path, manifest, split, P)
        rows.append(SweepRow(P, report, dense_pass_count(*scene_shape, P), str(ckpt_path)))
    return rows


# ---------------------------------------------------------------------------
# report emission


def improvement_note() -> str:
    best_dense = LITERATURE["table1"][2]["mae"]
    best_point = LITERATURE["table1"][5]["mae"]
    rel = (best_point - best_dense) / best_point
    return f"MAE margin over point-wise: ({best_point:.2f} - {best_dense:.2f}) / {best_point:.2f} = {100 * rel:.2f}%"


def format_table(reports: Sequence[EvalReport], literature: str | None = "table1", extra_cols: dict | None = None) -> str:
    """Aligned plain-text table with a ``[literature]`` footer."""
    extra_cols = extra_cols or {}
    header = ["name", "model", "loss", "P", "n", "R2", "MSE", "MAE"] + list(extra_cols)
    lines = []
    for i, r in enumerate(reports):
        row = [r.name, str(r.model.get("kind", "")), str(r.model.get("loss", "")), str(r.model.get("P", "")), str(r.n),
               f"{r.r2:.2f}", f"{r.mse:.2f}", f"{r.mae:.2f}"]
        row += [str(vals[i]) for vals in extra_cols.values()]
        lines.append(row)
    widths = [max(len(h), *(len(l[k]) for l in lines)) if lines else len(h) for k, h in enumerate(header)]
    fmt = lambda cells: "  ".join(c.ljust(w) for c, w in zip(cells, widths)).rstrip()
    out = [fmt(header), fmt(["-" * w for w in widths])] + [fmt(l) for l in lines]
    if literature:
        out.append("")
        out.append(f"[literature] reference values ({literature}); not reproduction targets")
        for ref in LITERATURE[literature]:
            label = f"P={ref['P']}" if "P" in ref else f"{ref['model']} {ref['loss']}".strip()
            out.append(f"[literature]   {label}: R2 {ref['r2']:.2f}  MSE {ref['mse']:.2f}  MAE {ref['mae']:.2f}")
        if literature == "table1":
            out.append(f"[literature]   {improvement_note()}")
    return "\n".join(out) + "\n"


def write_report(reports: Sequence[EvalReport], out_dir, stem: str = "report", literature: str | None = "table1", extra_cols: dict | None = None) -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = {"reports": [r.to_dict() for r in reports], "literature": LITERATURE.get(literature) if literature else None}
    if extra_cols:
        payload["columns"] = {k: list(v) for k, v in extra_cols.items()}
    jpath = out_dir / f"{stem}.json"
    tpath = out_dir / f"{stem}.txt"
    jpath.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    tpath.write_text(format_table(reports, literature, extra_cols))
    return jpath, tpath
