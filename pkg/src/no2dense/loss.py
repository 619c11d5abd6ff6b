"""Single-pixel squared error, class-weighted cross-entropy and their weighted sum."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable

import numpy as np
import torch

from .datamodel import N_CLASSES, DatasetManifest
from .errors import ConfigError, LabelError


@dataclass
class LossConfig:
    lam: float = 0.1
    class_weights: list[float] = field(default_factory=lambda: [1.0] * N_CLASSES)

    def __post_init__(self):
        w = np.asarray(self.class_weights, dtype=np.float64)
        if not np.isfinite(self.lam) or self.lam < 0:
            raise ConfigError(f"lam must be finite and >= 0, got {self.lam}")
        if w.shape != (N_CLASSES,) or not np.all(np.isfinite(w)) or np.any(w < 0) or not np.any(w > 0):
            raise ConfigError("class_weights: need 11 finite non-negative values, at least one positive")
        self.class_weights = [float(v) for v in w]


def sel(y, plane, gt):
    """Squared error between ``y`` and ``plane`` read at ``gt``.

    Unbatched: ``plane`` is ``(1, P, P)``, ``gt`` an ``(i, j)`` pair.
    Batched: ``plane`` is ``(B, 1, P, P)``, ``gt`` is ``(B, 2)``, ``y`` is ``(B,)``
    and the result is per-sample.
    """
    plane = torch.as_tensor(plane)
    unbatched = plane.dim() == 3
    if unbatched:
        plane = plane.unsqueeze(0)
    gt = torch.as_tensor(gt, dtype=torch.long).reshape(-1, 2)
    y = torch.as_tensor(y, dtype=plane.dtype).reshape(-1)
    P_h, P_w = plane.shape[-2:]
    if bool((gt < 0).any()) or bool((gt[:, 0] >= P_h).any()) or bool((gt[:, 1] >= P_w).any()):
        raise IndexError(f"ground-truth pixel {gt.tolist()} outside the {P_h}x{P_w} plane")
    b = torch.arange(plane.shape[0])
    pred = plane[b, 0, gt[:, 0], gt[:, 1]]
    out = (y - pred) ** 2
    return out[0] if unbatched else out


def weighted_cel(logits, mask, weights):
    """Class-weighted cross-entropy, reduced by the weighted mean over pixels.

    ``sum_p w[c_p] * -log softmax(logits_p)[c_p] / sum_p w[c_p]``; accepts
    ``(C, H, W)`` / ``(H, W)`` or batched ``(B, C, H, W)`` / ``(B, H, W)``.
    """
    logits = torch.as_tensor(logits)
    mask = torch.as_tensor(mask).long()
    if logits.dim() == 3:
        logits, mask = logits.unsqueeze(0), mask.unsqueeze(0)
    n_classes = logits.shape[1]
    if bool((mask < 0).any()) or bool((mask >= n_classes).any()):
        raise LabelError(f"mask values must lie in [0, {n_classes - 1}]")
    w = torch.as_tensor(weights, dtype=logits.dtype)
    logp = torch.log_softmax(logits, dim=1)
    nll = -logp.gather(1, mask.unsqueeze(1)).squeeze(1)
    pix_w = w[mask]
    denom = pix_w.sum()
    if denom <= 0:
        return (nll * 0.0).sum()
    return (pix_w * nll).sum() / denom


def combined_loss(y, plane, gt, logits, mask, cfg: LossConfig):
    """``(total, sel_part, cel_part)`` with ``total = sel + lam * cel``.

    Batched inputs average the squared error over the batch.
    """
    sel_part = sel(y, plane, gt).mean()
    if cfg.lam == 0 and logits is None:
        cel_part = torch.zeros((), dtype=sel_part.dtype)
    else:
        cel_part = weighted_cel(logits, mask, cfg.class_weights)
    return sel_part + cfg.lam * cel_part, sel_part, cel_part


def class_counts(masks: Iterable[np.ndarray]) -> np.ndarray:
    counts = np.zeros(N_CLASSES, dtype=np.int64)
    for m in masks:
        counts += np.bincount(np.asarray(m).ravel(), minlength=N_CLASSES)[:N_CLASSES]
    return counts


def class_weights_from_counts(counts) -> np.ndarray:
    """``N_total / (C_present * N_i)``; absent classes get 0."""
    counts = np.asarray(counts, dtype=np.float64)
    present = counts > 0
    w = np.zeros_like(counts)
    w[present] = counts.sum() / (present.sum() * counts[present])
    return w


def class_weights_from_frequencies(manifest: DatasetManifest) -> np.ndarray:
    masks = (manifest.load(e).landcover for e in manifest.split("train"))
    return class_weights_from_counts(class_counts(m for m in masks if m is not None))
