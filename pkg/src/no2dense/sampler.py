"""Uniformly random offset window sampling.

A 128x128 window is cut from the 200x200 scene with an integer offset
drawn per axis so that the measurement pixel lands uniformly inside the
central P x P prediction area of the window.  With the measurement at
scene pixel 100 and the prediction area at window rows/cols
``[64 - P/2, 64 + P/2)``, the admissible offsets per axis are
``[37 - P/2, 36 + P/2]``.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from .datamodel import BASE_SIZE, CENTER_PIXEL, AnnotatedScene, NormStats
from .errors import ConfigError, MissingLabelError

WINDOW = 128
PREDICTION_SPACES = (2, 4, 8, 16, 32, 64)


@dataclass(frozen=True)
class SamplerConfig:
    prediction_space: int = 8
    seed: int = 0
    window: int = WINDOW
    base: int = BASE_SIZE

    def __post_init__(self):
        p = self.prediction_space
        if not isinstance(p, (int, np.integer)) or p % 2 or not 2 <= p <= 64:
            raise ConfigError(f"prediction_space must be an even integer in [2, 64], got {p!r}")
        if self.window >= self.base:
            raise ConfigError("window must be smaller than the base scene")


def prediction_area(P: int, window: int = WINDOW) -> tuple[int, int]:
    """Half-open ``[start, stop)`` of the central prediction area, per axis."""
    _check_crop(P, window)
    return window // 2 - P // 2, window // 2 + P // 2


def admissible_offsets(cfg: SamplerConfig) -> range:
    """Inclusive offset range per axis, as a ``range`` of exactly P values."""
    center = cfg.base // 2
    lo = center - cfg.window // 2 - cfg.prediction_space // 2 + 1
    return range(lo, lo + cfg.prediction_space)


def fixed_offset(station_id: str, seed: int, cfg: SamplerConfig) -> tuple[int, int]:
    """Reproducible per-sample offset for validation and test."""
    digest = hashlib.sha256(f"{station_id}|{int(seed)}".encode()).digest()
    offs = admissible_offsets(cfg)
    r = int.from_bytes(digest[:8], "little") % len(offs)
    c = int.from_bytes(digest[8:16], "little") % len(offs)
    return offs[r], offs[c]


def draw_offset(cfg: SamplerConfig, rng: np.random.Generator) -> tuple[int, int]:
    offs = admissible_offsets(cfg)
    r, c = rng.integers(offs.start, offs.stop, size=2)
    return int(r), int(c)


@dataclass
class WindowSample:
    inputs: np.ndarray
    landcover_win: np.ndarray | None
    offset: tuple[int, int]
    gt_pixel: tuple[int, int]
    no2_norm: float
    no2_value: float
    station_id: str = ""

    def gt_cropped(self, P: int) -> tuple[int, int]:
        start, _ = prediction_area(P, self.inputs.shape[-1])
        return self.gt_pixel[0] - start, self.gt_pixel[1] - start


def sample_window(
    scene: AnnotatedScene,
    cfg: SamplerConfig,
    rng: np.random.Generator | None = None,
    stats: NormStats | None = None,
    offset: tuple[int, int] | None = None,
    require_landcover: bool = True,
) -> WindowSample:
    """Cut one window. Pass ``offset`` to bypass the random draw."""
    if require_landcover and scene.landcover is None:
        raise MissingLabelError(f"scene {scene.station_id!r} has no landcover mask")
    if offset is None:
        if rng is None:
            raise ConfigError("either rng or offset is required")
        offset = draw_offset(cfg, rng)
    o_r, o_c = int(offset[0]), int(offset[1])
    w = cfg.window
    if not (0 <= o_r <= cfg.base - w and 0 <= o_c <= cfg.base - w):
        raise ConfigError(f"offset {offset} puts the window outside the scene")
    sl = (slice(o_r, o_r + w), slice(o_c, o_c + w))
    inputs = scene.inputs[(slice(None),) + sl]
    y = scene.no2_value
    if stats is not None:
        inputs = stats.normalize_inputs(inputs).astype(np.float32)
        y_norm = float(stats.normalize_target(y))
    else:
        y_norm = y
    lc = scene.landcover[sl] if scene.landcover is not None else None
    return WindowSample(
        inputs=np.ascontiguousarray(inputs),
        landcover_win=None if lc is None else np.ascontiguousarray(lc),
        offset=(o_r, o_c),
        gt_pixel=(CENTER_PIXEL[0] - o_r, CENTER_PIXEL[1] - o_c),
        no2_norm=y_norm,
        no2_value=y,
        station_id=scene.station_id,
    )


def _check_crop(P, size=WINDOW):
    if not isinstance(P, (int, np.integer)) or P % 2 or not 2 <= P <= size:
        raise ConfigError(f"crop size must be an even integer in [2, {size}], got {P!r}")


def center_crop(plane, P: int):
    """Central ``P x P`` of the last two axes (numpy arrays or torch tensors)."""
    h, w = plane.shape[-2:]
    if h != w:
        raise ConfigError(f"center_crop expects a square plane, got {h}x{w}")
    _check_crop(P, h)
    start = h // 2 - P // 2
    return plane[..., start : start + P, start : start + P]
