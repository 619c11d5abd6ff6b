"""Dense tiled inference, the point-wise interpolating baseline, and mosaic output.

Dense tiling reflection-pads the scene by ``64 - P/2`` so that a window whose
origin (in padded coordinates) equals ``a`` has its prediction area at
original rows/cols ``[a, a + P)``.  Windows step by P; the last one on each
axis is shifted inward to ``n - P`` and only writes the rows it owns.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy.interpolate import RegularGridInterpolator

from .datamodel import N_CHANNELS, read_planes, write_planes
from .errors import ConfigError, SceneTooSmallError, ShapeError
from .sampler import WINDOW, prediction_area


@dataclass
class Scene:
    inputs: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float32)
        if self.inputs.ndim != 3:
            raise ShapeError(f"scene inputs must be (C, H, W), got {self.inputs.shape}")

    @property
    def shape(self) -> tuple[int, int]:
        return self.inputs.shape[1], self.inputs.shape[2]


def load_raster_scene(path) -> Scene:
    """Read an arbitrary-size container (same layout as a training sample)."""
    planes, meta = read_planes(path)
    if "s2_bands" not in planes or "s5p_plane" not in planes:
        raise ShapeError(f"{path}: scene needs 's2_bands' and 's5p_plane' planes")
    s5p = planes["s5p_plane"]
    if s5p.ndim == 2:
        s5p = s5p[None]
    if planes["s2_bands"].shape[1:] != s5p.shape[1:]:
        raise ShapeError(f"{path}: s2_bands and s5p_plane differ in spatial size")
    meta = {k: v for k, v in meta.items() if k != "planes"}
    return Scene(np.concatenate([planes["s2_bands"], s5p]), meta)


def save_raster_scene(scene: Scene, path):
    return write_planes(path, {"s2_bands": scene.inputs[:-1], "s5p_plane": scene.inputs[-1:]}, scene.meta)


# ---------------------------------------------------------------------------
# tiling


@dataclass(frozen=True)
class Tile:
    origin: tuple[int, int]  # window top-left in padded coordinates
    dest: tuple[int, int, int, int]  # r0, r1, c0, c1 in the original grid
    src: tuple[int, int, int, int]  # same block in cropped-plane coordinates


@dataclass
class TilingPlan:
    H: int
    W: int
    P: int
    margin: int
    tiles: list[Tile]

    @property
    def pad(self) -> tuple[tuple[int, int], tuple[int, int]]:
        return (self.margin, self.margin), (self.margin, self.margin)


def _axis_slots(n, P):
    out = []
    for k in range(math.ceil(n / P)):
        start = k * P
        stop = min(start + P, n)
        anchor = min(start, n - P)
        out.append((anchor, start, stop, start - anchor, stop - anchor))
    return out


def plan_tiling(H: int, W: int, P: int) -> TilingPlan:
    if P % 2 or not 2 <= P <= 64:
        raise ConfigError(f"P must be even and <= 64, got {P}")
    if H < P or W < P:
        raise SceneTooSmallError(f"scene {H}x{W} is smaller than the {P}x{P} prediction area")
    tiles = [
        Tile((ra, ca), (r0, r1, c0, c1), (sr0, sr1, sc0, sc1))
        for ra, r0, r1, sr0, sr1 in _axis_slots(H, P)
        for ca, c0, c1, sc0, sc1 in _axis_slots(W, P)
    ]
    return TilingPlan(H, W, P, WINDOW // 2 - P // 2, tiles)


def dense_pass_count(H: int, W: int, P: int) -> int:
    return math.ceil(H / P) * math.ceil(W / P)


def pointwise_grid(n: int, stride: int) -> np.ndarray:
    pts = list(range(0, n, stride))
    if pts[-1] != n - 1:
        pts.append(n - 1)
    return np.asarray(pts)


def pointwise_pass_count(H: int, W: int, stride: int) -> int:
    return len(pointwise_grid(H, stride)) * len(pointwise_grid(W, stride))


# ---------------------------------------------------------------------------
# inference


@dataclass
class Mosaic:
    values: np.ndarray
    pass_count: int
    method: str
    P: int | None = None
    stride: int | None = None


def _unpack(checkpoint):
    from .model import load_checkpoint

    if isinstance(checkpoint, (str, Path)):
        checkpoint = load_checkpoint(checkpoint)
    return checkpoint.model, checkpoint.stats


def _prepare(scene: Scene, model, stats, pad):
    if scene.inputs.shape[0] != model.cfg.in_channels:
        raise ConfigError(f"scene has {scene.inputs.shape[0]} channels, checkpoint expects {model.cfg.in_channels}")
    x = stats.normalize_inputs(scene.inputs).astype(np.float32)
    return np.pad(x, ((0, 0),) + pad, mode="reflect")


def _run_windows(model, padded, origins, P, batch_size):
    """Yield ``(index, plane)`` for each window origin, in order.

    CPU conv kernels are not batch-invariant in the last bits; ``batch_size=1``
    makes every window's plane identical to a standalone evaluation.
    """
    model.eval()
    for b in range(0, len(origins), batch_size):
        chunk = origins[b : b + batch_size]
        x = np.stack([padded[:, r : r + WINDOW, c : c + WINDOW] for r, c in chunk])
        planes = model.predict_planes(torch.from_numpy(x), P)[:, 0].numpy()
        for k, plane in enumerate(planes):
            yield b + k, plane


def infer_dense(scene: Scene, checkpoint, P: int, batch_size: int = 1) -> Mosaic:
    """One forward pass per planned window; P x P blocks written into a mosaic in ug/m3."""
    model, stats = _unpack(checkpoint)
    H, W = scene.shape
    plan = plan_tiling(H, W, P)
    padded = _prepare(scene, model, stats, plan.pad)
    out = np.empty((H, W), dtype=np.float32)
    origins = [t.origin for t in plan.tiles]
    for i, plane in _run_windows(model, padded, origins, P, batch_size):
        t = plan.tiles[i]
        r0, r1, c0, c1 = t.dest
        sr0, sr1, sc0, sc1 = t.src
        out[r0:r1, c0:c1] = stats.denormalize_target(plane[sr0:sr1, sc0:sc1].astype(np.float64))
    return Mosaic(out, len(plan.tiles), "dense", P=P)


def window_plane(scene: Scene, checkpoint, origin, P: int) -> np.ndarray:
    """Denormalized P x P plane for one window of the dense tiling (padded-origin)."""
    model, stats = _unpack(checkpoint)
    padded = _prepare(scene, model, stats, plan_tiling(*scene.shape, P).pad)
    r, c = origin
    x = torch.from_numpy(np.ascontiguousarray(padded[None, :, r : r + WINDOW, c : c + WINDOW]))
    plane = model.predict_planes(x, P)[0, 0].numpy()
    return stats.denormalize_target(plane.astype(np.float64)).astype(np.float32)


def infer_pointwise(scene: Scene, checkpoint, stride: int, batch_size: int = 1) -> Mosaic:
    """Center-pixel estimate every ``stride`` pixels, bilinearly interpolated to the full grid."""
    if stride < 1:
        raise ConfigError("stride must be >= 1")
    model, stats = _unpack(checkpoint)
    H, W = scene.shape
    half = WINDOW // 2
    padded = _prepare(scene, model, stats, ((half, half), (half, half)))
    rows, cols = pointwise_grid(H, stride), pointwise_grid(W, stride)
    # window origin (padded) == point coordinate puts the point at window pixel (64, 64)
    origins = [(int(r), int(c)) for r in rows for c in cols]
    center = half - prediction_area(2)[0]
    vals = np.empty(len(origins))
    for i, plane in _run_windows(model, padded, origins, 2, batch_size):
        vals[i] = plane[center, center]
    grid = stats.denormalize_target(vals.reshape(len(rows), len(cols)))
    if stride == 1:
        out = grid
    elif len(rows) == 1 or len(cols) == 1:
        out = np.broadcast_to(grid.reshape(len(rows), len(cols)), (H, W)) if grid.size == 1 else _interp_1d(grid, rows, cols, H, W)
    else:
        interp = RegularGridInterpolator((rows, cols), grid, method="linear")
        rr, cc = np.meshgrid(np.arange(H), np.arange(W), indexing="ij")
        out = interp(np.stack([rr.ravel(), cc.ravel()], axis=-1)).reshape(H, W)
    return Mosaic(np.asarray(out, dtype=np.float32), len(origins), "pointwise", stride=stride)


def _interp_1d(grid, rows, cols, H, W):
    if len(rows) == 1:
        line = np.interp(np.arange(W), cols, grid[0])
        return np.broadcast_to(line[None, :], (H, W))
    line = np.interp(np.arange(H), rows, grid[:, 0])
    return np.broadcast_to(line[:, None], (H, W))


# ---------------------------------------------------------------------------
# output


def save_mosaic(mosaic: Mosaic, out_dir, extra: dict | None = None) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    v = np.ascontiguousarray(mosaic.values, dtype="<f4")
    (out_dir / "mosaic.raw").write_bytes(v.tobytes())
    meta = {
        "shape": list(v.shape),
        "dtype": "f32le",
        "file": "mosaic.raw",
        "units": "ug/m3",
        "method": mosaic.method,
        "P": mosaic.P,
        "stride": mosaic.stride,
        "pass_count": mosaic.pass_count,
        **(extra or {}),
    }
    (out_dir / "mosaic.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return out_dir


def load_mosaic(out_dir) -> Mosaic:
    out_dir = Path(out_dir)
    meta = json.loads((out_dir / "mosaic.json").read_text())
    v = np.frombuffer((out_dir / meta["file"]).read_bytes(), dtype="<f4").reshape(meta["shape"]).copy()
    return Mosaic(v, meta["pass_count"], meta["method"], meta.get("P"), meta.get("stride"))


def render_mosaic(mosaic: Mosaic, out_path, color_scale: str = "viridis", vmin: float | None = None, vmax: float | None = None) -> Path:
    """Write a color image (``.png`` or ``.ppm``) plus a ``.json`` sidecar."""
    import matplotlib

    v = np.asarray(mosaic.values, dtype=np.float64)
    if not np.all(np.isfinite(v)):
        raise ValueError("cannot render a mosaic with non-finite values")
    lo = float(v.min()) if vmin is None else float(vmin)
    hi = float(v.max()) if vmax is None else float(vmax)
    scaled = np.clip((v - lo) / (hi - lo), 0.0, 1.0) if hi > lo else np.zeros_like(v)
    rgb = (matplotlib.colormaps[color_scale](scaled)[..., :3] * 255).round().astype(np.uint8)

    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    if out_path.suffix.lower() == ".ppm":
        h, w = rgb.shape[:2]
        out_path.write_bytes(f"P6\n{w} {h}\n255\n".encode() + rgb.tobytes())
    else:
        from PIL import Image

        Image.fromarray(rgb, mode="RGB").save(out_path, format="PNG")
    sidecar = {
        "min": float(v.min()),
        "max": float(v.max()),
        "scale_min": lo,
        "scale_max": hi,
        "color_scale": color_scale,
        "units": "ug/m3",
        "method": mosaic.method,
        "pass_count": mosaic.pass_count,
    }
    out_path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")
    return out_path
