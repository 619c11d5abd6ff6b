"""Annotated scenes, sample containers, dataset splits and normalization.

A sample container is a directory holding ``meta.json`` plus one raw
little-endian plane file per array::

    meta.json   {station_id, lon, lat, region_tag, no2_value, planes: [...]}
    s2.raw      12 x 200 x 200 float32, band-major, C order
    s5p.raw     1 x 200 x 200 float32
    lc.raw      200 x 200 uint8 (optional)
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage

from .errors import (
    DegenerateStatsError,
    FormatError,
    InsufficientDataError,
    ManifestError,
    ValidationError,
)

BASE_SIZE = 200
N_BANDS = 12
N_CHANNELS = N_BANDS + 1
N_CLASSES = 11
CENTER_PIXEL = (100, 100)
SPLITS = ("train", "val", "test")

CHANNEL_NAMES = tuple(f"s2_bands[{b}]" for b in range(N_BANDS)) + ("s5p_plane[0]",)

_DTYPES = {"f32le": np.dtype("<f4"), "u8": np.dtype("u1")}
_PLANE_FILES = {"s2_bands": ("s2.raw", "f32le"), "s5p_plane": ("s5p.raw", "f32le"), "landcover": ("lc.raw", "u8")}


@dataclass
class AnnotatedScene:
    """One station: a 200x200 raster stack with the measurement at ``CENTER_PIXEL``."""

    s2_bands: np.ndarray
    s5p_plane: np.ndarray
    landcover: np.ndarray | None
    no2_value: float
    station_id: str
    lon: float = 0.0
    lat: float = 0.0
    region_tag: str = ""

    def __post_init__(self):
        self.s2_bands = np.asarray(self.s2_bands, dtype=np.float32)
        self.s5p_plane = np.asarray(self.s5p_plane, dtype=np.float32)
        if self.s5p_plane.ndim == 2:
            self.s5p_plane = self.s5p_plane[None]
        _check_shape("s2_bands", self.s2_bands.shape, (N_BANDS, BASE_SIZE, BASE_SIZE))
        _check_shape("s5p_plane", self.s5p_plane.shape, (1, BASE_SIZE, BASE_SIZE))
        if self.landcover is not None:
            lc = np.asarray(self.landcover)
            _check_shape("landcover", lc.shape, (BASE_SIZE, BASE_SIZE))
            if lc.size and (lc.min() < 0 or lc.max() >= N_CLASSES):
                raise ValidationError(f"landcover: class ids must lie in [0, {N_CLASSES - 1}]")
            self.landcover = lc.astype(np.uint8)
        self.no2_value = float(np.float32(self.no2_value))
        if not np.isfinite(self.no2_value) or self.no2_value < 0:
            raise ValidationError(f"no2_value: must be finite and >= 0, got {self.no2_value}")

    @property
    def has_landcover(self) -> bool:
        return self.landcover is not None

    @property
    def inputs(self) -> np.ndarray:
        """The 13 model input planes (12 reflectance + trace gas)."""
        return np.concatenate([self.s2_bands, self.s5p_plane], axis=0)


def _check_shape(name, got, want):
    if tuple(got) != tuple(want):
        raise ValidationError(f"{name}: expected shape {tuple(want)}, got {tuple(got)}")


# ---------------------------------------------------------------------------
# containers


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def write_planes(path, planes: dict[str, np.ndarray], meta: dict) -> Path:
    """Write a generic container: named planes plus metadata.

    Planes are written under their canonical file names when known, else
    ``<name>.raw``. Arrays must be float32 or uint8.
    """
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    records = []
    for name, arr in planes.items():
        fname, dtype = _PLANE_FILES.get(name, (f"{name}.raw", "u8" if arr.dtype == np.uint8 else "f32le"))
        arr = np.ascontiguousarray(arr, dtype=_DTYPES[dtype])
        (path / fname).write_bytes(arr.tobytes(order="C"))
        records.append({"name": name, "dtype": dtype, "shape": list(arr.shape), "file": fname})
    _write_json(path / "meta.json", {**meta, "planes": records})
    return path


def read_planes(path) -> tuple[dict[str, np.ndarray], dict]:
    """Read every plane listed in ``meta.json``. Returns ``(planes, meta)``."""
    path = Path(path)
    try:
        meta = json.loads((path / "meta.json").read_text())
    except FileNotFoundError as exc:
        raise FormatError(f"{path}: missing meta.json") from exc
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}/meta.json: {exc}") from exc
    if not isinstance(meta, dict) or not isinstance(meta.get("planes"), list):
        raise FormatError(f"{path}/meta.json: header lacks a 'planes' list")
    planes = {}
    for rec in meta["planes"]:
        try:
            name, dtype, shape, fname = rec["name"], rec["dtype"], rec["shape"], rec["file"]
        except (KeyError, TypeError) as exc:
            raise FormatError(f"{path}/meta.json: malformed plane record {rec!r}") from exc
        if dtype not in _DTYPES:
            raise FormatError(f"{path}: plane {name!r} has unknown dtype {dtype!r}")
        fpath = path / fname
        if not fpath.exists():
            # an optional plane whose payload was removed is treated as absent
            continue
        raw = fpath.read_bytes()
        want = int(np.prod(shape)) * _DTYPES[dtype].itemsize
        if len(raw) != want:
            raise ValidationError(f"{name}: file holds {len(raw)} bytes, header shape {shape} needs {want}")
        planes[name] = np.frombuffer(raw, dtype=_DTYPES[dtype]).reshape(shape).copy()
    return planes, meta


def load_scene(path) -> AnnotatedScene:
    planes, meta = read_planes(path)
    for required in ("s2_bands", "s5p_plane"):
        if required not in planes:
            raise FormatError(f"{path}: missing plane {required!r}")
    try:
        return AnnotatedScene(
            s2_bands=planes["s2_bands"],
            s5p_plane=planes["s5p_plane"],
            landcover=planes.get("landcover"),
            no2_value=meta["no2_value"],
            station_id=str(meta["station_id"]),
            lon=float(meta.get("lon", 0.0)),
            lat=float(meta.get("lat", 0.0)),
            region_tag=str(meta.get("region_tag", "")),
        )
    except KeyError as exc:
        raise FormatError(f"{path}/meta.json: missing key {exc.args[0]!r}") from exc


def save_scene(scene: AnnotatedScene, path) -> Path:
    planes = {"s2_bands": scene.s2_bands, "s5p_plane": scene.s5p_plane}
    if scene.landcover is not None:
        planes["landcover"] = scene.landcover
    meta = {
        "station_id": scene.station_id,
        "lon": scene.lon,
        "lat": scene.lat,
        "region_tag": scene.region_tag,
        "no2_value": scene.no2_value,
    }
    return write_planes(path, planes, meta)


# ---------------------------------------------------------------------------
# manifests and splits


@dataclass(frozen=True)
class ManifestEntry:
    sample_path: str
    station_id: str
    region_tag: str = ""
    split: str | None = None
    has_landcover: bool = True

    def to_dict(self) -> dict:
        return {
            "sample_path": self.sample_path,
            "station_id": self.station_id,
            "region_tag": self.region_tag,
            "split": self.split,
            "has_landcover": self.has_landcover,
        }


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry]
    seed: int | None = None
    normalization_stats_path: str | None = None
    generator: dict | None = None
    root: Path | None = field(default=None, compare=False)

    def split(self, name: str) -> list[ManifestEntry]:
        if name not in SPLITS:
            raise ManifestError(f"unknown split {name!r}")
        return [e for e in self.entries if e.split == name]

    def counts(self) -> dict[str, int]:
        return {s: sum(e.split == s for e in self.entries) for s in SPLITS}

    def resolve(self, entry: ManifestEntry) -> Path:
        p = Path(entry.sample_path)
        if not p.is_absolute() and self.root is not None:
            p = self.root / p
        return p

    def load(self, entry: ManifestEntry) -> AnnotatedScene:
        return load_scene(self.resolve(entry))

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "normalization_stats_path": self.normalization_stats_path,
            "generator": self.generator,
            "counts": self.counts(),
            "samples": [e.to_dict() for e in self.entries],
        }

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        out = self
        if self.root is not None and self.root.resolve() != path.parent.resolve():
            # rebase relative sample paths onto the new manifest location
            rebased = [
                replace(e, sample_path=os.path.relpath(self.resolve(e).resolve(), path.parent.resolve()))
                for e in self.entries
            ]
            out = replace(self, entries=rebased)
        _write_json(path, out.to_dict())
        return path

    @classmethod
    def from_file(cls, path) -> "DatasetManifest":
        path = Path(path)
        try:
            raw = json.loads(path.read_text())
            entries = [
                ManifestEntry(
                    sample_path=s["sample_path"],
                    station_id=s["station_id"],
                    region_tag=s.get("region_tag", ""),
                    split=s.get("split"),
                    has_landcover=s.get("has_landcover", True),
                )
                for s in raw["samples"]
            ]
        except (OSError, json.JSONDecodeError, KeyError, TypeError) as exc:
            raise ManifestError(f"{path}: cannot read manifest ({exc})") from exc
        return cls(
            entries=entries,
            seed=raw.get("seed"),
            normalization_stats_path=raw.get("normalization_stats_path"),
            generator=raw.get("generator"),
            root=path.parent,
        )


def split_counts(n: int) -> tuple[int, int, int]:
    """70/15/15 partition sizes.

    Validation rounds 15% half-up, test rounds it half-down and training
    takes the remainder: 2871 -> (2009, 431, 431), 10 -> (7, 2, 1).
    """
    n_val = (15 * n + 50) // 100
    n_test = (15 * n + 49) // 100
    return n - n_val - n_test, n_val, n_test


def split_dataset(samples: Sequence[ManifestEntry], seed: int, min_samples: int = 10, **manifest_kw) -> DatasetManifest:
    usable = [s for s in samples if s.has_landcover]
    if len(usable) < min_samples:
        raise InsufficientDataError(f"need at least {min_samples} samples with landcover, got {len(usable)}")
    usable.sort(key=lambda e: (e.station_id, e.sample_path))
    order = np.random.default_rng(seed).permutation(len(usable))
    n_train, n_val, _ = split_counts(len(usable))
    entries = []
    for rank, idx in enumerate(order):
        split = "train" if rank < n_train else "val" if rank < n_train + n_val else "test"
        entries.append(replace(usable[idx], split=split))
    return DatasetManifest(entries=entries, seed=int(seed), **manifest_kw)


def entries_from_dir(root) -> list[ManifestEntry]:
    """Scan ``root`` for sample containers (any directory holding meta.json)."""
    root = Path(root)
    out = []
    for meta_path in sorted(root.glob("*/meta.json")):
        meta = json.loads(meta_path.read_text())
        has_lc = any(p.get("name") == "landcover" for p in meta.get("planes", [])) and (
            meta_path.parent / _PLANE_FILES["landcover"][0]
        ).exists()
        out.append(
            ManifestEntry(
                sample_path=meta_path.parent.name,
                station_id=str(meta["station_id"]),
                region_tag=str(meta.get("region_tag", "")),
                has_landcover=has_lc,
            )
        )
    return out


# ---------------------------------------------------------------------------
# normalization


@dataclass
class NormStats:
    mean: np.ndarray
    std: np.ndarray
    target_mean: float
    target_std: float
    std_convention: str = "population"

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float32).reshape(N_CHANNELS)
        self.std = np.asarray(self.std, dtype=np.float32).reshape(N_CHANNELS)
        self.target_mean = float(self.target_mean)
        self.target_std = float(self.target_std)
        if not (np.all(self.std > 0) and self.target_std > 0):
            raise ValidationError("NormStats: all std components must be > 0")

    def _bcast(self, arr, ndim):
        return arr.reshape((-1,) + (1,) * (ndim - 1))

    def normalize_inputs(self, x: np.ndarray) -> np.ndarray:
        """Standardize a channel-first array ``(13, ...)``."""
        return (x - self._bcast(self.mean, x.ndim)) / self._bcast(self.std, x.ndim)

    def denormalize_inputs(self, z: np.ndarray) -> np.ndarray:
        return z * self._bcast(self.std, z.ndim) + self._bcast(self.mean, z.ndim)

    def normalize_target(self, y):
        return (y - self.target_mean) / self.target_std

    def denormalize_target(self, z):
        return z * self.target_std + self.target_mean

    def to_dict(self) -> dict:
        return {
            "mean": [float(v) for v in self.mean],
            "std": [float(v) for v in self.std],
            "target_mean": self.target_mean,
            "target_std": self.target_std,
            "std_convention": self.std_convention,
            "channels": list(CHANNEL_NAMES),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        return cls(d["mean"], d["std"], d["target_mean"], d["target_std"], d.get("std_convention", "population"))

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        _write_json(path, self.to_dict())
        return path

    @classmethod
    def from_file(cls, path) -> "NormStats":
        return cls.from_dict(json.loads(Path(path).read_text()))


def population_mean_std(values) -> tuple[float, float]:
    v = np.asarray(values, dtype=np.float64)
    return float(v.mean()), float(v.std(ddof=0))


def _is_degenerate(mean: float, std: float) -> bool:
    return not std > 1e-7 * max(abs(mean), 1e-30)


def norm_stats_from_scenes(scenes: Iterable[AnnotatedScene]) -> NormStats:
    """Per-channel population mean/std over all pixels, merged scene by scene."""
    count = 0
    mean = np.zeros(N_CHANNELS)
    m2 = np.zeros(N_CHANNELS)
    targets = []
    for scene in scenes:
        x = scene.inputs.reshape(N_CHANNELS, -1).astype(np.float64)
        n_b = x.shape[1]
        mean_b = x.mean(axis=1)
        m2_b = ((x - mean_b[:, None]) ** 2).sum(axis=1)
        delta = mean_b - mean
        total = count + n_b
        mean = mean + delta * n_b / total
        m2 = m2 + m2_b + delta**2 * count * n_b / total
        count = total
        targets.append(scene.no2_value)
    if not targets:
        raise InsufficientDataError("no scenes to compute statistics from")
    std = np.sqrt(m2 / count)
    for c in range(N_CHANNELS):
        if _is_degenerate(mean[c], std[c]):
            raise DegenerateStatsError(CHANNEL_NAMES[c])
    t_mean, t_std = population_mean_std(targets)
    if _is_degenerate(t_mean, t_std):
        raise DegenerateStatsError("no2_value")
    return NormStats(mean, std, t_mean, t_std)


def compute_norm_stats(manifest: DatasetManifest) -> NormStats:
    train = manifest.split("train")
    if not train:
        raise InsufficientDataError("train split is empty")
    return norm_stats_from_scenes(manifest.load(e) for e in train)


# ---------------------------------------------------------------------------
# synthetic scenes

# Fixed world: class signatures do not depend on the dataset seed, so
# differently seeded sets (and shifted regions) share one input->label law.
_WORLD_SEED = 20180101
LABEL_INTERCEPT = 4.0
LABEL_CLASS_COEFS = (2.0, 6.0, 3.0, 9.0, 1.0, 30.0, 0.5, 4.0, 12.0, 18.0, 7.0)
LABEL_S5P_COEF = 0.25
LABEL_CENTER = 8


def synthetic_label_spec() -> dict:
    return {
        "kind": "linear",
        "intercept": LABEL_INTERCEPT,
        "class_coefficients": list(LABEL_CLASS_COEFS),
        "s5p_mean_coefficient": LABEL_S5P_COEF,
        "center_region": LABEL_CENTER,
        "center_pixel": list(CENTER_PIXEL),
        "formula": "intercept + class_coefficients . class_fractions(center_region x center_region around center_pixel)"
        " + s5p_mean_coefficient * mean(s5p_plane)",
    }


def synthetic_label(landcover: np.ndarray, s5p_plane: np.ndarray, spec: dict | None = None) -> float:
    spec = spec or synthetic_label_spec()
    half = spec["center_region"] // 2
    r, c = spec["center_pixel"]
    block = landcover[r - half : r + half, c - half : c + half]
    frac = np.bincount(block.ravel(), minlength=N_CLASSES) / block.size
    y = spec["intercept"] + float(np.dot(spec["class_coefficients"], frac))
    y += spec["s5p_mean_coefficient"] * float(np.asarray(s5p_plane, dtype=np.float64).mean())
    return float(np.float32(y))


def _class_signatures(domain_shift: float) -> np.ndarray:
    rng = np.random.default_rng(_WORLD_SEED)
    sig = rng.uniform(400.0, 3500.0, size=(N_CLASSES, N_BANDS))
    if domain_shift:
        sig = sig * (1.0 + domain_shift * rng.uniform(-1.0, 1.0, size=sig.shape))
    return sig


def _smooth_field(rng, shape, sigma):
    f = ndimage.gaussian_filter(rng.standard_normal(shape), sigma=sigma, mode="reflect")
    return (f - f.mean()) / (f.std() + 1e-12)


def make_synthetic_scene(rng: np.random.Generator, station_id: str, region_tag: str = "SYN", domain_shift: float = 0.0) -> AnnotatedScene:
    size = (BASE_SIZE, BASE_SIZE)
    logits = np.stack([_smooth_field(rng, size, 10.0) for _ in range(N_CLASSES)])
    logits += rng.normal(0.0, 0.6, size=(N_CLASSES, 1, 1))
    landcover = logits.argmax(axis=0).astype(np.uint8)

    sig = _class_signatures(domain_shift)
    s2 = sig[landcover].transpose(2, 0, 1)
    texture = np.stack([_smooth_field(rng, size, 2.0) for _ in range(N_BANDS)])
    s2 = s2 * (1.0 + 0.05 * texture) + rng.normal(0.0, 20.0, size=s2.shape)

    level = rng.uniform(20.0, 80.0) + 15.0 * domain_shift
    s5p = level + 4.0 * _smooth_field(rng, size, 40.0)
    s5p = s5p.astype(np.float32)[None]

    return AnnotatedScene(
        s2_bands=s2.astype(np.float32),
        s5p_plane=s5p,
        landcover=landcover,
        no2_value=synthetic_label(landcover, s5p),
        station_id=station_id,
        lon=float(rng.uniform(-10.0, 30.0)),
        lat=float(rng.uniform(36.0, 60.0)),
        region_tag=region_tag,
    )


def generate_synthetic(n: int, seed: int, out_dir, region_tag: str = "SYN", domain_shift: float = 0.0) -> DatasetManifest:
    """Write ``n`` learnable-by-construction scenes and an unsplit manifest.

    ``no2_value`` is the linear law returned by :func:`synthetic_label_spec`
    evaluated on each scene's own planes; it is recorded in the manifest.
    """
    if n < 1:
        raise ValidationError("n must be >= 1")
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create {out_dir}: {exc}") from exc
    entries = []
    for i in range(n):
        rng = np.random.default_rng([int(seed), i])
        station_id = f"{region_tag}-{int(seed)}-{i:05d}"
        scene = make_synthetic_scene(rng, station_id, region_tag, domain_shift)
        name = f"sample_{i:05d}"
        save_scene(scene, out_dir / name)
        entries.append(ManifestEntry(name, station_id, region_tag))
    generator = {"seed": int(seed), "n": n, "domain_shift": domain_shift, "label": synthetic_label_spec()}
    manifest = DatasetManifest(entries=entries, seed=int(seed), generator=generator, root=out_dir)
    manifest.save(out_dir / "manifest.json")
    return manifest
