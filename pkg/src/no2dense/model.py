"""UNet / Autoencoder backbones with an NO2 regression head and a land-cover head."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple

import torch
import torch.nn as nn

from .datamodel import N_CHANNELS, N_CLASSES, NormStats
from .errors import ManifestError, ShapeError
from .sampler import WINDOW, center_crop

PARAMS_FILE = "params.pt"
MANIFEST_FILE = "manifest.json"


@dataclass
class BackboneConfig:
    kind: str = "autoencoder"
    encoder_channels: list[int] = field(default_factory=lambda: [32, 64, 128, 256])
    bottleneck_channels: int = 512
    out_channels: int = 64
    in_channels: int = N_CHANNELS

    def __post_init__(self):
        if self.kind not in ("unet", "autoencoder"):
            raise ValueError(f"kind must be 'unet' or 'autoencoder', got {self.kind!r}")
        self.encoder_channels = [int(c) for c in self.encoder_channels]


def conv_block(c_in, c_out):
    return nn.Sequential(
        nn.Conv2d(c_in, c_out, 3, padding=1, bias=False),
        nn.BatchNorm2d(c_out),
        nn.ReLU(inplace=True),
        nn.Conv2d(c_out, c_out, 3, padding=1, bias=False),
        nn.BatchNorm2d(c_out),
        nn.ReLU(inplace=True),
    )


class Backbone(nn.Module):
    """Four 2x down/up stages. ``kind='unet'`` concatenates encoder maps into the decoder."""

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.cfg = cfg
        self.skip = cfg.kind == "unet"
        chans = cfg.encoder_channels
        self.encoder = nn.ModuleList()
        c = cfg.in_channels
        for ch in chans:
            self.encoder.append(conv_block(c, ch))
            c = ch
        self.pool = nn.MaxPool2d(2)
        self.bottleneck = conv_block(c, cfg.bottleneck_channels)
        self.up = nn.ModuleList()
        self.decoder = nn.ModuleList()
        c = cfg.bottleneck_channels
        for ch in reversed(chans):
            self.up.append(nn.ConvTranspose2d(c, ch, 2, stride=2))
            self.decoder.append(conv_block(2 * ch if self.skip else ch, ch))
            c = ch
        self.project = nn.Sequential(nn.Conv2d(c, cfg.out_channels, 1), nn.ReLU(inplace=True))

    def forward(self, x, return_stages=False):
        check_input(x, self.cfg.in_channels)
        stages = [tuple(x.shape[-2:])]
        skips = []
        for enc in self.encoder:
            x = enc(x)
            skips.append(x)
            x = self.pool(x)
            stages.append(tuple(x.shape[-2:]))
        x = self.bottleneck(x)
        for up, dec, skip in zip(self.up, self.decoder, reversed(skips)):
            x = up(x)
            if self.skip:
                x = torch.cat([x, skip], dim=1)
            x = dec(x)
            stages.append(tuple(x.shape[-2:]))
        x = self.project(x)
        return (x, stages) if return_stages else x


def check_input(x, channels=N_CHANNELS):
    if x.dim() != 4:
        raise ShapeError(f"batch: expected 4-d input (B, C, H, W), got {x.dim()}-d")
    if x.shape[1] != channels:
        raise ShapeError(f"channels: expected {channels}, got {x.shape[1]}")
    if tuple(x.shape[-2:]) != (WINDOW, WINDOW):
        raise ShapeError(f"height/width: expected {WINDOW}x{WINDOW}, got {x.shape[-2]}x{x.shape[-1]}")


class NO2Head(nn.Module):
    """3x3 conv stack to a 1x128x128 plane, then the central P x P crop.

    Replicate padding keeps the head exactly constant on constant features.
    """

    def __init__(self, in_channels=64, hidden=32):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(in_channels, hidden, 3, padding=1, padding_mode="replicate"),
            nn.ReLU(inplace=True),
            nn.Conv2d(hidden, 1, 3, padding=1, padding_mode="replicate"),
        )

    def forward(self, features, P=WINDOW):
        return center_crop(self.body(features), P)


class LandCoverHead(nn.Module):
    def __init__(self, in_channels=64, hidden=32, n_classes=N_CLASSES):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(in_channels, hidden, 3, padding=1, padding_mode="replicate"),
            nn.ReLU(inplace=True),
            nn.Conv2d(hidden, n_classes, 1),
        )

    def forward(self, features):
        if features.dim() != 4 or features.shape[1] != self.body[0].in_channels:
            raise ShapeError(f"features: expected (B, {self.body[0].in_channels}, H, W), got {tuple(features.shape)}")
        return self.body(features)


class ModelOutput(NamedTuple):
    features: torch.Tensor
    no2_plane: torch.Tensor
    lc_logits: torch.Tensor | None


class DenseEstimator(nn.Module):
    def __init__(self, cfg: BackboneConfig | None = None):
        super().__init__()
        self.cfg = cfg or BackboneConfig()
        self.backbone = Backbone(self.cfg)
        self.no2_head = NO2Head(self.cfg.out_channels)
        self.lc_head = LandCoverHead(self.cfg.out_channels)

    def forward(self, x, P=WINDOW, with_landcover=True) -> ModelOutput:
        features = self.backbone(x)
        plane = self.no2_head(features, P)
        logits = self.lc_head(features) if with_landcover else None
        return ModelOutput(features, plane, logits)

    @torch.no_grad()
    def predict_planes(self, x, P):
        """Eval-mode NO2 planes for a batch of normalized windows."""
        self.eval()
        return self.no2_head(self.backbone(x), P)


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def content_hash(model: nn.Module) -> str:
    """SHA-256 over parameter/buffer names and raw tensor bytes."""
    h = hashlib.sha256()
    for name, t in sorted(model.state_dict().items()):
        h.update(name.encode())
        h.update(str(t.dtype).encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def save_checkpoint(model: DenseEstimator, path, *, P: int, stats: NormStats, lam: float, seed: int, extra: dict | None = None) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    torch.save(model.state_dict(), path / PARAMS_FILE)
    manifest = {
        "backbone": asdict(model.cfg),
        "prediction_space": int(P),
        "lambda": float(lam),
        "norm_stats": stats.to_dict(),
        "seed": int(seed),
        "content_hash": content_hash(model),
        **(extra or {}),
    }
    (path / MANIFEST_FILE).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


@dataclass
class Checkpoint:
    model: DenseEstimator
    stats: NormStats
    P: int
    manifest: dict
    path: Path | None = None

    @property
    def descriptor(self) -> dict:
        return {
            "kind": self.model.cfg.kind,
            "loss": "combined" if self.manifest.get("lambda", 0) > 0 else "no2",
            "P": self.P,
            "content_hash": self.manifest.get("content_hash"),
        }


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    try:
        manifest = json.loads((path / MANIFEST_FILE).read_text())
        cfg = BackboneConfig(**manifest["backbone"])
        stats = NormStats.from_dict(manifest["norm_stats"])
        P = int(manifest["prediction_space"])
    except (OSError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise ManifestError(f"{path}: incomplete checkpoint manifest ({exc})") from exc
    model = DenseEstimator(cfg)
    model.load_state_dict(torch.load(path / PARAMS_FILE, map_location="cpu", weights_only=True))
    model.eval()
    return Checkpoint(model, stats, P, manifest, path)
