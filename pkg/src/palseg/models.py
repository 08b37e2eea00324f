"""Segmentation network (UNet-style) and quality awareness network (VGG-style).

Layer-level choices (nonlinearity, normalisation, padding) come from
``model_profile.json`` so both networks are reproducible from the profile plus
a seed.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path

import torch
from torch import nn


class ShapeError(ValueError):
    pass


class DivergenceError(FloatingPointError):
    """Raised when a forward pass or loss produces non-finite values."""


_NONLIN = {"relu": nn.ReLU, "leaky_relu": nn.LeakyReLU, "elu": nn.ELU}


def load_profile(path: str | Path | None = None) -> dict:
    if path is None:
        text = resources.files("palseg").joinpath("model_profile.json").read_text()
    else:
        text = Path(path).read_text()
    return json.loads(text)


def profile_hash(profile: dict) -> str:
    canon = json.dumps(profile, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()


@dataclass(frozen=True)
class SegNetConfig:
    n_classes: int
    in_channels: int = 1
    depth: int = 4
    base_width: int = 16
    nonlinearity: str = "relu"
    normalization: str = "groupnorm"

    def __post_init__(self):
        if self.depth < 2:
            raise ValueError(f"depth must be >= 2, got {self.depth}")
        if self.n_classes < 1 or self.in_channels < 1 or self.base_width < 1:
            raise ValueError("n_classes, in_channels and base_width must be positive")
        _check_layer_opts(self.nonlinearity, self.normalization)

    @property
    def divisor(self) -> int:
        return 2 ** (self.depth - 1)


@dataclass(frozen=True)
class QamConfig:
    in_channels: int
    block_widths: tuple[int, ...] = (16, 32, 64, 64, 64)
    nonlinearity: str = "relu"
    normalization: str = "groupnorm"

    def __post_init__(self):
        object.__setattr__(self, "block_widths", tuple(self.block_widths))
        if self.in_channels < 2:
            raise ValueError("QAM takes image channels plus at least one label channel")
        if len(self.block_widths) != 5 or any(w < 1 for w in self.block_widths):
            raise ValueError(f"block_widths must be 5 positive ints, got {self.block_widths}")
        _check_layer_opts(self.nonlinearity, self.normalization)

    @classmethod
    def for_segnet(cls, seg: SegNetConfig, **kw) -> "QamConfig":
        """Image channels plus one channel per segmentation class."""
        return cls(in_channels=seg.in_channels + seg.n_classes, **kw)


def _check_layer_opts(nonlinearity: str, normalization: str) -> None:
    if nonlinearity not in _NONLIN:
        raise ValueError(f"unknown nonlinearity {nonlinearity!r}")
    if normalization not in ("groupnorm", "batchnorm", "none"):
        raise ValueError(f"unknown normalization {normalization!r}")


def configs_from_profile(profile: dict, name: str, n_classes: int,
                         in_channels: int = 1) -> tuple[SegNetConfig, QamConfig]:
    p = profile["profiles"][name]
    layer = {"nonlinearity": profile["nonlinearity"], "normalization": profile["normalization"]}
    seg = SegNetConfig(n_classes=n_classes, in_channels=in_channels, **p["segnet"], **layer)
    qam = QamConfig.for_segnet(seg, block_widths=tuple(p["qam"]["block_widths"]), **layer)
    return seg, qam


def _conv_block(c_in: int, c_out: int, nonlinearity: str, normalization: str) -> nn.Sequential:
    layers: list[nn.Module] = []
    for c in (c_in, c_out):
        layers.append(nn.Conv2d(c, c_out, 3, padding=1, bias=normalization == "none"))
        if normalization == "groupnorm":
            layers.append(nn.GroupNorm(math.gcd(8, c_out), c_out))
        elif normalization == "batchnorm":
            layers.append(nn.BatchNorm2d(c_out))
        layers.append(_NONLIN[nonlinearity]())
    return nn.Sequential(*layers)


class UNet(nn.Module):
    def __init__(self, cfg: SegNetConfig):
        super().__init__()
        self.cfg = cfg
        widths = [cfg.base_width * 2 ** k for k in range(cfg.depth)]
        opts = (cfg.nonlinearity, cfg.normalization)
        self.down = nn.ModuleList(
            _conv_block(cfg.in_channels if k == 0 else widths[k - 1], widths[k], *opts)
            for k in range(cfg.depth)
        )
        self.up = nn.ModuleList(
            nn.ConvTranspose2d(widths[k], widths[k - 1], 2, stride=2) for k in range(cfg.depth - 1, 0, -1)
        )
        self.dec = nn.ModuleList(
            _conv_block(2 * widths[k - 1], widths[k - 1], *opts) for k in range(cfg.depth - 1, 0, -1)
        )
        self.head = nn.Conv2d(widths[0], cfg.n_classes, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        skips = []
        for k, block in enumerate(self.down):
            if k:
                x = nn.functional.max_pool2d(x, 2)
            x = block(x)
            skips.append(x)
        skips.pop()
        for up, block in zip(self.up, self.dec):
            x = block(torch.cat([skips.pop(), up(x)], dim=1))
        return self.head(x)


class QualityNet(nn.Module):
    """VGG-style scorer: five conv blocks, 1x1 conv to one channel, global average pool."""

    def __init__(self, cfg: QamConfig):
        super().__init__()
        self.cfg = cfg
        blocks, c = [], cfg.in_channels
        for w in cfg.block_widths:
            blocks.append(_conv_block(c, w, cfg.nonlinearity, cfg.normalization))
            blocks.append(nn.MaxPool2d(2, ceil_mode=True))
            c = w
        self.features = nn.Sequential(*blocks)
        self.score = nn.Conv2d(c, 1, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.score(self.features(x)).mean(dim=(1, 2, 3))


def _seeded(builder, cfg, seed: int, dtype: torch.dtype) -> nn.Module:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        net = builder(cfg)
    return net.to(dtype)


def build_segnet(cfg: SegNetConfig, seed: int, dtype: torch.dtype = torch.float32) -> UNet:
    return _seeded(UNet, cfg, seed, dtype)


def build_qam(cfg: QamConfig, seed: int, dtype: torch.dtype = torch.float32) -> QualityNet:
    return _seeded(QualityNet, cfg, seed, dtype)


def parameter_count(net: nn.Module) -> int:
    return sum(p.numel() for p in net.parameters())


def seg_forward(net: UNet, images: torch.Tensor) -> torch.Tensor:
    """Per-class logits of shape (B, n_classes, H, W); sigmoid gives foreground probability."""
    cfg = net.cfg
    if images.ndim != 4 or images.shape[1] != cfg.in_channels:
        raise ShapeError(f"expected (B, {cfg.in_channels}, H, W) images, got {tuple(images.shape)}")
    h, w = images.shape[-2:]
    if h % cfg.divisor or w % cfg.divisor:
        raise ShapeError(f"spatial size {h}x{w} not divisible by {cfg.divisor} (depth {cfg.depth})")
    logits = net(images)
    if not torch.isfinite(logits).all():
        raise DivergenceError("segmentation network produced non-finite logits")
    return logits


def qam_forward(net: QualityNet, images: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """One raw quality score per sample from the (image, label) channel concatenation."""
    if images.ndim != 4 or labels.ndim != 4:
        raise ShapeError("images and labels must be (B, C, H, W)")
    if images.shape[0] != labels.shape[0] or images.shape[-2:] != labels.shape[-2:]:
        raise ShapeError(f"images {tuple(images.shape)} and labels {tuple(labels.shape)} are not aligned")
    x = torch.cat([images, labels.to(images.dtype)], dim=1)
    if x.shape[1] != net.cfg.in_channels:
        raise ShapeError(f"QAM expects {net.cfg.in_channels} channels, got {x.shape[1]}")
    scores = net(x)
    if not torch.isfinite(scores).all():
        raise DivergenceError("quality network produced non-finite scores")
    return scores
