"""Light bottom-up encoder built from DSS-nbt and SS-nbt units."""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence, Tuple

import torch
import torch.nn as nn

from .errors import ConfigError, InputError
from .tensors import channel_shuffle


@dataclass(frozen=True)
class StageConfig:
    channels: Tuple[int, int, int, int] = (32, 64, 128, 256)
    # stage 2 carries two SS-nbt units, the others three
    dilations: Tuple[Tuple[int, ...], ...] = ((1, 1, 1), (1, 1), (1, 2, 5), (2, 5, 9))
    batch_norm: bool = True
    in_channels: int = 3

    def __post_init__(self):
        if len(self.channels) != 4 or len(self.dilations) != 4:
            raise ConfigError("backbone needs exactly four stages")
        prev = self.in_channels
        for c in self.channels:
            if c % 2:
                raise ConfigError(f"stage channels must be even, got {c}")
            if c <= prev:
                raise ConfigError(f"stage channels must grow ({prev} -> {c}): DSS-nbt concatenates the pooled input")
            prev = c
        for rates in self.dilations:
            if any(d < 1 for d in rates):
                raise ConfigError(f"dilation rates must be >= 1, got {rates}")


class StageFeatures(NamedTuple):
    f1: torch.Tensor
    f2: torch.Tensor
    f3: torch.Tensor
    f4: torch.Tensor


def _norm(channels: int, enabled: bool) -> nn.Module:
    return nn.BatchNorm2d(channels, momentum=0.1) if enabled else nn.Identity()


class _FactorizedBranch(nn.Module):
    """3x1 -> 1x3 -> dilated 3x1 -> dilated 1x3, normalized after every conv."""

    def __init__(self, channels: int, dilation: int, batch_norm: bool):
        super().__init__()
        bias = not batch_norm
        d = dilation
        self.body = nn.Sequential(
            nn.Conv2d(channels, channels, (3, 1), padding=(1, 0), bias=bias),
            _norm(channels, batch_norm), nn.ReLU(),
            nn.Conv2d(channels, channels, (1, 3), padding=(0, 1), bias=bias),
            _norm(channels, batch_norm), nn.ReLU(),
            nn.Conv2d(channels, channels, (3, 1), padding=(d, 0), dilation=(d, 1), bias=bias),
            _norm(channels, batch_norm), nn.ReLU(),
            nn.Conv2d(channels, channels, (1, 3), padding=(0, d), dilation=(1, d), bias=bias),
            _norm(channels, batch_norm),
        )

    def forward(self, x):
        return self.body(x)


class SSnbt(nn.Module):
    """Split-shuffle non-bottleneck residual unit; shape preserving."""

    def __init__(self, channels: int, dilation: int = 1, batch_norm: bool = True):
        super().__init__()
        if channels % 2:
            raise ConfigError(f"SS-nbt needs an even channel count, got {channels}")
        half = channels // 2
        self.channels = channels
        self.left = _FactorizedBranch(half, dilation, batch_norm)
        self.right = _FactorizedBranch(half, dilation, batch_norm)

    def forward(self, x):
        if x.shape[1] != self.channels:
            raise ConfigError(f"SS-nbt built for {self.channels} channels, got {x.shape[1]}")
        a, b = x.chunk(2, dim=1)
        out = torch.cat([self.left(a), self.right(b)], dim=1)
        return channel_shuffle(x + out, 2)


class DSSnbt(nn.Module):
    """Stride-2 downsampling: 3x3 conv branch concatenated with max-pooled input."""

    def __init__(self, in_channels: int, out_channels: int, batch_norm: bool = True):
        super().__init__()
        if out_channels <= in_channels:
            raise ConfigError(f"DSS-nbt needs out_channels > in_channels, got {in_channels} -> {out_channels}")
        self.conv = nn.Conv2d(in_channels, out_channels - in_channels, 3, stride=2, padding=1,
                              bias=not batch_norm)
        self.pool = nn.MaxPool2d(3, stride=2, padding=1)
        self.norm = _norm(out_channels, batch_norm)
        self.act = nn.ReLU()

    def forward(self, x):
        return self.act(self.norm(torch.cat([self.conv(x), self.pool(x)], dim=1)))


class Backbone(nn.Module):
    def __init__(self, cfg: StageConfig = StageConfig()):
        super().__init__()
        self.cfg = cfg
        stages = []
        prev = cfg.in_channels
        for c, rates in zip(cfg.channels, cfg.dilations):
            units = [DSSnbt(prev, c, cfg.batch_norm)]
            units += [SSnbt(c, d, cfg.batch_norm) for d in rates]
            stages.append(nn.Sequential(*units))
            prev = c
        self.stages = nn.ModuleList(stages)

    def forward(self, image: torch.Tensor) -> StageFeatures:
        if image.dim() != 4 or image.shape[1] != self.cfg.in_channels:
            raise InputError(f"expected N x {self.cfg.in_channels} x H x W image, got {tuple(image.shape)}")
        h, w = image.shape[2:]
        if h % 16 or w % 16:
            raise InputError(f"image extents {h}x{w} must be divisible by 16")
        feats = []
        x = image
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return StageFeatures(*feats)


def ss_nbt_param_count(channels: int, batch_norm: bool = True) -> int:
    """Closed-form parameter count of one SS-nbt unit."""
    half = channels // 2
    per_conv = half * half * 3 + (0 if batch_norm else half)
    per_norm = 2 * half if batch_norm else 0
    return 2 * 4 * (per_conv + per_norm)


def dss_nbt_param_count(in_channels: int, out_channels: int, batch_norm: bool = True) -> int:
    branch = out_channels - in_channels
    conv = branch * in_channels * 9 + (0 if batch_norm else branch)
    return conv + (2 * out_channels if batch_norm else 0)


def backbone_param_count(cfg: StageConfig) -> int:
    total = 0
    prev = cfg.in_channels
    for c, rates in zip(cfg.channels, cfg.dilations):
        total += dss_nbt_param_count(prev, c, cfg.batch_norm)
        total += len(rates) * ss_nbt_param_count(c, cfg.batch_norm)
        prev = c
    return total


def stage_sizes(h: int, w: int) -> Sequence[Tuple[int, int]]:
    return [(h >> k, w >> k) for k in range(1, 5)]
