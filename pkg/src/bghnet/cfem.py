"""Context feature encoder pieces: channel gating (GRB) and the context
guidance module (pyramid pooling + shuffle concatenation + feature pyramid).
"""
from __future__ import annotations

from typing import List, NamedTuple, Sequence

import torch
import torch.nn as nn

from .errors import ConfigError
from .tensors import (adaptive_avg_pool, bilinear_upsample, channel_shuffle,
                      global_avg_pool, pixel_shuffle)


class GlobalGuidance(NamedTuple):
    g1: torch.Tensor  # stride 16
    g2: torch.Tensor  # stride 8
    g3: torch.Tensor  # stride 4
    g4: torch.Tensor  # stride 2


class GRB(nn.Module):
    """x * sigmoid(conv1x1(global_avg_pool(x)))."""

    def __init__(self, channels: int):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 1, bias=True)

    def gate(self, x):
        return torch.sigmoid(self.conv(global_avg_pool(x)))

    def forward(self, x):
        return x * self.gate(x)


class PPM(nn.Module):
    """Four context branches over the deepest features, all at f4's size.

    Branch 1 is the GRB-selected identity, branch 2 the global average, and
    branches 3-4 adaptive averages over ``bins`` (clamped to the feature
    extent on tiny inputs), each brought back up bilinearly.
    """

    def __init__(self, bins: Sequence[int] = (3, 5)):
        super().__init__()
        self.bins = tuple(bins)

    def forward(self, f4: torch.Tensor, selected: torch.Tensor) -> List[torch.Tensor]:
        h, w = f4.shape[2:]
        branches = [selected, bilinear_upsample(global_avg_pool(f4), h, w)]
        for b in self.bins:
            pooled = adaptive_avg_pool(f4, min(b, h), min(b, w))
            branches.append(bilinear_upsample(pooled, h, w))
        return branches


class ShuffleConcat(nn.Module):
    def __init__(self, in_channels: int, out_channels: int, groups: int = 4):
        super().__init__()
        if in_channels % groups or out_channels % groups:
            raise ConfigError(f"shuffle concat channels {in_channels}->{out_channels} not divisible by {groups}")
        self.groups = groups
        self.in_channels = in_channels
        self.conv = nn.Conv2d(in_channels, out_channels, 1, groups=groups, bias=True)

    def forward(self, branches: Sequence[torch.Tensor]) -> torch.Tensor:
        size = branches[0].shape[2:]
        if any(b.shape[2:] != size for b in branches):
            raise ConfigError(f"shuffle concat needs equal spatial sizes, got {[tuple(b.shape[2:]) for b in branches]}")
        x = torch.cat(list(branches), dim=1)
        if x.shape[1] != self.in_channels:
            raise ConfigError(f"shuffle concat expected {self.in_channels} channels, got {x.shape[1]}")
        return channel_shuffle(self.conv(x), self.groups)


class CFPMBranch(nn.Module):
    """3x3 conv to width*r^2 channels, then pixel shuffle by r = 2**(level-1)."""

    def __init__(self, in_channels: int, width: int, level: int):
        super().__init__()
        if not 1 <= level <= 4:
            raise ConfigError(f"pyramid level must be 1..4, got {level}")
        self.r = 2 ** (level - 1)
        self.width = width
        self.conv = nn.Conv2d(in_channels, width * self.r * self.r, 3, padding=1, bias=True)

    def forward(self, fused):
        return pixel_shuffle(self.conv(fused), self.r)


class CGM(nn.Module):
    def __init__(self, in_channels: int, sc_channels: int, widths: Sequence[int],
                 groups: int = 4, bins: Sequence[int] = (3, 5)):
        super().__init__()
        if len(widths) != 4:
            raise ConfigError("context guidance needs four pyramid widths")
        self.ppm = PPM(bins)
        n_branches = 2 + len(self.ppm.bins)
        self.sc = ShuffleConcat(n_branches * in_channels, sc_channels, groups)
        self.cfpm = nn.ModuleList(CFPMBranch(sc_channels, w, level)
                                  for level, w in enumerate(widths, start=1))

    def forward(self, f4: torch.Tensor, selected: torch.Tensor) -> GlobalGuidance:
        fused = self.sc(self.ppm(f4, selected))
        return GlobalGuidance(*(branch(fused) for branch in self.cfpm))
