"""Hierarchical feature refinement decoder and the full BGHNet model."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, NamedTuple, Optional, Tuple

import torch
import torch.nn as nn

from .backbone import Backbone, StageConfig, StageFeatures
from .cfem import CGM, GRB, GlobalGuidance
from .errors import ConfigError, InputError
from .tensors import bilinear_upsample, pixel_shuffle


@dataclass(frozen=True)
class NetworkConfig:
    stage: StageConfig = field(default_factory=StageConfig)
    # FFAB_k output width == width of pyramid level k guidance
    decoder_widths: Tuple[int, int, int, int] = (32, 32, 16, 8)
    sc_channels: int = 512
    sc_groups: int = 4
    pool_bins: Tuple[int, ...] = (3, 5)
    use_grb: bool = True

    def __post_init__(self):
        if len(self.decoder_widths) != 4 or any(w < 1 for w in self.decoder_widths):
            raise ConfigError(f"need four positive decoder widths, got {self.decoder_widths}")

    @classmethod
    def tiny(cls) -> "NetworkConfig":
        """Small configuration used for gradient checks and fast tests."""
        return cls(stage=StageConfig(channels=(8, 16, 24, 32)),
                   decoder_widths=(8, 8, 8, 8), sc_channels=16)


class NetworkOutputs(NamedTuple):
    side1: torch.Tensor
    side2: torch.Tensor
    side3: torch.Tensor
    final: torch.Tensor

    @property
    def sides(self):
        return (self.side1, self.side2, self.side3)


class FFAB(nn.Module):
    """Concatenate coarse map, guidance and local features; conv-BN-ReLU to
    4*width channels; pixel shuffle by 2."""

    def __init__(self, in_channels: int, width: int, batch_norm: bool = True):
        super().__init__()
        self.in_channels = in_channels
        self.conv = nn.Conv2d(in_channels, 4 * width, 3, padding=1, bias=not batch_norm)
        self.norm = nn.BatchNorm2d(4 * width) if batch_norm else nn.Identity()
        self.act = nn.ReLU()

    def forward(self, coarse: Optional[torch.Tensor], guidance: torch.Tensor,
                local: torch.Tensor) -> torch.Tensor:
        parts = [t for t in (coarse, guidance, local) if t is not None]
        size = guidance.shape[2:]
        if any(t.shape[2:] != size for t in parts):
            raise ConfigError(f"FFAB inputs differ in spatial size: {[tuple(t.shape[2:]) for t in parts]}")
        x = torch.cat(parts, dim=1)
        if x.shape[1] != self.in_channels:
            raise ConfigError(f"FFAB expected {self.in_channels} channels, got {x.shape[1]}")
        return pixel_shuffle(self.act(self.norm(self.conv(x))), 2)


class SideHead(nn.Module):
    def __init__(self, in_channels: int):
        super().__init__()
        self.conv = nn.Conv2d(in_channels, 1, 1, bias=True)

    def forward(self, features, target_h: int, target_w: int):
        return bilinear_upsample(self.conv(features), target_h, target_w)


class BGHNet(nn.Module):
    def __init__(self, cfg: NetworkConfig = NetworkConfig()):
        super().__init__()
        self.cfg = cfg
        sc = cfg.stage
        c = sc.channels
        w = cfg.decoder_widths
        self.backbone = Backbone(sc)
        self.grbs = nn.ModuleList(GRB(ch) for ch in c) if cfg.use_grb else nn.ModuleList()
        self.cgm = CGM(c[3], cfg.sc_channels, w, cfg.sc_groups, cfg.pool_bins)
        # FFAB_k fuses (coarse FFAB_{k-1}, guidance level k, stage 5-k)
        ffabs = []
        for k in range(4):
            coarse = w[k - 1] if k else 0
            ffabs.append(FFAB(coarse + w[k] + c[3 - k], w[k], sc.batch_norm))
        self.ffabs = nn.ModuleList(ffabs)
        self.side_heads = nn.ModuleList(SideHead(w[k]) for k in range(3))
        self.final_head = nn.Conv2d(w[3], 1, 1, bias=True)
        init_weights(self)

    def _select(self, k: int, f: torch.Tensor) -> torch.Tensor:
        return self.grbs[k](f) if self.cfg.use_grb else f

    def ffab_outputs(self, image: torch.Tensor) -> List[torch.Tensor]:
        """Decoder feature maps FFAB1..FFAB4, coarse to fine."""
        if image.dim() != 4:
            raise InputError(f"expected an N x 3 x H x W image batch, got {tuple(image.shape)}")
        feats: StageFeatures = self.backbone(image)
        local = [self._select(k, f) for k, f in enumerate(feats)]
        guidance: GlobalGuidance = self.cgm(feats.f4, local[3])
        x, decoded = None, []
        for k, ffab in enumerate(self.ffabs):
            x = ffab(x, guidance[k], local[3 - k])
            decoded.append(x)
        return decoded

    def forward(self, image: torch.Tensor) -> NetworkOutputs:
        decoded = self.ffab_outputs(image)
        h, w = image.shape[2:]
        sides = [head(f, h, w) for head, f in zip(self.side_heads, decoded[:3])]
        return NetworkOutputs(*sides, self.final_head(decoded[3]))


def init_weights(model: nn.Module) -> None:
    """Conv weights U(-sqrt(6/fan_in), +sqrt(6/fan_in)); biases zero; BN affine (1, 0)."""
    for m in model.modules():
        if isinstance(m, nn.Conv2d):
            fan_in = m.weight.shape[1] * m.weight.shape[2] * m.weight.shape[3]
            bound = math.sqrt(6.0 / fan_in)
            with torch.no_grad():
                m.weight.uniform_(-bound, bound)
                if m.bias is not None:
                    m.bias.zero_()
        elif isinstance(m, nn.BatchNorm2d):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())
