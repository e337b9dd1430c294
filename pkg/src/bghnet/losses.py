"""Hybrid segmentation loss: pixel (BCE), map (F1), boundary (BF1) and
patch (SSIM) terms, composed into side, final and total losses.

All maps are (N, 1, H, W) tensors. Region statistics are computed per
image and averaged over the batch.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List

import torch
import torch.nn.functional as F

from .errors import ConfigError, InputError
from .tensors import max_pool_same

EPS = 1e-7

LOSS_FLAVORS = ("hybrid", "bce", "side-all")
COMPONENTS = ("bce", "f1", "bf1", "ssim")


@dataclass(frozen=True)
class BoundaryParams:
    theta: int = 3
    theta_ext: int = 3

    def __post_init__(self):
        for name, v in (("theta", self.theta), ("theta_ext", self.theta_ext)):
            if v < 1 or v % 2 == 0:
                raise ConfigError(f"{name} must be odd and >= 1, got {v}")

    @property
    def width(self) -> int:
        return self.theta // 2


@dataclass(frozen=True)
class SsimParams:
    window: int = 11
    sigma: float = 1.5
    c1: float = 0.01 ** 2
    c2: float = 0.03 ** 2

    def __post_init__(self):
        if self.window < 1:
            raise ConfigError(f"SSIM window must be positive, got {self.window}")
        if self.c1 <= 0 or self.c2 <= 0:
            raise ConfigError("SSIM constants c1, c2 must be positive")


def _check_pair(p: torch.Tensor, g: torch.Tensor) -> None:
    if p.shape != g.shape:
        raise InputError(f"prediction shape {tuple(p.shape)} != ground truth shape {tuple(g.shape)}")
    if p.dim() != 4 or p.shape[1] != 1:
        raise InputError(f"maps must be N x 1 x H x W, got {tuple(p.shape)}")


def _sum(x: torch.Tensor) -> torch.Tensor:
    return x.sum(dim=(1, 2, 3))


def bce_loss(p: torch.Tensor, g: torch.Tensor) -> torch.Tensor:
    _check_pair(p, g)
    p = p.clamp(EPS, 1 - EPS)
    return -(g * torch.log(p) + (1 - g) * torch.log(1 - p)).mean()


def f1_loss(p: torch.Tensor, g: torch.Tensor) -> torch.Tensor:
    _check_pair(p, g)
    inter = _sum(p * g)
    precision = (inter + EPS) / (_sum(p) + EPS)
    recall = (inter + EPS) / (_sum(g) + EPS)
    f1 = 2 * precision * recall / (precision + recall + EPS)
    return (1 - f1).mean()


def extract_boundary(m: torch.Tensor, theta: int) -> torch.Tensor:
    """pool(1 - m, theta) - (1 - m): foreground within floor(theta/2) of background."""
    inv = 1 - m
    return max_pool_same(inv, theta) - inv


def extend_boundary(b: torch.Tensor, theta_ext: int) -> torch.Tensor:
    return max_pool_same(b, theta_ext)


def _boundary_f1(p: torch.Tensor, g: torch.Tensor, bp: BoundaryParams) -> torch.Tensor:
    """Per-image soft boundary F1 of a single class map."""
    pb = extract_boundary(p, bp.theta)
    gb = extract_boundary(g, bp.theta)
    pb_ext = extend_boundary(pb, bp.theta_ext)
    gb_ext = extend_boundary(gb, bp.theta_ext)
    precision = _sum(pb * gb_ext) / (_sum(pb) + EPS)
    recall = _sum(pb_ext * gb) / (_sum(gb) + EPS)
    return 2 * precision * recall / (precision + recall + EPS)


def bf1_loss(p: torch.Tensor, g: torch.Tensor, bp: BoundaryParams = BoundaryParams()) -> torch.Tensor:
    """1 - mean over {background, foreground} of the boundary F1."""
    _check_pair(p, g)
    bf_fg = _boundary_f1(p, g, bp)
    bf_bg = _boundary_f1(1 - p, 1 - g, bp)
    return (1 - (bf_fg + bf_bg) / 2).mean()


def gaussian_window(sp: SsimParams, like: torch.Tensor) -> torch.Tensor:
    x = torch.arange(sp.window, dtype=like.dtype, device=like.device) - (sp.window - 1) / 2
    g = torch.exp(-(x ** 2) / (2 * sp.sigma ** 2))
    g = g / g.sum()
    return (g[:, None] * g[None, :]).view(1, 1, sp.window, sp.window)


def ssim_map(p: torch.Tensor, g: torch.Tensor, sp: SsimParams = SsimParams()) -> torch.Tensor:
    """Per-window SSIM over all fully contained window positions."""
    _check_pair(p, g)
    h, w = p.shape[2:]
    if h < sp.window or w < sp.window:
        raise InputError(f"maps {h}x{w} are smaller than the {sp.window}x{sp.window} SSIM window")
    k = gaussian_window(sp, p)
    mu_p = F.conv2d(p, k)
    mu_g = F.conv2d(g, k)
    var_p = F.conv2d(p * p, k) - mu_p ** 2
    var_g = F.conv2d(g * g, k) - mu_g ** 2
    cov = F.conv2d(p * g, k) - mu_p * mu_g
    num = (2 * mu_p * mu_g + sp.c1) * (2 * cov + sp.c2)
    den = (mu_p ** 2 + mu_g ** 2 + sp.c1) * (var_p + var_g + sp.c2)
    return num / den


def ssim_loss(p: torch.Tensor, g: torch.Tensor, sp: SsimParams = SsimParams()) -> torch.Tensor:
    return 1 - ssim_map(p, g, sp).mean()


def side_components(p, g, bp: BoundaryParams = BoundaryParams()) -> Dict[str, torch.Tensor]:
    return {"bce": bce_loss(p, g), "f1": f1_loss(p, g), "bf1": bf1_loss(p, g, bp)}


def final_components(p, g, sp: SsimParams = SsimParams(), bp: BoundaryParams | None = None) -> Dict[str, torch.Tensor]:
    """BCE + F1 + SSIM; passing ``bp`` adds the BF1 term as well."""
    out = {"bce": bce_loss(p, g), "f1": f1_loss(p, g)}
    if bp is not None:
        out["bf1"] = bf1_loss(p, g, bp)
    out["ssim"] = ssim_loss(p, g, sp)
    return out


def side_loss(p, g, bp: BoundaryParams = BoundaryParams()) -> torch.Tensor:
    return sum(side_components(p, g, bp).values())


def final_loss(p, g, sp: SsimParams = SsimParams()) -> torch.Tensor:
    return sum(final_components(p, g, sp).values())


@dataclass
class LossBreakdown:
    """Per-output loss components (sides first, final last) and their sum."""

    outputs: List[Dict[str, torch.Tensor]] = field(default_factory=list)
    total: torch.Tensor | None = None

    def component_sums(self) -> Dict[str, float]:
        sums = {name: 0.0 for name in COMPONENTS}
        for comps in self.outputs:
            for name, v in comps.items():
                sums[name] += float(v.detach())
        return sums

    def per_output(self) -> List[float]:
        return [float(sum(c.values()).detach()) for c in self.outputs]


def total_loss(outputs, g: torch.Tensor, bp: BoundaryParams = BoundaryParams(),
               sp: SsimParams = SsimParams(), flavor: str = "hybrid",
               final_bf1: bool = False) -> LossBreakdown:
    """Sum of per-output losses over the three side logits and the final logits.

    ``flavor`` selects the objective: ``hybrid`` (side losses on the sides,
    final loss on the final output), ``bce`` (BCE on every output) or
    ``side-all`` (side loss on every output). ``final_bf1`` adds BF1 to the
    hybrid final loss.
    """
    if flavor not in LOSS_FLAVORS:
        raise ConfigError(f"unknown loss flavor {flavor!r}; expected one of {LOSS_FLAVORS}")
    logits = list(outputs)
    if len(logits) != 4:
        raise InputError(f"expected four network outputs, got {len(logits)}")
    probs = []
    for z in logits:
        if z.shape != g.shape:
            raise InputError(f"output shape {tuple(z.shape)} != ground truth shape {tuple(g.shape)}")
        probs.append(torch.sigmoid(z))

    parts = []
    for k, p in enumerate(probs):
        is_final = k == len(probs) - 1
        if flavor == "bce":
            parts.append({"bce": bce_loss(p, g)})
        elif flavor == "side-all" or not is_final:
            parts.append(side_components(p, g, bp))
        else:
            parts.append(final_components(p, g, sp, bp if final_bf1 else None))
    total = sum(sum(c.values()) for c in parts)
    return LossBreakdown(outputs=parts, total=total)
