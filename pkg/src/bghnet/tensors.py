"""Differentiable array primitives used by the network and the losses.

Everything operates on rank-4 ``torch.Tensor`` objects laid out as
(batch, channels, height, width); autograd supplies the backward passes.
The functions here add the shape contracts the rest of the package relies
on (zero-padded "same" max pooling, partitioning adaptive pooling, ...)
and a central-difference gradient checker.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Tuple

import torch
import torch.nn.functional as F

from .errors import ConfigError, InputError


def _check_rank4(x: torch.Tensor, name: str = "x") -> None:
    if x.dim() != 4:
        raise InputError(f"{name} must be rank 4 (N, C, H, W), got shape {tuple(x.shape)}")


@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel: Tuple[int, int] = (3, 3)
    stride: int = 1
    padding: Tuple[int, int] = (0, 0)
    dilation: int = 1
    groups: int = 1

    def __post_init__(self):
        if self.groups < 1 or self.in_channels % self.groups or self.out_channels % self.groups:
            raise ConfigError(
                f"channels ({self.in_channels} -> {self.out_channels}) not divisible by groups={self.groups}"
            )
        if self.dilation < 1:
            raise ConfigError(f"dilation must be >= 1, got {self.dilation}")
        if self.stride < 1:
            raise ConfigError(f"stride must be >= 1, got {self.stride}")

    @property
    def weight_shape(self) -> Tuple[int, int, int, int]:
        return (self.out_channels, self.in_channels // self.groups, *self.kernel)

    def output_extent(self, h: int, w: int) -> Tuple[int, int]:
        out = []
        for size, k, pad in zip((h, w), self.kernel, self.padding):
            out.append((size + 2 * pad - self.dilation * (k - 1) - 1) // self.stride + 1)
        return out[0], out[1]


def conv2d(x: torch.Tensor, w: torch.Tensor, b: torch.Tensor | None, spec: ConvSpec) -> torch.Tensor:
    _check_rank4(x)
    if tuple(w.shape) != spec.weight_shape:
        raise ConfigError(f"weight shape {tuple(w.shape)} does not match {spec.weight_shape}")
    if x.shape[1] != spec.in_channels:
        raise ConfigError(f"input has {x.shape[1]} channels, spec expects {spec.in_channels}")
    if b is not None and tuple(b.shape) != (spec.out_channels,):
        raise ConfigError(f"bias shape {tuple(b.shape)} does not match ({spec.out_channels},)")
    oh, ow = spec.output_extent(x.shape[2], x.shape[3])
    if oh < 1 or ow < 1:
        raise ConfigError(f"input {tuple(x.shape[2:])} too small for {spec}")
    return F.conv2d(x, w, b, stride=spec.stride, padding=spec.padding,
                    dilation=spec.dilation, groups=spec.groups)


def max_pool_same(x: torch.Tensor, window: int) -> torch.Tensor:
    """Stride-1 max pooling whose out-of-image positions count as zero.

    The output has the input's shape. Ties route the gradient to the first
    maximal element in scan order.
    """
    _check_rank4(x)
    if window < 1 or window % 2 == 0:
        raise ConfigError(f"pooling window must be odd and >= 1, got {window}")
    if window == 1:
        return x
    pad = window // 2
    return F.max_pool2d(F.pad(x, (pad, pad, pad, pad), value=0.0), window, stride=1)


def _bin_matrix(n_in: int, n_out: int, like: torch.Tensor) -> torch.Tensor:
    m = torch.zeros(n_out, n_in, dtype=like.dtype, device=like.device)
    for i in range(n_out):
        lo, hi = (i * n_in) // n_out, ((i + 1) * n_in) // n_out
        m[i, lo:hi] = 1.0 / (hi - lo)
    return m


def adaptive_avg_pool(x: torch.Tensor, out_h: int, out_w: int) -> torch.Tensor:
    """Mean over contiguous bins [floor(i*H/out), floor((i+1)*H/out)).

    Unlike ``torch.nn.functional.adaptive_avg_pool2d`` the bins never
    overlap; they partition the input.
    """
    _check_rank4(x)
    h, w = x.shape[2], x.shape[3]
    if out_h < 1 or out_w < 1:
        raise ConfigError(f"output extent must be positive, got {out_h}x{out_w}")
    if out_h > h or out_w > w:
        raise ConfigError(f"cannot pool {h}x{w} up to {out_h}x{out_w}")
    mh = _bin_matrix(h, out_h, x)
    mw = _bin_matrix(w, out_w, x)
    return torch.einsum("ih,nchw,jw->ncij", mh, x, mw)


def global_avg_pool(x: torch.Tensor) -> torch.Tensor:
    _check_rank4(x)
    return x.mean(dim=(2, 3), keepdim=True)


def pixel_shuffle(x: torch.Tensor, r: int) -> torch.Tensor:
    """out[n, c, h*r+dh, w*r+dw] = x[n, c*r*r + dh*r + dw, h, w]."""
    _check_rank4(x)
    if r < 1 or x.shape[1] % (r * r):
        raise ConfigError(f"{x.shape[1]} channels not divisible by r^2 = {r * r}")
    if r == 1:
        return x
    return F.pixel_shuffle(x, r)


def channel_shuffle(x: torch.Tensor, groups: int) -> torch.Tensor:
    _check_rank4(x)
    n, c, h, w = x.shape
    if groups < 1 or c % groups:
        raise ConfigError(f"{c} channels not divisible by groups={groups}")
    if groups == 1:
        return x
    return x.view(n, groups, c // groups, h, w).transpose(1, 2).reshape(n, c, h, w)


def _interp_axis(x: torch.Tensor, dim: int, n_out: int) -> torch.Tensor:
    """Linear interpolation along ``dim`` with half-pixel (align_corners=False) sampling."""
    n_in = x.shape[dim]
    src = (torch.arange(n_out, dtype=torch.float64) + 0.5) * (n_in / n_out) - 0.5
    src = src.clamp(min=0.0)
    i0 = src.floor().long().clamp(max=n_in - 1)
    i1 = (i0 + 1).clamp(max=n_in - 1)
    lam = (src - i0).to(x.dtype)
    shape = [1] * x.dim()
    shape[dim] = n_out
    a = x.index_select(dim, i0.to(x.device))
    b = x.index_select(dim, i1.to(x.device))
    # a + lam * (b - a) reproduces equal neighbours exactly
    return a + lam.to(x.device).view(shape) * (b - a)


def bilinear_upsample(x: torch.Tensor, out_h: int, out_w: int) -> torch.Tensor:
    """Separable bilinear enlargement, align_corners=False convention."""
    _check_rank4(x)
    h, w = x.shape[2], x.shape[3]
    if out_h < h or out_w < w:
        raise ConfigError(f"bilinear_upsample cannot shrink {h}x{w} to {out_h}x{out_w}")
    if out_h != h:
        x = _interp_axis(x, 2, out_h)
    if out_w != w:
        x = _interp_axis(x, 3, out_w)
    return x


def finite_diff_check(f: Callable[[torch.Tensor], torch.Tensor], x: torch.Tensor,
                      h: float = 1e-3) -> float:
    """Max relative error between autograd and central differences of ``f`` at ``x``.

    The relative error of a coordinate is
    ``|analytic - cd| / max(|analytic|, |cd|, 1e-8)``. Run in float64.
    """
    x = x.detach().clone().requires_grad_(True)
    y = f(x)
    if y.numel() != 1:
        raise ConfigError(f"finite_diff_check needs a scalar function, got shape {tuple(y.shape)}")
    (analytic,) = torch.autograd.grad(y, x)
    analytic = analytic.detach().reshape(-1)

    base = x.detach().clone()
    flat = base.view(-1)
    numeric = torch.empty_like(analytic)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + h
            fp = f(base).item()
            flat[i] = orig - h
            fm = f(base).item()
            flat[i] = orig
            numeric[i] = (fp - fm) / (2 * h)

    denom = torch.maximum(torch.maximum(analytic.abs(), numeric.abs()),
                          torch.full_like(analytic, 1e-8))
    return ((analytic - numeric).abs() / denom).max().item()
