"""Finite-difference gradient suites for losses, blocks and the full model.

All checks run in float64 with central differences. ReLU and max pooling
are only piecewise differentiable. Soft maps fed to the boundary loss are
drawn at generic points, where every pooling window has its two largest
entries further apart than the finite-difference reach. Network blocks are
differenced with their gates frozen at the reference point (see
``FrozenGates``), since with hundreds of ReLUs no input avoids every kink.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, List, Sequence

import numpy as np
import torch
import torch.nn as nn
from numpy.lib.stride_tricks import sliding_window_view

from .backbone import DSSnbt, SSnbt
from .cfem import CGM, GRB
from .hfrm import FFAB, BGHNet, NetworkConfig, SideHead
from .losses import (BoundaryParams, SsimParams, bce_loss, bf1_loss, f1_loss, final_loss,
                     side_loss, ssim_loss, total_loss)
from .tensors import (ConvSpec, adaptive_avg_pool, bilinear_upsample, channel_shuffle, conv2d,
                      finite_diff_check, global_avg_pool, max_pool_same, pixel_shuffle)

SUITES = ("losses", "blocks", "end2end")
H_STEP = 1e-3


@dataclass
class CheckResult:
    name: str
    error: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.error <= self.tol


def _top_gap(m: np.ndarray, window: int) -> float:
    """Smallest gap between the two largest values over all zero-padded windows."""
    if window == 1:
        return np.inf
    pad = window // 2
    win = sliding_window_view(np.pad(m, pad), (window, window)).reshape(*m.shape, -1)
    top2 = np.sort(win, axis=-1)[..., -2:]
    return float((top2[..., 1] - top2[..., 0]).min())


def pooling_margin(p: np.ndarray, bp: BoundaryParams) -> float:
    """Distance (in value) of soft map ``p`` from the nearest pooling tie."""
    gaps = []
    for m in (1 - p, p):  # foreground and background class maps
        gaps.append(_top_gap(m, bp.theta))
        pooled = sliding_window_view(np.pad(m, bp.theta // 2), (bp.theta, bp.theta)).max(axis=(2, 3))
        b = pooled - m
        gaps.append(_top_gap(b, bp.theta_ext) / 2)  # one pixel moves a boundary value by <= 2x
    return min(gaps)


def generic_soft_map(shape, rng: np.random.Generator, bp: BoundaryParams = BoundaryParams(),
                     margin: float = 4 * H_STEP, lo: float = 0.1, hi: float = 0.9,
                     max_tries: int = 100_000) -> np.ndarray:
    """Uniform soft map in [lo, hi] at least ``margin`` away from pooling ties."""
    for _ in range(max_tries):
        p = rng.uniform(lo, hi, size=shape)
        if pooling_margin(p, bp) > margin:
            return p
    raise RuntimeError(f"no tie-free soft map of shape {shape} found in {max_tries} draws")


def _soft_pair(rng, size=8, bp=BoundaryParams(), tie_free=True):
    p = generic_soft_map((size, size), rng, bp) if tie_free else rng.uniform(0.1, 0.9, (size, size))
    g = np.zeros((size, size))
    while g.sum() in (0, g.size):
        g = (rng.random((size, size)) < 0.5).astype(np.float64)
    as_t = lambda a: torch.tensor(a, dtype=torch.float64).view(1, 1, size, size)
    return as_t(p), as_t(g)


def _linear_functional(op: Callable, x: torch.Tensor, gen: torch.Generator) -> Callable:
    with torch.no_grad():
        out_shape = op(x).shape
    r = torch.randn(out_shape, generator=gen, dtype=torch.float64)
    return lambda t: (op(t) * r).sum()


def loss_checks(seed: int = 0, tol: float = 1e-3) -> List[CheckResult]:
    rng = np.random.default_rng(seed)
    bp = BoundaryParams(3, 3)
    sp_small = SsimParams(window=7)
    p, g = _soft_pair(rng, 8, bp)
    p16, g16 = _soft_pair(rng, 16, bp, tie_free=False)  # SSIM has no pooling
    cases = [
        ("bce_loss 8x8", lambda t: bce_loss(t, g), p),
        ("f1_loss 8x8", lambda t: f1_loss(t, g), p),
        ("bf1_loss 8x8", lambda t: bf1_loss(t, g, bp), p),
        ("ssim_loss 8x8 (window 7)", lambda t: ssim_loss(t, g, sp_small), p),
        ("ssim_loss 16x16 (window 11)", lambda t: ssim_loss(t, g16), p16),
        ("side_loss 8x8", lambda t: side_loss(t, g, bp), p),
        ("final_loss 8x8 (window 7)", lambda t: final_loss(t, g, sp_small), p),
    ]
    # total loss over four logit maps at generic sigmoid points
    maps = [_soft_pair(rng, 8, bp)[0] for _ in range(4)]
    logits = torch.logit(torch.cat(maps, dim=0))

    def total_of(z):
        return total_loss(list(z.split(1, dim=0)), g, bp, sp_small).total

    cases.append(("total_loss 4 outputs 8x8 (wrt logits)", total_of, logits))
    return [CheckResult(name, finite_diff_check(f, x, H_STEP), tol) for name, f, x in cases]


def block_checks(seed: int = 0, tol: float = 1e-3) -> List[CheckResult]:
    torch.manual_seed(seed)
    gen = torch.Generator().manual_seed(seed)
    d = torch.float64

    def rand(*shape):
        return torch.randn(*shape, generator=gen, dtype=d)

    spec = ConvSpec(2, 4, (3, 3), stride=1, padding=(1, 1), dilation=2, groups=2)
    w, b = rand(*spec.weight_shape), rand(4)
    x5 = rand(1, 2, 5, 5)
    ss = SSnbt(8, dilation=2).to(d)
    dss = DSSnbt(4, 8).to(d)
    grb = GRB(6).to(d)
    cgm = CGM(8, 8, (4, 4, 4, 4), groups=4).to(d)
    grb8 = GRB(8).to(d)
    ffab = FFAB(4 + 4 + 6, 4).to(d)
    head = SideHead(4).to(d)
    coarse, guide = rand(1, 4, 4, 4), rand(1, 4, 4, 4)

    cases = [
        ("conv2d wrt x", lambda t: conv2d(t, w, b, spec), x5),
        ("conv2d wrt w", lambda t: conv2d(x5, t, b, spec), w),
        ("max_pool_same 3", lambda t: max_pool_same(t, 3), rand(1, 2, 5, 5)),
        ("adaptive_avg_pool 5x5->2x3", lambda t: adaptive_avg_pool(t, 2, 3), rand(1, 2, 5, 5)),
        ("global_avg_pool", global_avg_pool, rand(1, 3, 4, 4)),
        ("pixel_shuffle 2", lambda t: pixel_shuffle(t, 2), rand(1, 8, 3, 3)),
        ("channel_shuffle 2", lambda t: channel_shuffle(t, 2), rand(1, 8, 3, 3)),
        ("bilinear_upsample 3->7", lambda t: bilinear_upsample(t, 7, 7), rand(1, 2, 3, 3)),
        ("ss_nbt", ss, rand(2, 8, 6, 6)),
        ("dss_nbt", dss, rand(2, 4, 8, 8)),
        ("grb", grb, rand(1, 6, 4, 4)),
        ("cgm 1x8x4x4", lambda t: torch.cat([gm.flatten() for gm in cgm(t, grb8(t))]), rand(1, 8, 4, 4)),
        ("ffab", lambda t: ffab(coarse, guide, t), rand(1, 6, 4, 4)),
        ("side_head", lambda t: head(t, 8, 8), rand(1, 4, 4, 4)),
    ]
    modules = [ss, dss, ffab]
    results = []
    for name, op, x in cases:
        f = _linear_functional(op, x, gen)
        with FrozenGates(modules, lambda: op(x)):
            results.append(CheckResult(name, finite_diff_check(f, x, H_STEP), tol))
    return results


class FrozenGates:
    """Hold every ReLU mask and max-pool argmax inside ``modules`` at their values for a reference call.

    Inside the context the network is the smooth function that agrees with
    the real one on the linear piece containing the reference point, so
    central differences there no longer straddle kinks. Gradients at the
    reference point are unchanged.
    """

    def __init__(self, modules: Sequence[nn.Module], reference: Callable[[], object]):
        self.gates = {}
        hooks = []
        for m in (sub for mod in modules for sub in mod.modules()):
            if isinstance(m, nn.ReLU):
                hooks.append(m.register_forward_hook(self._record_relu))
            elif isinstance(m, nn.MaxPool2d):
                hooks.append(m.register_forward_hook(self._record_pool))
        try:
            with torch.no_grad():
                reference()
        finally:
            for h in hooks:
                h.remove()
        self._hooks = []

    def _record_relu(self, m, inp, _out):
        self.gates[m] = (inp[0] > 0).to(inp[0].dtype)

    def _record_pool(self, m, inp, _out):
        _, idx = torch.nn.functional.max_pool2d(inp[0], m.kernel_size, m.stride, m.padding,
                                                dilation=m.dilation, return_indices=True)
        self.gates[m] = idx

    def _apply(self, m, inp, out):
        gate = self.gates[m]
        if isinstance(m, nn.ReLU):
            return inp[0] * gate
        idx = gate.expand(inp[0].shape[0], *gate.shape[1:])
        return inp[0].flatten(2).gather(2, idx.flatten(2)).view_as(out)

    def __enter__(self):
        self._hooks = [m.register_forward_hook(self._apply) for m in self.gates]
        return self

    def __exit__(self, *exc):
        for h in self._hooks:
            h.remove()
        self._hooks = []


def randomize_norm_stats(model: nn.Module, gen: torch.Generator) -> None:
    """Non-trivial running statistics and affine terms so eval-mode BN is exercised."""
    with torch.no_grad():
        for m in model.modules():
            if isinstance(m, nn.BatchNorm2d):
                n = m.num_features
                m.running_mean.copy_(0.1 * torch.randn(n, generator=gen, dtype=m.running_mean.dtype))
                m.running_var.uniform_(0.5, 2.0, generator=gen)
                m.weight.uniform_(0.5, 1.5, generator=gen)
                m.bias.normal_(0.0, 0.1, generator=gen)


def end2end_checks(seed: int = 0, tol: float = 1e-3) -> List[CheckResult]:
    """Total loss through the tiny model, gradient w.r.t. the input image.

    Normalization runs on (randomized) running statistics: batch statistics
    over a single 32x32 image reduce the deepest stage to 2x2 maps, where the
    loss varies by O(1) across one finite-difference step.
    """
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    gen = torch.Generator().manual_seed(seed)
    model = BGHNet(NetworkConfig.tiny()).double()
    randomize_norm_stats(model, gen)
    model.eval()
    image = torch.tensor(rng.random((1, 3, 32, 32)), dtype=torch.float64)
    yy, xx = np.mgrid[0:32, 0:32]
    g = torch.tensor(((yy - 15.5) ** 2 / 100 + (xx - 13.5) ** 2 / 64 <= 1).astype(np.float64)).view(1, 1, 32, 32)

    def f(t):
        return total_loss(model(t), g).total

    with FrozenGates([model], lambda: model(image)):
        err = finite_diff_check(f, image, H_STEP)
    return [CheckResult("total_loss through tiny BGHNet (wrt image)", err, tol)]


def run_suite(target: str, seed: int = 0, tol: float = 1e-3) -> List[CheckResult]:
    if target == "losses":
        return loss_checks(seed, tol)
    if target == "blocks":
        return block_checks(seed, tol)
    if target == "end2end":
        return end2end_checks(seed, tol)
    raise ValueError(f"unknown gradcheck target {target!r}; expected one of {SUITES}")


def format_table(results: List[CheckResult]) -> str:
    width = max(len(r.name) for r in results)
    lines = [f"{'check'.ljust(width)}  {'max rel err':>12}  {'tol':>8}  result"]
    for r in results:
        lines.append(f"{r.name.ljust(width)}  {r.error:12.3e}  {r.tol:8.1e}  {'PASS' if r.passed else 'FAIL'}")
    return "\n".join(lines)
