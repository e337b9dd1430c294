"""Parameter and FLOP accounting.

FLOPs are counted as 2 x multiply-accumulates of convolutions (the model
has no dense layers); normalization, activations, pooling and
interpolation are not counted.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from .backbone import backbone_param_count
from .hfrm import BGHNet, NetworkConfig, count_parameters

REFERENCE_PARAMS = 15.45e6
REFERENCE_GFLOPS = 11.22


@dataclass
class BenchReport:
    size: int
    params: int
    analytic_params: int
    flops: int
    global_flops: int  # convs applied to 1x1 pooled maps; constant in image size

    @property
    def gflops(self) -> float:
        return self.flops / 1e9

    @property
    def spatial_flops(self) -> int:
        return self.flops - self.global_flops

    def lines(self):
        dp = (self.params - REFERENCE_PARAMS) / REFERENCE_PARAMS
        df = (self.gflops - REFERENCE_GFLOPS) / REFERENCE_GFLOPS
        return [
            f"input size        : {self.size}x{self.size}",
            f"parameters        : {self.params} ({self.params / 1e6:.2f}M)",
            f"analytic params   : {self.analytic_params}",
            f"GFLOPs (2xMAC)    : {self.gflops:.2f}",
            f"reference params  : {REFERENCE_PARAMS / 1e6:.2f}M (deviation {dp:+.1%})",
            f"reference GFLOPs  : {REFERENCE_GFLOPS:.2f} (deviation {df:+.1%})",
        ]


def conv_flops(model: nn.Module, size: int, batch: int = 1):
    """Run one forward at ``size`` x ``size`` and count convolution FLOPs.

    Returns (total, global) where ``global`` covers convs whose output is 1x1.
    """
    total = 0
    glob = 0

    def hook(mod: nn.Conv2d, inp, out):
        nonlocal total, glob
        k = mod.in_channels // mod.groups * mod.kernel_size[0] * mod.kernel_size[1]
        f = 2 * out.numel() * k
        total += f
        if out.shape[2] * out.shape[3] == 1:
            glob += f

    handles = [m.register_forward_hook(hook) for m in model.modules() if isinstance(m, nn.Conv2d)]
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            model(torch.zeros(batch, model.cfg.stage.in_channels, size, size))
    finally:
        for h in handles:
            h.remove()
        model.train(was_training)
    return total // batch, glob // batch


def analytic_param_count(cfg: NetworkConfig) -> int:
    """Closed-form parameter count, summed layer by layer from the config."""
    c = cfg.stage.channels
    w = cfg.decoder_widths
    bn = cfg.stage.batch_norm
    total = backbone_param_count(cfg.stage)
    if cfg.use_grb:
        total += sum(ch * ch + ch for ch in c)  # GRB 1x1 convs
    n_branches = 2 + len(cfg.pool_bins)
    sc_in = n_branches * c[3]
    total += sc_in // cfg.sc_groups * cfg.sc_channels + cfg.sc_channels
    for level, width in enumerate(w, start=1):
        out = width * 4 ** (level - 1)
        total += cfg.sc_channels * out * 9 + out
    for k in range(4):
        cin = (w[k - 1] if k else 0) + w[k] + c[3 - k]
        out = 4 * w[k]
        total += cin * out * 9 + (2 * out if bn else out)
    total += sum(w[k] + 1 for k in range(4))  # three side heads + final head
    return total


def bench(cfg: NetworkConfig | None = None, size: int = 512) -> BenchReport:
    cfg = cfg or NetworkConfig()
    model = BGHNet(cfg)
    flops, glob = conv_flops(model, size)
    return BenchReport(size=size, params=count_parameters(model),
                       analytic_params=analytic_param_count(cfg), flops=flops, global_flops=glob)
