"""SGD with momentum and weight decay under the poly learning-rate policy."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Sequence

import numpy as np
import torch
import torch.nn as nn

from .dataio import Sample, augment_rotate, preprocess_train, to_batch
from .errors import ConfigError, InputError, NumericError
from .losses import COMPONENTS, BoundaryParams, SsimParams, total_loss

log = logging.getLogger(__name__)

CURVE_HEADER = ("iter", "lr", "bce", "f1", "bf1", "ssim", "total")


@dataclass
class TrainConfig:
    batch_size: int = 4
    momentum: float = 0.9
    weight_decay: float = 1e-4
    base_lr: float = 0.01
    power: float = 0.9
    epochs: int = 30
    max_iter: int | None = None  # defaults to epochs * batches per epoch
    seed: int = 0
    size: int = 64
    rotate_degrees: float = 0.0
    loss: str = "hybrid"
    final_bf1: bool = False
    boundary: BoundaryParams = field(default_factory=BoundaryParams)
    ssim: SsimParams = field(default_factory=SsimParams)

    def __post_init__(self):
        if not 0 <= self.momentum < 1:
            raise ConfigError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.base_lr < 0:
            raise ConfigError(f"learning rate must be >= 0, got {self.base_lr}")
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigError("batch_size and epochs must be >= 1")
        if self.max_iter is not None and self.max_iter < 1:
            raise ConfigError(f"max_iter must be >= 1, got {self.max_iter}")


def poly_lr(it: int, max_iter: int, base: float = 0.01, power: float = 0.9) -> float:
    if not 0 <= it <= max_iter:
        raise InputError(f"iteration {it} outside [0, {max_iter}]")
    return base * (1 - it / max_iter) ** power


def sgd_step(params: Sequence[torch.Tensor], grads: Sequence[torch.Tensor | None],
             velocities: Sequence[torch.Tensor], lr: float, momentum: float,
             weight_decay: float | Sequence[float]) -> None:
    """In-place update: v <- m*v + (g + wd*p); p <- p - lr*v.

    ``weight_decay`` may be given per parameter (0 for norms and biases).
    """
    if not len(params) == len(grads) == len(velocities):
        raise ConfigError("params, grads and velocities differ in length")
    if isinstance(weight_decay, (int, float)):
        weight_decay = [float(weight_decay)] * len(params)
    with torch.no_grad():
        for p, g, v, wd in zip(params, grads, velocities, weight_decay):
            if g is None:
                continue
            if g.shape != p.shape or v.shape != p.shape:
                raise ConfigError(f"shape mismatch in sgd_step: {tuple(p.shape)} vs {tuple(g.shape)}")
            d = g + wd * p if wd else g
            v.mul_(momentum).add_(d)
            p.sub_(lr * v)


def decay_mask(model: nn.Module) -> List[bool]:
    """True for parameters that receive weight decay (conv weights only)."""
    norm_params = set()
    for m in model.modules():
        if isinstance(m, nn.modules.batchnorm._BatchNorm):
            norm_params.update(id(p) for p in m.parameters(recurse=False))
    return [p.dim() > 1 and id(p) not in norm_params for p in model.parameters()]


@dataclass
class TrainResult:
    curve: List[Dict[str, float]]
    max_iter: int

    def epoch_means(self, batches_per_epoch: int) -> List[float]:
        totals = [row["total"] for row in self.curve]
        return [float(np.mean(totals[i:i + batches_per_epoch]))
                for i in range(0, len(totals), batches_per_epoch)]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(CURVE_HEADER)
            for row in self.curve:
                w.writerow([row["iter"]] + [repr(float(row[k])) for k in CURVE_HEADER[1:]])


def _batches(samples: Sequence[Sample], cfg: TrainConfig, rng: np.random.Generator):
    order = rng.permutation(len(samples))
    for start in range(0, len(order), cfg.batch_size):
        chosen = []
        for i in order[start:start + cfg.batch_size]:
            s = preprocess_train(samples[i], cfg.size, rng)
            chosen.append(augment_rotate(s, cfg.rotate_degrees, rng))
        yield to_batch(chosen)


def train(model: nn.Module, samples: Sequence[Sample], cfg: TrainConfig,
          progress=None) -> TrainResult:
    """Train ``model`` in place on ``samples``; returns the per-iteration curve."""
    if len(samples) == 0:
        raise InputError("training set is empty")
    batches_per_epoch = math.ceil(len(samples) / cfg.batch_size)
    max_iter = cfg.max_iter or cfg.epochs * batches_per_epoch
    rng = np.random.default_rng(cfg.seed)

    params = list(model.parameters())
    decays = [cfg.weight_decay if d else 0.0 for d in decay_mask(model)]
    velocities = [torch.zeros_like(p) for p in params]
    curve = []
    it = 0
    model.train()
    while it < max_iter:
        for images, masks in _batches(samples, cfg, rng):
            if it >= max_iter:
                break
            lr = poly_lr(it, max_iter, cfg.base_lr, cfg.power)
            breakdown = total_loss(model(images), masks, cfg.boundary, cfg.ssim,
                                   flavor=cfg.loss, final_bf1=cfg.final_bf1)
            comps = breakdown.component_sums()
            if not math.isfinite(float(breakdown.total.detach())):
                bad = [k for k, v in comps.items() if not math.isfinite(v)]
                raise NumericError(f"non-finite loss at iteration {it}: components {bad or ['total']}")
            for p in params:
                p.grad = None
            breakdown.total.backward()
            sgd_step(params, [p.grad for p in params], velocities, lr, cfg.momentum, decays)
            row = {"iter": it, "lr": lr, **{k: comps[k] for k in COMPONENTS},
                   "total": float(breakdown.total.detach())}
            curve.append(row)
            if progress is not None:
                progress(row)
            it += 1
    model.eval()
    return TrainResult(curve=curve, max_iter=max_iter)
