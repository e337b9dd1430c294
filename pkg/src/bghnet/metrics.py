"""Region and boundary metrics on thresholded binary maps."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, InputError


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


def threshold(p: np.ndarray, t: float = 0.5) -> np.ndarray:
    return (np.asarray(p) >= t).astype(np.uint8)


def _binary(x, name: str) -> np.ndarray:
    x = np.asarray(x)
    if x.ndim != 2:
        raise InputError(f"{name} must be a 2-D map, got shape {x.shape}")
    return (x > 0).astype(np.uint8)


def confusion(pred, gt) -> ConfusionCounts:
    p, g = _binary(pred, "prediction"), _binary(gt, "ground truth")
    if p.shape != g.shape:
        raise InputError(f"prediction shape {p.shape} != ground truth shape {g.shape}")
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & (1 - g)))
    fn = int(np.count_nonzero((1 - p) & g))
    tn = int(p.size - tp - fp - fn)
    return ConfusionCounts(tp, fp, tn, fn)


def miou(c: ConfusionCounts, two_class: bool = False) -> float:
    """Foreground IoU; ``two_class`` averages foreground and background IoU."""
    fg_union = c.tp + c.fp + c.fn
    fg = 1.0 if fg_union == 0 else c.tp / fg_union
    if not two_class:
        return fg
    bg_union = c.tn + c.fp + c.fn
    bg = 1.0 if bg_union == 0 else c.tn / bg_union
    return (fg + bg) / 2


def pa(c: ConfusionCounts) -> float:
    return (c.tp + c.tn) / c.total


def f1_score(c: ConfusionCounts) -> float:
    if c.tp + c.fp + c.fn == 0:
        return 1.0
    if c.tp == 0:
        return 0.0
    precision = c.tp / (c.tp + c.fp)
    recall = c.tp / (c.tp + c.fn)
    return 2 * precision * recall / (precision + recall)


def _pool_same(m: np.ndarray, window: int) -> np.ndarray:
    if window < 1 or window % 2 == 0:
        raise ConfigError(f"window must be odd and >= 1, got {window}")
    if window == 1:
        return m.copy()
    pad = window // 2
    padded = np.pad(m, pad, constant_values=0)
    return sliding_window_view(padded, (window, window)).max(axis=(2, 3))


def hard_boundary(m: np.ndarray, theta: int) -> np.ndarray:
    """Foreground pixels with a background pixel within floor(theta/2)."""
    inv = 1 - m
    return _pool_same(inv, theta) - inv


def bf1_score(pred, gt, theta: int = 3, theta_ext: int = 3) -> float:
    p, g = _binary(pred, "prediction"), _binary(gt, "ground truth")
    if p.shape != g.shape:
        raise InputError(f"prediction shape {p.shape} != ground truth shape {g.shape}")
    pb, gb = hard_boundary(p, theta), hard_boundary(g, theta)
    n_pb, n_gb = int(pb.sum()), int(gb.sum())
    if n_pb == 0 and n_gb == 0:
        return 1.0
    if n_pb == 0 or n_gb == 0:
        return 0.0
    precision = int((pb & _pool_same(gb, theta_ext)).sum()) / n_pb
    recall = int((_pool_same(pb, theta_ext) & gb).sum()) / n_gb
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


@dataclass
class MetricReport:
    theta: int = 3
    theta_primes: Tuple[int, ...] = (3, 5, 7)
    rows: List[Dict[str, float]] = field(default_factory=list)
    ids: List[str] = field(default_factory=list)

    @property
    def columns(self) -> List[str]:
        return ["miou", "pa", "f1"] + [f"bf1_t{t}" for t in self.theta_primes]

    def mean(self) -> Dict[str, float]:
        if not self.rows:
            raise InputError("empty report")
        return {k: float(np.mean([r[k] for r in self.rows])) for k in self.columns}

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["image"] + self.columns)
        for ident, row in zip(self.ids, self.rows):
            w.writerow([ident] + [f"{row[k]:.4f}" for k in self.columns])
        mean = self.mean()
        w.writerow(["MEAN"] + [f"{mean[k]:.4f}" for k in self.columns])
        return buf.getvalue()


def image_metrics(pred, gt, theta: int = 3, theta_primes: Sequence[int] = (3, 5, 7),
                  two_class: bool = False) -> Dict[str, float]:
    c = confusion(pred, gt)
    row = {"miou": miou(c, two_class), "pa": pa(c), "f1": f1_score(c)}
    for t in theta_primes:
        row[f"bf1_t{t}"] = bf1_score(pred, gt, theta, t)
    return row


def evaluate(pairs: Iterable[Tuple[str, np.ndarray, np.ndarray]], theta_primes: Sequence[int] = (3, 5, 7),
             theta: int = 3, two_class: bool = False) -> MetricReport:
    """Metrics for each (identifier, binary prediction, binary ground truth) and their mean."""
    report = MetricReport(theta=theta, theta_primes=tuple(theta_primes))
    for ident, pred, gt in pairs:
        report.ids.append(ident)
        report.rows.append(image_metrics(pred, gt, theta, theta_primes, two_class))
    if not report.rows:
        raise InputError("no predictions to evaluate")
    return report
