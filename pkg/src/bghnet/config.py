"""Run configuration: flat ``key = value`` files with ``#`` comments.

Every key is also exposed as a command-line flag; flags override file
values, which override the defaults below.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any, Dict, Mapping, Tuple

from .backbone import StageConfig
from .errors import ConfigError
from .hfrm import NetworkConfig
from .losses import LOSS_FLAVORS, BoundaryParams, SsimParams
from .trainer import TrainConfig


def _ints(text: str) -> Tuple[int, ...]:
    return tuple(int(v) for v in text.split(",") if v.strip())


def _nested(text: str) -> Tuple[Tuple[int, ...], ...]:
    return tuple(_ints(part) for part in text.split(";"))


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _fmt(value) -> str:
    if isinstance(value, tuple) and value and isinstance(value[0], tuple):
        return ";".join(",".join(str(v) for v in part) for part in value)
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    return "" if value is None else str(value)


_PARSERS = {
    "tuple_int": _ints,
    "nested": _nested,
    "bool": _bool,
    "int": int,
    "float": float,
    "str": str,
    "opt_int": lambda t: None if t.strip() in ("", "none") else int(t),
}


@dataclass
class RunConfig:
    # network
    stage_channels: Tuple[int, ...] = StageConfig().channels
    dilations: Tuple[Tuple[int, ...], ...] = StageConfig().dilations
    batch_norm: bool = True
    decoder_widths: Tuple[int, ...] = NetworkConfig().decoder_widths
    sc_channels: int = NetworkConfig().sc_channels
    sc_groups: int = NetworkConfig().sc_groups
    pool_bins: Tuple[int, ...] = NetworkConfig().pool_bins
    use_grb: bool = True
    # optimization
    batch_size: int = 4
    momentum: float = 0.9
    weight_decay: float = 1e-4
    base_lr: float = 0.01
    power: float = 0.9
    epochs: int = 30
    max_iter: int | None = None
    seed: int = 0
    size: int = 64
    rotate_degrees: float = 0.0
    loss: str = "hybrid"
    final_bf1: bool = False
    # loss parameters
    theta: int = 3
    theta_ext: int = 3
    ssim_window: int = 11
    ssim_sigma: float = 1.5
    ssim_c1: float = 0.01 ** 2
    ssim_c2: float = 0.03 ** 2
    # data
    train_fraction: float = 0.8
    split_seed: int = 0

    @classmethod
    def kinds(cls) -> Dict[str, str]:
        out = {}
        for f in fields(cls):
            t = str(f.type)
            if "Tuple[Tuple" in t:
                out[f.name] = "nested"
            elif "Tuple" in t:
                out[f.name] = "tuple_int"
            elif "None" in t:
                out[f.name] = "opt_int"
            elif t == "bool":
                out[f.name] = "bool"
            elif t == "int":
                out[f.name] = "int"
            elif t == "float":
                out[f.name] = "float"
            else:
                out[f.name] = "str"
        return out

    def updated(self, values: Mapping[str, Any]) -> "RunConfig":
        """Copy with ``values`` applied; string values are parsed by key type."""
        kinds = self.kinds()
        changes = {}
        for key, value in values.items():
            key = key.replace("-", "_")
            if key not in kinds:
                raise ConfigError(f"unknown configuration key {key!r}")
            if isinstance(value, str):
                try:
                    value = _PARSERS[kinds[key]](value)
                except ValueError as exc:
                    raise ConfigError(f"bad value for {key}: {exc}") from exc
            changes[key] = value
        return dataclasses.replace(self, **changes)

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        values = {}
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected key = value, got {raw!r}")
            key, value = (part.strip() for part in line.split("=", 1))
            values[key] = value
        return cls().updated(values)

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_text(text)

    def to_text(self) -> str:
        return "".join(f"{f.name} = {_fmt(getattr(self, f.name))}\n" for f in fields(self))

    def network_config(self) -> NetworkConfig:
        stage = StageConfig(channels=tuple(self.stage_channels), dilations=tuple(self.dilations),
                            batch_norm=self.batch_norm)
        return NetworkConfig(stage=stage, decoder_widths=tuple(self.decoder_widths),
                             sc_channels=self.sc_channels, sc_groups=self.sc_groups,
                             pool_bins=tuple(self.pool_bins), use_grb=self.use_grb)

    def train_config(self) -> TrainConfig:
        if self.loss not in LOSS_FLAVORS:
            raise ConfigError(f"loss must be one of {LOSS_FLAVORS}, got {self.loss!r}")
        return TrainConfig(
            batch_size=self.batch_size, momentum=self.momentum, weight_decay=self.weight_decay,
            base_lr=self.base_lr, power=self.power, epochs=self.epochs, max_iter=self.max_iter,
            seed=self.seed, size=self.size, rotate_degrees=self.rotate_degrees, loss=self.loss,
            final_bf1=self.final_bf1, boundary=BoundaryParams(self.theta, self.theta_ext),
            ssim=SsimParams(self.ssim_window, self.ssim_sigma, self.ssim_c1, self.ssim_c2))
