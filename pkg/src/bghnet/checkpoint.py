"""Versioned binary model container.

Layout (little endian)::

    b"BGHN" | version u32 | tensor count u32
    per tensor: name length u16 | name utf-8 | dtype u8 (0 = f32) | rank u8 | extents u32 * rank | values

Architecture settings travel alongside the weights as ``meta.*`` tensors.
"""
from __future__ import annotations

import struct
from collections import OrderedDict
from pathlib import Path
from typing import Dict, Mapping, Tuple

import numpy as np
import torch

from .backbone import StageConfig
from .errors import InputError
from .hfrm import BGHNet, NetworkConfig

MAGIC = b"BGHN"
VERSION = 1
DTYPE_F32 = 0


def write_tensors(tensors: Mapping[str, np.ndarray], path) -> None:
    parts = [struct.pack("<4sII", MAGIC, VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f4")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<BB", DTYPE_F32, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes(order="C"))
    Path(path).write_bytes(b"".join(parts))


def read_tensors(path) -> "OrderedDict[str, np.ndarray]":
    buf = Path(path).read_bytes()
    if len(buf) < 12:
        raise InputError(f"{path}: truncated model file")
    magic, version, count = struct.unpack_from("<4sII", buf, 0)
    if magic != MAGIC:
        raise InputError(f"{path}: not a BGHN model file (magic {magic!r})")
    if version != VERSION:
        raise InputError(f"{path}: unsupported model format version {version}")
    off = 12
    out: "OrderedDict[str, np.ndarray]" = OrderedDict()
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<H", buf, off)
            off += 2
            if off + n > len(buf):
                raise struct.error("name runs past end of file")
            name = buf[off:off + n].decode("utf-8")
            off += n
            dtype, rank = struct.unpack_from("<BB", buf, off)
            off += 2
            if dtype != DTYPE_F32:
                raise InputError(f"{path}: tensor {name!r} has unknown dtype tag {dtype}")
            shape = struct.unpack_from(f"<{rank}I", buf, off)
            off += 4 * rank
            size = int(np.prod(shape)) if rank else 1
            if off + 4 * size > len(buf):
                raise struct.error("values run past end of file")
            arr = np.frombuffer(buf, dtype="<f4", count=size, offset=off).reshape(shape)
            off += 4 * size
            out[name] = arr.astype(np.float32)
    except struct.error as exc:
        raise InputError(f"{path}: truncated model file") from exc
    if off != len(buf):
        raise InputError(f"{path}: {len(buf) - off} trailing bytes")
    return out


def _config_meta(cfg: NetworkConfig) -> Dict[str, np.ndarray]:
    st = cfg.stage
    return {
        "meta.stage_channels": np.array(st.channels),
        "meta.dilation_counts": np.array([len(d) for d in st.dilations]),
        "meta.dilations": np.array([d for rates in st.dilations for d in rates]),
        "meta.batch_norm": np.array([float(st.batch_norm)]),
        "meta.in_channels": np.array([st.in_channels]),
        "meta.decoder_widths": np.array(cfg.decoder_widths),
        "meta.sc_channels": np.array([cfg.sc_channels]),
        "meta.sc_groups": np.array([cfg.sc_groups]),
        "meta.pool_bins": np.array(cfg.pool_bins),
        "meta.use_grb": np.array([float(cfg.use_grb)]),
    }


def _config_from_meta(meta: Mapping[str, np.ndarray]) -> NetworkConfig:
    def ints(key):
        return tuple(int(v) for v in meta[key].reshape(-1))

    counts = ints("meta.dilation_counts")
    flat = ints("meta.dilations")
    dilations, i = [], 0
    for c in counts:
        dilations.append(flat[i:i + c])
        i += c
    stage = StageConfig(channels=ints("meta.stage_channels"), dilations=tuple(dilations),
                        batch_norm=bool(meta["meta.batch_norm"][0]), in_channels=ints("meta.in_channels")[0])
    return NetworkConfig(stage=stage, decoder_widths=ints("meta.decoder_widths"),
                         sc_channels=ints("meta.sc_channels")[0], sc_groups=ints("meta.sc_groups")[0],
                         pool_bins=ints("meta.pool_bins"), use_grb=bool(meta["meta.use_grb"][0]))


def save_model(model: BGHNet, path, input_size: int | None = None) -> None:
    tensors: "OrderedDict[str, np.ndarray]" = OrderedDict()
    for key, arr in _config_meta(model.cfg).items():
        tensors[key] = arr
    if input_size is not None:
        tensors["meta.input_size"] = np.array([input_size])
    for name, t in model.state_dict().items():
        if name.endswith("num_batches_tracked"):
            continue
        tensors[name] = t.detach().cpu().numpy()
    write_tensors(tensors, path)


def load_model(path) -> Tuple[BGHNet, Dict[str, int]]:
    """Rebuild the model stored at ``path``; returns (model in eval mode, extras)."""
    tensors = read_tensors(path)
    meta = {k: v for k, v in tensors.items() if k.startswith("meta.")}
    try:
        cfg = _config_from_meta(meta)
    except KeyError as exc:
        raise InputError(f"{path}: missing architecture entry {exc}") from exc
    model = BGHNet(cfg)
    state = model.state_dict()
    weights = {k: v for k, v in tensors.items() if not k.startswith("meta.")}
    expected = {k for k in state if not k.endswith("num_batches_tracked")}
    if set(weights) != expected:
        missing = sorted(expected - set(weights))[:3]
        extra = sorted(set(weights) - expected)[:3]
        raise InputError(f"{path}: weights do not match architecture (missing {missing}, unexpected {extra})")
    for k, arr in weights.items():
        if tuple(state[k].shape) != arr.shape:
            raise InputError(f"{path}: {k} has shape {arr.shape}, model expects {tuple(state[k].shape)}")
        state[k] = torch.from_numpy(arr.copy())
    model.load_state_dict(state)
    model.eval()
    extras = {}
    if "meta.input_size" in meta:
        extras["input_size"] = int(meta["meta.input_size"][0])
    return model, extras
