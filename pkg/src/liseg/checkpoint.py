"""Binary checkpoint format for network parameters and optimizer state.

Layout (all integers little-endian)::

    magic      8 bytes  b"LISEGCKP"
    version    u32
    name       u32 length + utf-8 bytes (config name)
    depths     6 x u32
    widths     6 x u32
    classes    u32
    in_ch      u32
    seed       i64      (-1 when unknown)
    count      u32      number of tensors
    then per tensor, in sorted name order:
        u32 name length, name bytes, u32 rank, rank x u32 dims, raw <f8 values (row-major)

A JSON manifest with the same metadata is written next to the file (``<path>.json``).
Optimizer sidecars reuse the record layout with ``m/<name>`` and ``v/<name>`` tensors.
"""
from __future__ import annotations

import io
import json
import os
import struct

import numpy as np

from .autodiff import AdamState, Tensor
from .stunet import ModelScaleConfig, NetworkParams, layer_plan

MAGIC = b"LISEGCKP"
OPT_MAGIC = b"LISEGOPT"
FORMAT_VERSION = 1


def _write_records(fh, arrays: dict):
    fh.write(struct.pack("<I", len(arrays)))
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name], dtype="<f8")
        raw = name.encode()
        fh.write(struct.pack("<I", len(raw)) + raw)
        fh.write(struct.pack("<I", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(arr.tobytes())


def _read_exact(fh, n):
    b = fh.read(n)
    if len(b) != n:
        raise ValueError("truncated checkpoint")
    return b


def _read_records(fh) -> dict:
    (count,) = struct.unpack("<I", _read_exact(fh, 4))
    out = {}
    for _ in range(count):
        (n,) = struct.unpack("<I", _read_exact(fh, 4))
        name = _read_exact(fh, n).decode()
        (rank,) = struct.unpack("<I", _read_exact(fh, 4))
        shape = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank))
        size = int(np.prod(shape)) if rank else 1
        out[name] = np.frombuffer(_read_exact(fh, 8 * size), dtype="<f8").reshape(shape).astype(np.float64)
    return out


def _atomic_write(path, blob: bytes):
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(blob)
    os.replace(tmp, path)


def save_checkpoint(net: NetworkParams, path):
    cfg = net.config
    buf = io.BytesIO()
    name = cfg.name.encode()
    buf.write(MAGIC + struct.pack("<I", FORMAT_VERSION))
    buf.write(struct.pack("<I", len(name)) + name)
    buf.write(struct.pack("<6I", *cfg.depths) + struct.pack("<6I", *cfg.widths))
    buf.write(struct.pack("<IIq", cfg.num_classes, cfg.in_channels, -1 if net.seed is None else int(net.seed)))
    _write_records(buf, {k: p.data for k, p in net.params.items()})
    _atomic_write(path, buf.getvalue())
    meta = {
        "format_version": FORMAT_VERSION, "config_name": cfg.name, "depths": list(cfg.depths),
        "widths": list(cfg.widths), "num_classes": cfg.num_classes, "in_channels": cfg.in_channels,
        "seed": net.seed, "num_parameters": net.num_parameters(), "tensors": len(net.params),
    }
    with open(f"{path}.json", "w") as fh:
        json.dump(meta, fh, indent=2)


def load_checkpoint(path) -> NetworkParams:
    with open(path, "rb") as fh:
        if _read_exact(fh, 8) != MAGIC:
            raise ValueError(f"{path}: not a liseg checkpoint")
        (version,) = struct.unpack("<I", _read_exact(fh, 4))
        if version != FORMAT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        (n,) = struct.unpack("<I", _read_exact(fh, 4))
        name = _read_exact(fh, n).decode()
        depths = struct.unpack("<6I", _read_exact(fh, 24))
        widths = struct.unpack("<6I", _read_exact(fh, 24))
        classes, in_ch, seed = struct.unpack("<IIq", _read_exact(fh, 16))
        arrays = _read_records(fh)
    cfg = ModelScaleConfig(name, depths, widths, classes, in_ch)
    params, descriptor = {}, []
    for kind, prefix, cin, cout, shapes in layer_plan(cfg):
        descriptor.append((kind, prefix, cin, cout))
        for pname, shape in shapes:
            if pname not in arrays or arrays[pname].shape != shape:
                raise ValueError(f"{path}: missing or misshaped parameter {pname}")
            params[pname] = Tensor(arrays[pname], requires_grad=True, name=pname)
    if len(arrays) != len(params):
        raise ValueError(f"{path}: unexpected extra tensors")
    return NetworkParams(cfg, params, None if seed < 0 else seed, descriptor)


def save_optimizer(state: AdamState, path):
    buf = io.BytesIO()
    buf.write(OPT_MAGIC + struct.pack("<I", FORMAT_VERSION))
    buf.write(struct.pack("<q4d", state.t, state.lr, state.beta1, state.beta2, state.eps))
    arrays = {f"m/{k}": a for k, a in state.m.items()}
    arrays.update({f"v/{k}": a for k, a in state.v.items()})
    _write_records(buf, arrays)
    _atomic_write(path, buf.getvalue())


def load_optimizer(path) -> AdamState:
    with open(path, "rb") as fh:
        if _read_exact(fh, 8) != OPT_MAGIC:
            raise ValueError(f"{path}: not a liseg optimizer sidecar")
        struct.unpack("<I", _read_exact(fh, 4))
        t, lr, b1, b2, eps = struct.unpack("<q4d", _read_exact(fh, 40))
        arrays = _read_records(fh)
    state = AdamState(lr, b1, b2, eps, t)
    for key, arr in arrays.items():
        kind, name = key.split("/", 1)
        (state.m if kind == "m" else state.v)[name] = arr.copy()
    return state
