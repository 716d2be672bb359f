"""Checkpoint files for trained precoder networks.

Layout (little-endian)::

    magic          8s    b"IPNETCK1"
    version        u32
    variant        u32   index into model.VARIANTS
    m, k           u32, u32
    p_t_mdb        i64   power budget in millidecibels (informational)
    n_widths       u32
    widths         u32[n_widths]
    parameters     float64 blobs, layer order: weight, bias / gamma, beta
    bn_state       float64 blobs, per BN layer: running_mean, running_var
    input_scale    float64[widths[0]]
    meta_len       u64
    metadata       UTF-8 JSON (sorted keys); exact power budget, noise
                   variance, BN settings and training history
    crc64          u64   CRC-64/XZ over everything above
"""

from __future__ import annotations

import json
import math
import struct
from pathlib import Path

import fastcrc
import numpy as np

from .channels import ChecksumError, DatasetFormatError
from .model import VARIANTS, NetworkSpec, PrecoderNet, build_network

__all__ = ["save_checkpoint", "load_checkpoint", "checkpoint_bytes", "CheckpointFormatError"]

MAGIC = b"IPNETCK1"
FORMAT_VERSION = 1
_HEAD = struct.Struct("<8sIIIIqI")


class CheckpointFormatError(DatasetFormatError):
    pass


def checkpoint_bytes(model: PrecoderNet) -> bytes:
    spec = model.spec
    widths = spec.widths
    p_t_mdb = int(round(10_000 * math.log10(spec.power_budget)))
    parts = [
        _HEAD.pack(MAGIC, FORMAT_VERSION, VARIANTS.index(spec.variant), spec.m, spec.k, p_t_mdb, len(widths)),
        struct.pack(f"<{len(widths)}I", *widths),
    ]
    parts += [np.ascontiguousarray(a, dtype="<f8").tobytes() for a in (*model.state(), model.scale)]
    bn = next(layer for layer in model.network.layers if hasattr(layer, "running_var"))
    meta = dict(model.metadata)
    meta.update(
        power_budget=spec.power_budget,
        noise_variance=spec.noise_variance,
        bn_momentum=bn.momentum,
        bn_eps=bn.eps,
    )
    blob = json.dumps(meta, sort_keys=True).encode()
    parts += [struct.pack("<Q", len(blob)), blob]
    body = b"".join(parts)
    return body + struct.pack("<Q", fastcrc.crc64.xz(body))


def save_checkpoint(model: PrecoderNet, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(model))


def load_checkpoint(path) -> PrecoderNet:
    raw = Path(path).read_bytes()
    if len(raw) < _HEAD.size + 16:
        raise CheckpointFormatError(f"{path}: file too short")
    body, (crc,) = raw[:-8], struct.unpack("<Q", raw[-8:])
    if fastcrc.crc64.xz(body) != crc:
        raise ChecksumError(f"{path}: CRC-64 mismatch")
    magic, version, variant, m, k, p_t_mdb, n_widths = _HEAD.unpack_from(body)
    if magic != MAGIC:
        raise CheckpointFormatError(f"{path}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise CheckpointFormatError(f"{path}: unsupported format version {version}")
    if variant >= len(VARIANTS):
        raise CheckpointFormatError(f"{path}: unknown variant tag {variant}")
    if not 2 <= n_widths <= 64:
        raise CheckpointFormatError(f"{path}: implausible layer count {n_widths}")
    offset = _HEAD.size
    widths = struct.unpack_from(f"<{n_widths}I", body, offset)
    offset += 4 * n_widths

    # the metadata block sits after the arrays, whose sizes follow from the widths
    n_state = sum(a * b + 3 * b for a, b in zip(widths[:-1], widths[1:])) + 2 * sum(widths[1:])
    n_float = n_state + widths[0]
    arrays_end = offset + 8 * n_float
    (meta_len,) = struct.unpack_from("<Q", body, arrays_end)
    meta = json.loads(body[arrays_end + 8: arrays_end + 8 + meta_len].decode())
    if arrays_end + 8 + meta_len != len(body):
        raise CheckpointFormatError(f"{path}: trailing bytes after metadata")

    spec = NetworkSpec(VARIANTS[variant], m, k, meta.pop("power_budget"), meta.pop("noise_variance"))
    if tuple(widths) != spec.widths:
        raise CheckpointFormatError(f"{path}: widths {widths} do not match variant {spec.variant}")
    if int(round(10_000 * math.log10(spec.power_budget))) != p_t_mdb:
        raise CheckpointFormatError(f"{path}: header power budget disagrees with metadata")
    model = build_network(spec, bn_momentum=meta.pop("bn_momentum"), bn_eps=meta.pop("bn_eps"))
    template = model.state()
    flat = np.frombuffer(body, dtype="<f8", count=n_float, offset=offset)
    arrays, pos = [], 0
    for t in template:
        arrays.append(flat[pos:pos + t.size].reshape(t.shape).astype(np.float64))
        pos += t.size
    model.load_state(arrays)
    model.scale = flat[n_state:].astype(np.float64)
    if not np.all(model.scale > 0):
        raise CheckpointFormatError(f"{path}: input scale must be positive")
    model.metadata = meta
    return model
