"""MMFW container for complex matrices (learned inverses and simulated fibres).

Layout, little-endian, no padding::

    b"MMFW"  u32 version  u32 out_dim  u32 in_dim  u32 epoch
    f32 lambda  f32 lr  u64 rng_seed
    out_dim**2 * in_dim**2 entries of (f32 re, f32 im), row = output pixel
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import CorruptHeaderError, TruncatedError, UnknownVersionError
from .inversion import InverseModel

MAGIC = b"MMFW"
VERSION = 1
_HEADER = struct.Struct("<4sIIIIffQ")


@dataclass
class CheckpointMeta:
    lam: float = 0.0
    lr: float = 0.0
    epoch: int = 0
    rng_seed: int = 0


def encode(model: InverseModel, meta: CheckpointMeta) -> bytes:
    header = _HEADER.pack(
        MAGIC,
        VERSION,
        model.out_dim,
        model.in_dim,
        meta.epoch,
        meta.lam,
        meta.lr,
        meta.rng_seed & 0xFFFFFFFFFFFFFFFF,
    )
    payload = np.ascontiguousarray(model.W, dtype="<c8").tobytes()
    return header + payload


def decode(data: bytes, source="<bytes>") -> tuple[InverseModel, CheckpointMeta]:
    if len(data) < 4 or data[:4] != MAGIC:
        if len(data) < 4 and MAGIC.startswith(data):
            raise TruncatedError(f"{source}: file ends inside the header")
        raise CorruptHeaderError(f"{source}: bad magic {data[:4]!r}")
    if len(data) < _HEADER.size:
        raise TruncatedError(f"{source}: file ends inside the header")
    _, version, out_dim, in_dim, epoch, lam, lr, seed = _HEADER.unpack_from(data)
    if version != VERSION:
        raise UnknownVersionError(f"{source}: unsupported checkpoint version {version}")
    if out_dim == 0 or in_dim == 0:
        raise CorruptHeaderError(f"{source}: zero dimension in header")
    n = out_dim**2 * in_dim**2
    expected = _HEADER.size + 8 * n
    if len(data) < expected:
        raise TruncatedError(f"{source}: expected {expected} bytes, found {len(data)}")
    if len(data) > expected:
        raise CorruptHeaderError(f"{source}: {len(data) - expected} bytes beyond the declared payload")
    W = np.frombuffer(data, dtype="<c8", offset=_HEADER.size, count=n)
    W = W.reshape(out_dim**2, in_dim**2).astype(np.complex64)
    if not np.all(np.isfinite(W)):
        raise CorruptHeaderError(f"{source}: non-finite weights")
    meta = CheckpointMeta(lam=float(lam), lr=float(lr), epoch=epoch, rng_seed=seed)
    return InverseModel(W, out_dim, in_dim), meta


def save_checkpoint(model: InverseModel, path, meta: CheckpointMeta | None = None) -> Path:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode(model, meta or CheckpointMeta()))
    os.replace(tmp, path)
    return path


def load_checkpoint(path) -> tuple[InverseModel, CheckpointMeta]:
    path = Path(path)
    return decode(path.read_bytes(), source=path)
