"""Binary adapter checkpoints.

Layout (little-endian)::

    b"ALR2" | version u32 | layer_count u32
    per layer: name_len u32 | name (UTF-8) | m u32 | n u32 | d u32 | nu f64
               | B[:, :d] row-major f32 | A[:d, :] row-major f32

The importance diagonal is never stored; it is recomputed from ``nu``.
"""

from __future__ import annotations

import logging
import os
import struct
from pathlib import Path
from typing import Iterable

import numpy as np

from .rank import effective_rank

log = logging.getLogger(__name__)

MAGIC = b"ALR2"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sII")
_DIMS = struct.Struct("<III")
_U32 = struct.Struct("<I")
_F64 = struct.Struct("<d")


class CheckpointError(Exception):
    pass


class MagicMismatch(CheckpointError):
    pass


class VersionMismatch(CheckpointError):
    pass


class TruncatedCheckpoint(CheckpointError):
    pass


class ShapeMismatch(CheckpointError):
    pass


def _layers(model) -> list:
    return list(model.layers if hasattr(model, "layers") else model)


def layer_record_size(name: str, m: int, n: int, d: int) -> int:
    return 24 + len(name.encode("utf-8")) + 4 * d * (m + n)


def checkpoint_size(model) -> int:
    return _HEADER.size + sum(
        layer_record_size(l.name, l.base.m, l.base.n, l.d) for l in _layers(model)
    )


def encode(model) -> bytes:
    layers = _layers(model)
    chunks = [_HEADER.pack(MAGIC, FORMAT_VERSION, len(layers))]
    for layer in layers:
        b = layer.b_active()
        a = layer.a_active()
        if not (np.isfinite(b).all() and np.isfinite(a).all() and np.isfinite(layer.rank.nu)):
            raise CheckpointError(f"{layer.name}: refusing to write non-finite weights")
        name = layer.name.encode("utf-8")
        chunks.append(_U32.pack(len(name)))
        chunks.append(name)
        chunks.append(_DIMS.pack(layer.base.m, layer.base.n, layer.d))
        chunks.append(_F64.pack(layer.rank.nu))
        chunks.append(np.ascontiguousarray(b, dtype="<f4").tobytes())
        chunks.append(np.ascontiguousarray(a, dtype="<f4").tobytes())
    return b"".join(chunks)


def save_checkpoint(model, path: str | os.PathLike) -> int:
    data = encode(model)
    Path(path).write_bytes(data)
    return len(data)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, k: int) -> bytes:
        if self.pos + k > len(self.data):
            raise TruncatedCheckpoint(
                f"needed {k} bytes at offset {self.pos}, file has {len(self.data)}"
            )
        out = self.data[self.pos : self.pos + k]
        self.pos += k
        return out


def decode(data: bytes) -> list[dict]:
    """Parse raw bytes into layer records (name, m, n, d, nu, b, a)."""
    r = _Reader(data)
    magic, version, count = _HEADER.unpack(r.take(_HEADER.size))
    if magic != MAGIC:
        raise MagicMismatch(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != FORMAT_VERSION:
        raise VersionMismatch(f"format version {version}, expected {FORMAT_VERSION}")
    records = []
    for _ in range(count):
        (name_len,) = _U32.unpack(r.take(4))
        name = r.take(name_len).decode("utf-8")
        m, n, d = _DIMS.unpack(r.take(_DIMS.size))
        (nu,) = _F64.unpack(r.take(8))
        b = np.frombuffer(r.take(4 * m * d), dtype="<f4").reshape(m, d)
        a = np.frombuffer(r.take(4 * d * n), dtype="<f4").reshape(d, n)
        records.append(dict(name=name, m=m, n=n, d=d, nu=nu, b=b, a=a))
    if r.pos != len(data):
        raise CheckpointError(f"{len(data) - r.pos} trailing bytes after last layer")
    return records


def load_checkpoint(path: str | os.PathLike, model):
    """Write stored adapters into ``model`` (matched by layer name) and return it."""
    records = decode(Path(path).read_bytes())
    by_name = {l.name: l for l in _layers(model)}
    if set(by_name) != {rec["name"] for rec in records}:
        raise ShapeMismatch(
            f"layer names differ: checkpoint {sorted(rec['name'] for rec in records)}, "
            f"model {sorted(by_name)}"
        )
    for rec in records:
        layer = by_name[rec["name"]]
        if (rec["m"], rec["n"]) != (layer.base.m, layer.base.n):
            raise ShapeMismatch(
                f"{rec['name']}: checkpoint shape {(rec['m'], rec['n'])}, "
                f"model shape {(layer.base.m, layer.base.n)}"
            )
        d = rec["d"]
        if d > layer.capacity:
            raise ShapeMismatch(f"{rec['name']}: rank {d} exceeds capacity {layer.capacity}")
        layer.rank.set_nu(rec["nu"])
        if not layer.fixed:
            implied = effective_rank(layer.rank.nu, layer.rank.q, layer.rank.r_max)
            if implied != d:
                log.warning(
                    "%s: stored rank %d but nu implies %d; keeping stored rank",
                    rec["name"], d, implied,
                )
        layer.rank.d = d
        layer.b.value[...] = 0.0
        layer.a.value[...] = 0.0
        layer.b.value[:, :d] = rec["b"]
        layer.a.value[:d] = rec["a"]
    return model


def quantize_payload(model) -> None:
    """Round live factors to float32 in place, matching what a checkpoint stores."""
    for layer in _layers(model):
        layer.b.value[...] = layer.b.value.astype(np.float32).astype(np.float64)
        layer.a.value[...] = layer.a.value.astype(np.float32).astype(np.float64)


def describe(path: str | os.PathLike) -> list[dict]:
    """Per-layer summary without a base model: name, shape, rank, rate."""
    return [
        {k: rec[k] for k in ("name", "m", "n", "d", "nu")} for rec in decode(Path(path).read_bytes())
    ]


def total_bytes(records: Iterable[dict]) -> int:
    return _HEADER.size + sum(layer_record_size(r["name"], r["m"], r["n"], r["d"]) for r in records)
