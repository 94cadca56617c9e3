"""Binary checkpoint format for TT vectors and operators.

Layout (all integers little-endian)::

    8 bytes   magic  b"QTTCORE\\0"
    u32       format version (1)
    u32       kind: 3 for a vector (3-way cores), 4 for an operator
    u64       number of cores
    per core: kind x u64 shape entries
    payload:  each core's entries as little-endian float64, C order, in core order

Readers reject unknown magic, versions and kinds, and truncated payloads.
"""
from __future__ import annotations

import io
import math
import struct
from pathlib import Path

import numpy as np

from .errors import DomainError
from .tt import TtOperator, TtVector

MAGIC = b"QTTCORE\0"
VERSION = 1


def dumps(tt) -> bytes:
    kind = 4 if isinstance(tt, TtOperator) else 3
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<IIQ", VERSION, kind, len(tt.cores)))
    for c in tt.cores:
        buf.write(struct.pack(f"<{kind}Q", *c.shape))
    for c in tt.cores:
        buf.write(np.ascontiguousarray(c, dtype="<f8").tobytes())
    return buf.getvalue()


def loads(data: bytes):
    view = memoryview(data)
    if bytes(view[:8]) != MAGIC:
        raise DomainError("not a TT checkpoint (bad magic bytes)")
    try:
        version, kind, count = struct.unpack_from("<IIQ", view, 8)
    except struct.error as exc:
        raise DomainError("truncated TT checkpoint header") from exc
    if version != VERSION:
        raise DomainError(f"unsupported checkpoint version {version}")
    if kind not in (3, 4):
        raise DomainError(f"unknown checkpoint kind {kind}")
    off = 24
    shapes = []
    for _ in range(count):
        shapes.append(struct.unpack_from(f"<{kind}Q", view, off))
        off += 8 * kind
    cores = []
    for shape in shapes:
        n = math.prod(shape)
        if off + 8 * n > len(view):
            raise DomainError("truncated TT checkpoint payload")
        cores.append(np.frombuffer(view, dtype="<f8", count=n, offset=off).reshape(shape).astype(float))
        off += 8 * n
    if off != len(view):
        raise DomainError(f"{len(view) - off} trailing bytes in TT checkpoint")
    return (TtOperator if kind == 4 else TtVector)(cores)


def save(tt, path) -> None:
    Path(path).write_bytes(dumps(tt))


def load(path):
    return loads(Path(path).read_bytes())
