"""Binary parameter-tree container (``.fqkc``).

Layout, all integers little-endian::

    "FQKC" | version u8 | tensor count u32
    per tensor: name length u32 | UTF-8 name | dtype u8 (1 = f64, 2 = f32)
                | rank u8 | extents u64 * rank | raw values
"""

from __future__ import annotations

import struct

import numpy as np

from ..numerics import ParamTree

MAGIC = b"FQKC"
VERSION = 1
DTYPE_F64 = 1
DTYPE_F32 = 2
_DTYPES = {DTYPE_F64: np.dtype("<f8"), DTYPE_F32: np.dtype("<f4")}


class CheckpointError(ValueError):
    pass


class BadMagicError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


class DuplicateNameError(CheckpointError):
    pass


def serialize_checkpoint(params: ParamTree, dtype: str = "f64") -> bytes:
    code = {"f64": DTYPE_F64, "f32": DTYPE_F32}[dtype]
    out = [MAGIC, struct.pack("<BI", VERSION, len(params))]
    for name, value in params.items():
        raw_name = name.encode("utf-8")
        arr = np.asarray(value, dtype=_DTYPES[code])  # tobytes() is C order; keeps rank 0
        out.append(struct.pack("<I", len(raw_name)))
        out.append(raw_name)
        out.append(struct.pack("<BB", code, arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        out.append(arr.tobytes())
    return b"".join(out)


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = memoryview(blob)
        self.pos = 0

    def take(self, n: int, what: str) -> memoryview:
        if self.pos + n > len(self.blob):
            raise TruncatedCheckpointError(f"checkpoint truncated while reading {what}")
        chunk = self.blob[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def deserialize_checkpoint(blob: bytes) -> ParamTree:
    """Inverse of :func:`serialize_checkpoint`; f32 tensors are widened to f64."""
    if bytes(blob[:4]) != MAGIC:
        raise BadMagicError("not a checkpoint: bad magic")
    r = _Reader(blob)
    r.take(4, "magic")
    version, count = r.unpack("<BI", "header")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    tree = ParamTree()
    for index in range(count):
        (name_len,) = r.unpack("<I", f"name length of tensor #{index}")
        name = bytes(r.take(name_len, f"name of tensor #{index}")).decode("utf-8")
        code, rank = r.unpack("<BB", f"tensor {name!r}")
        if code not in _DTYPES:
            raise CheckpointError(f"tensor {name!r}: unknown dtype code {code}")
        shape = r.unpack(f"<{rank}Q", f"tensor {name!r}")
        dtype = _DTYPES[code]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        raw = r.take(nbytes, f"tensor {name!r}")
        if name in tree:
            raise DuplicateNameError(f"duplicate tensor name {name!r}")
        tree[name] = np.frombuffer(raw, dtype=dtype).astype(np.float64).reshape(shape)
    if r.pos != len(r.blob):
        raise CheckpointError(f"{len(r.blob) - r.pos} trailing bytes after checkpoint")
    return tree
