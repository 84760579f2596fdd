"""Binary checkpoint container.

Layout, all integers little-endian:

    magic    4 bytes  b"PXK1"
    version  u16      currently 1
    cfg_len  u32      followed by that many UTF-8 config bytes
    count    u32      number of tensors
    per tensor:
        name_len u16, UTF-8 name
        dtype    u8   0=float64 1=float32 2=int8 3=uint32
        ndim     u8
        dims     u64 * ndim
        data     raw entries, C order, little-endian

Round trips are byte-exact: loading returns arrays with identical bytes
and the exact config text, and tensor order is preserved.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import CheckpointError, ShapeError

MAGIC = b"PXK1"
VERSION = 1

_CODE_TO_DTYPE = {0: "<f8", 1: "<f4", 2: "i1", 3: "<u4"}
_KIND_TO_CODE = {
    np.dtype(np.float64): 0,
    np.dtype(np.float32): 1,
    np.dtype(np.int8): 2,
    np.dtype(np.uint32): 3,
}


def save_checkpoint(path: str, tensors: dict, config_text: str) -> None:
    blob = bytearray()
    blob += MAGIC
    blob += struct.pack("<H", VERSION)
    cfg = config_text.encode("utf-8")
    blob += struct.pack("<I", len(cfg))
    blob += cfg
    blob += struct.pack("<I", len(tensors))
    for name, arr in tensors.items():
        # asarray keeps rank-0 scalars rank-0; ascontiguousarray would not
        arr = np.asarray(arr)
        if arr.ndim and not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        if arr.dtype not in _KIND_TO_CODE:
            raise ShapeError(f"tensor {name!r} has unsupported dtype {arr.dtype}")
        code = _KIND_TO_CODE[arr.dtype]
        encoded = name.encode("utf-8")
        blob += struct.pack("<H", len(encoded))
        blob += encoded
        blob += struct.pack("<BB", code, arr.ndim)
        blob += struct.pack(f"<{arr.ndim}Q", *arr.shape)
        blob += arr.astype(_CODE_TO_DTYPE[code], copy=False).tobytes()
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_bytes(bytes(blob))


class _Reader:
    def __init__(self, raw: bytes, path: str):
        self.raw = raw
        self.pos = 0
        self.path = path

    def take(self, size: int) -> bytes:
        if self.pos + size > len(self.raw):
            raise CheckpointError(f"truncated checkpoint: {self.path}")
        out = self.raw[self.pos : self.pos + size]
        self.pos += size
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path: str):
    """Returns (tensors dict in stored order, config text)."""
    p = Path(path)
    if not p.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    r = _Reader(p.read_bytes(), path)
    if r.take(4) != MAGIC:
        raise CheckpointError(f"bad magic in {path}; not a checkpoint file")
    (version,) = r.unpack("<H")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} in {path}")
    (cfg_len,) = r.unpack("<I")
    config_text = r.take(cfg_len).decode("utf-8")
    (count,) = r.unpack("<I")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode("utf-8")
        code, ndim = r.unpack("<BB")
        if code not in _CODE_TO_DTYPE:
            raise CheckpointError(f"unknown dtype code {code} for tensor {name!r} in {path}")
        dims = r.unpack(f"<{ndim}Q") if ndim else ()
        dtype = np.dtype(_CODE_TO_DTYPE[code])
        n_items = 1
        for d in dims:
            n_items *= d
        data = r.take(n_items * dtype.itemsize)
        arr = np.frombuffer(data, dtype=dtype).reshape(dims).copy()
        tensors[name] = arr
    if r.pos != len(r.raw):
        raise CheckpointError(f"trailing bytes after tensor table in {path}")
    return tensors, config_text
