"""Binary container for network parameters.

A flat little-endian format written in sorted tensor-name order so that
identical tensors always produce identical bytes (no archive metadata or
timestamps can leak in). Layout:

    magic   4 bytes  b"HCPR"
    version u32      currently 1
    tag     u32 length + utf-8 bytes (stage tag)
    count   u32      number of tensors
    per tensor, sorted by name:
        name  u32 length + utf-8 bytes
        dtype u8   0 = float64, 1 = float32
        ndim  u8
        dims  u32 * ndim
        data  raw C-order bytes
"""

from __future__ import annotations

import struct

import numpy as np

from heatcascade.errors import DataError
from heatcascade.network import RegressorParams

_MAGIC = b"HCPR"
_VERSION = 1
_DTYPE_CODES = {np.dtype("float64"): 0, np.dtype("float32"): 1}
_CODE_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<f4")}


def params_to_bytes(params: RegressorParams) -> bytes:
    chunks = [_MAGIC, struct.pack("<I", _VERSION)]
    tag = params.stage_tag.encode("utf-8")
    chunks.append(struct.pack("<I", len(tag)))
    chunks.append(tag)
    chunks.append(struct.pack("<I", len(params.tensors)))
    for name in sorted(params.tensors):
        tensor = np.ascontiguousarray(params.tensors[name])
        if tensor.dtype not in _DTYPE_CODES:
            raise ValueError(f"tensor {name} has unsupported dtype {tensor.dtype}")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<BB", _DTYPE_CODES[tensor.dtype], tensor.ndim))
        chunks.append(struct.pack(f"<{tensor.ndim}I", *tensor.shape))
        chunks.append(tensor.astype(tensor.dtype.newbyteorder("<")).tobytes())
    return b"".join(chunks)


class _Reader:
    def __init__(self, blob: bytes, origin: str):
        self.blob = blob
        self.pos = 0
        self.origin = origin

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise DataError(f"{self.origin}: truncated parameter file")
        out = self.blob[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def params_from_bytes(blob: bytes, origin: str = "params") -> RegressorParams:
    r = _Reader(blob, origin)
    if r.take(4) != _MAGIC:
        raise DataError(f"{origin}: not a parameter file (bad magic)")
    version = r.u32()
    if version != _VERSION:
        raise DataError(f"{origin}: unsupported parameter format version {version}")
    tag = r.take(r.u32()).decode("utf-8")
    count = r.u32()
    tensors = {}
    for _ in range(count):
        name = r.take(r.u32()).decode("utf-8")
        code, ndim = struct.unpack("<BB", r.take(2))
        if code not in _CODE_DTYPES:
            raise DataError(f"{origin}: tensor {name} has unknown dtype code {code}")
        dims = struct.unpack(f"<{ndim}I", r.take(4 * ndim))
        dtype = _CODE_DTYPES[code]
        total = int(np.prod(dims)) if dims else 1
        data = np.frombuffer(r.take(total * dtype.itemsize), dtype=dtype)
        tensors[name] = data.reshape(dims).astype(dtype.newbyteorder("="))
    if r.pos != len(r.blob):
        raise DataError(f"{origin}: trailing bytes after last tensor")
    return RegressorParams(tensors, tag)


def save_params(params: RegressorParams, path) -> None:
    with open(path, "wb") as fh:
        fh.write(params_to_bytes(params))


def load_params(path) -> RegressorParams:
    with open(path, "rb") as fh:
        return params_from_bytes(fh.read(), origin=str(path))
