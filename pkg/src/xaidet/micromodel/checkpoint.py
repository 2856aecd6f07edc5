"""Binary parameter checkpoints.

Layout (all integers little-endian)::

    b"MMDL"  u32 version
    repeated until end of file:
        u32 name length, name bytes (UTF-8)
        u32 rank, rank x u64 dims
        prod(dims) x f64 values, row-major
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from ..errors import FormatError, IntegrityError

MAGIC = b"MMDL"
VERSION = 1


def encode_params(params: dict) -> bytes:
    parts = [MAGIC, struct.pack("<I", VERSION)]
    for name, arr in params.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return b"".join(parts)


def decode_params(data: bytes, where="<bytes>") -> dict:
    if data[:4] != MAGIC:
        raise FormatError(f"{where}: bad checkpoint magic")
    if len(data) < 8:
        raise FormatError(f"{where}: truncated checkpoint header")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != VERSION:
        raise FormatError(f"{where}: unsupported checkpoint version {version}")
    pos, out = 8, {}
    try:
        while pos < len(data):
            (nlen,) = struct.unpack_from("<I", data, pos)
            pos += 4
            name = data[pos : pos + nlen].decode("utf-8")
            if len(name.encode("utf-8")) != nlen:
                raise FormatError(f"{where}: truncated tensor name")
            pos += nlen
            (rank,) = struct.unpack_from("<I", data, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}Q", data, pos)
            pos += 8 * rank
            count = int(np.prod(dims, dtype=np.int64)) if rank else 1
            end = pos + 8 * count
            if end > len(data):
                raise FormatError(f"{where}: truncated payload for {name!r}")
            arr = np.frombuffer(data[pos:end], dtype="<f8").astype(np.float64).reshape(dims)
            pos = end
            if name in out:
                raise IntegrityError(f"{where}: duplicate tensor {name!r}")
            if not np.all(np.isfinite(arr)):
                raise IntegrityError(f"{where}: non-finite values in {name!r}")
            out[name] = arr
    except (struct.error, UnicodeDecodeError) as e:
        raise FormatError(f"{where}: corrupt checkpoint ({e})") from None
    return out


def save_params(params: dict, path):
    Path(path).write_bytes(encode_params(params))


def load_params(path) -> dict:
    return decode_params(Path(path).read_bytes(), where=str(path))
