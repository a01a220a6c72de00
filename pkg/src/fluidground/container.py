"""Flat binary container of named tensors.

Layout (all integers little-endian):
    magic  b"FGTC" | u32 version | u32 count
    per tensor: u32 name length | UTF-8 name | u32 rank | u64 extents... |
                float64 payload (little-endian, C order)

Round-trips are bit-exact; payloads are written raw so NaN payloads and
signed zeros survive.
"""

from __future__ import annotations

import os
import struct
import tempfile

import numpy as np

from .errors import CheckpointFormatError

MAGIC = b"FGTC"
VERSION = 1


def save_tensors(path: str, tensors: dict) -> None:
    """Write `{name: ndarray}` atomically (temp file + rename)."""
    blob = bytearray()
    blob += MAGIC
    blob += struct.pack("<II", VERSION, len(tensors))
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        encoded = name.encode("utf-8")
        blob += struct.pack("<I", len(encoded))
        blob += encoded
        blob += struct.pack("<I", arr.ndim)
        blob += struct.pack(f"<{arr.ndim}Q", *arr.shape)
        blob += arr.tobytes(order="C")
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(bytes(blob))
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_tensors(path: str) -> dict:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != MAGIC:
        raise CheckpointFormatError(f"{path}: bad magic {raw[:4]!r}")
    version, count = struct.unpack_from("<II", raw, 4)
    if version != VERSION:
        raise CheckpointFormatError(f"{path}: unsupported container version {version}")
    offset = 12
    out = {}
    try:
        for _ in range(count):
            (name_len,) = struct.unpack_from("<I", raw, offset)
            offset += 4
            name = raw[offset:offset + name_len].decode("utf-8")
            offset += name_len
            (rank,) = struct.unpack_from("<I", raw, offset)
            offset += 4
            shape = struct.unpack_from(f"<{rank}Q", raw, offset)
            offset += 8 * rank
            n_bytes = 8 * int(np.prod(shape, dtype=np.int64)) if rank else 8
            arr = np.frombuffer(raw, dtype="<f8", count=n_bytes // 8, offset=offset).reshape(shape)
            offset += n_bytes
            out[name] = arr.astype(np.float64)  # writable copy
    except (struct.error, ValueError) as exc:
        raise CheckpointFormatError(f"{path}: truncated or corrupt container: {exc}") from exc
    if offset != len(raw):
        raise CheckpointFormatError(f"{path}: {len(raw) - offset} trailing bytes")
    return out
