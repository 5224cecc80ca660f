"""Binary tensor container shared by checkpoints, spectrogram caches and perturbations.

Layout (all integers little-endian)::

    magic      8 bytes   b"MERBTNSR"
    version    uint32    currently 1
    digest     32 bytes  SHA-256 of whatever the payload belongs to
                         (model spec, preprocessing config, ...); zeros if unused
    count      uint32    number of records
    record*    name_len uint16, name utf-8, rank uint8, dims uint32[rank],
               data float32[prod(dims)]
"""

from __future__ import annotations

import struct
from collections import OrderedDict
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"MERBTNSR"
VERSION = 1
NO_DIGEST = bytes(32)

_HEADER = struct.Struct("<8sI32sI")


class FormatError(ValueError):
    """Malformed, truncated or incompatible tensor container."""


def write_tensors(arrays: Mapping[str, np.ndarray], digest: bytes = NO_DIGEST) -> bytes:
    if len(digest) != 32:
        raise ValueError("digest must be 32 bytes")
    parts = [_HEADER.pack(MAGIC, VERSION, digest, len(arrays))]
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        if arr.dtype != np.float32:
            raise FormatError(f"{name}: only float32 tensors are stored, got {arr.dtype}")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack(f"<B{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(arr.astype("<f4", copy=False).tobytes(order="C"))
    return b"".join(parts)


def read_tensors(blob: bytes) -> tuple[bytes, "OrderedDict[str, np.ndarray]"]:
    view = memoryview(blob)
    if len(view) < _HEADER.size:
        raise FormatError("truncated container header")
    magic, version, digest, count = _HEADER.unpack_from(view, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"unsupported container version {version}")
    pos = _HEADER.size
    out: OrderedDict[str, np.ndarray] = OrderedDict()

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise FormatError("truncated container record")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        name = bytes(take(name_len)).decode("utf-8")
        (rank,) = struct.unpack("<B", take(1))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        n = int(np.prod(dims)) if rank else 1
        data = np.frombuffer(take(4 * n), dtype="<f4").astype(np.float32).reshape(dims)
        out[name] = data
    if pos != len(view):
        raise FormatError(f"{len(view) - pos} trailing bytes after last record")
    return digest, out


def save_file(path: Path | str, arrays: Mapping[str, np.ndarray], digest: bytes = NO_DIGEST) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(write_tensors(arrays, digest))
    tmp.replace(path)


def load_file(path: Path | str) -> tuple[bytes, "OrderedDict[str, np.ndarray]"]:
    return read_tensors(Path(path).read_bytes())
