"""Flat binary tensor files and named tensor archives.

A single tensor is encoded as::

    b"IDK1" | dtype tag (uint8) | ndim (uint8) | ndim x uint32 dims | payload

with every integer and the payload little-endian. An archive is::

    b"IDKA" | uint32 entry count | entries

where each entry is a uint16 name length, the UTF-8 name, a uint64 blob
length and one IDK1 blob.
"""

from __future__ import annotations

import hashlib
import io
import os
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"IDK1"
ARCHIVE_MAGIC = b"IDKA"

_DTYPES = {
    1: np.dtype("<f4"),
    2: np.dtype("<f8"),
    3: np.dtype("<i8"),
}
_TAGS = {dt: tag for tag, dt in _DTYPES.items()}


class TensorFormatError(ValueError):
    pass


def encode_tensor(array) -> bytes:
    arr = np.asarray(array)
    dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
    if dt.kind == "f" and dt.itemsize == 4:
        dt = _DTYPES[1]
    elif dt.kind == "f":
        dt = _DTYPES[2]
    elif dt.kind in "iub":
        dt = _DTYPES[3]
    else:
        raise TensorFormatError(f"unsupported dtype {arr.dtype}")
    arr = np.asarray(arr, dtype=dt, order="C")  # ascontiguousarray would promote 0-d
    header = MAGIC + struct.pack("<BB", _TAGS[dt], arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + arr.tobytes()


def decode_tensor(blob: bytes) -> np.ndarray:
    if blob[:4] != MAGIC:
        raise TensorFormatError("bad magic, expected IDK1")
    if len(blob) < 6:
        raise TensorFormatError("truncated header")
    tag, ndim = struct.unpack_from("<BB", blob, 4)
    if tag not in _DTYPES:
        raise TensorFormatError(f"unknown dtype tag {tag}")
    off = 6 + 4 * ndim
    shape = struct.unpack_from(f"<{ndim}I", blob, 6)
    dt = _DTYPES[tag]
    n = int(np.prod(shape, dtype=np.int64)) if ndim else 1
    if len(blob) - off != n * dt.itemsize:
        raise TensorFormatError("payload size does not match shape")
    return np.frombuffer(blob, dtype=dt, count=n, offset=off).reshape(shape).copy()


def write_tensor(path, array) -> None:
    Path(path).write_bytes(encode_tensor(array))


def read_tensor(path) -> np.ndarray:
    return decode_tensor(Path(path).read_bytes())


def encode_archive(tensors: Mapping[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    buf.write(ARCHIVE_MAGIC)
    buf.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        blob = encode_tensor(arr)
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<Q", len(blob)))
        buf.write(blob)
    return buf.getvalue()


def decode_archive(data: bytes) -> dict[str, np.ndarray]:
    if data[:4] != ARCHIVE_MAGIC:
        raise TensorFormatError("bad archive magic, expected IDKA")
    (count,) = struct.unpack_from("<I", data, 4)
    off = 8
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", data, off)
        off += 2
        name = data[off:off + nlen].decode("utf-8")
        off += nlen
        (blen,) = struct.unpack_from("<Q", data, off)
        off += 8
        out[name] = decode_tensor(data[off:off + blen])
        off += blen
    if off != len(data):
        raise TensorFormatError("trailing bytes in archive")
    return out


def write_archive(path, tensors: Mapping[str, np.ndarray]) -> None:
    # write-then-rename so an interrupted run never leaves a half archive
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(encode_archive(tensors))
    os.replace(tmp, path)


def read_archive(path) -> dict[str, np.ndarray]:
    return decode_archive(Path(path).read_bytes())


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
