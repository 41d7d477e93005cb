"""Single-file container for named tensors.

Layout (all integers little-endian)::

    magic      8 bytes   b"CASDCT01"
    count      uint32    number of tensors
    per tensor:
      name_len uint16, name (utf-8)
      dtype    4 bytes   ascii tag, space padded: "u1  ", "i4  ", "i8  ", "f4  ", "f8  "
      ndim     uint8
      shape    ndim x uint64
      payload  row-major, little-endian, prod(shape) * itemsize bytes
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import DatasetFormatError

MAGIC = b"CASDCT01"

_DTYPES = {
    "u1": np.dtype("<u1"),
    "i4": np.dtype("<i4"),
    "i8": np.dtype("<i8"),
    "f4": np.dtype("<f4"),
    "f8": np.dtype("<f8"),
}
_TAGS = {v: k for k, v in _DTYPES.items()}


def write_tensors(path, tensors: dict[str, np.ndarray]) -> None:
    chunks = [MAGIC, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        dt = np.dtype(arr.dtype.str.replace("|", "<").replace(">", "<"))
        if dt not in _TAGS:
            raise TypeError(f"unsupported dtype {arr.dtype} for tensor {name!r}")
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(encoded)))
        chunks.append(encoded)
        chunks.append(_TAGS[dt].ljust(4).encode("ascii"))
        chunks.append(struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype=dt).tobytes())
    Path(path).write_bytes(b"".join(chunks))


def read_tensors(path) -> dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise DatasetFormatError(f"{path}: bad magic bytes")
    view = memoryview(data)
    pos = 8

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise DatasetFormatError(f"{path}: truncated container")
        out = view[pos : pos + n]
        pos += n
        return out

    (count,) = struct.unpack("<I", take(4))
    out = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        name = bytes(take(name_len)).decode("utf-8")
        tag = bytes(take(4)).decode("ascii").strip()
        if tag not in _DTYPES:
            raise DatasetFormatError(f"{path}: unknown dtype tag {tag!r}")
        (ndim,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{ndim}Q", take(8 * ndim))
        dt = _DTYPES[tag]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        arr = np.frombuffer(take(nbytes), dtype=dt).reshape(shape).copy()
        out[name] = arr
    if pos != len(data):
        raise DatasetFormatError(f"{path}: {len(data) - pos} trailing bytes")
    return out
