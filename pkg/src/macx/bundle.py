"""The MACX feature-bundle container.

Layout (all integers little-endian)::

    b"MACX"  u32 version=1  u32 count
    count x { u32 name_len, utf-8 name, u8 dtype (0=f32, 1=f64),
              u32 ndim, ndim x u64 extent, row-major payload }

Used for datasets, feature dumps and checkpoints alike.
"""

from __future__ import annotations

import os
import struct
import tempfile

import numpy as np

MAGIC = b"MACX"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}


class BundleError(ValueError):
    pass


def encode_bundle(arrays):
    """Serialize an ordered ``name -> array`` mapping to bytes."""
    parts = [MAGIC, struct.pack("<II", VERSION, len(arrays))]
    seen = set()
    for name, arr in arrays.items():
        if name in seen:
            raise BundleError(f"duplicate array name {name!r}")
        seen.add(name)
        arr = np.asarray(arr)
        if arr.dtype not in _CODES:
            raise BundleError(f"array {name!r} has unsupported dtype {arr.dtype}")
        code = _CODES[arr.dtype]
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<BI", code, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    return b"".join(parts)


def decode_bundle(buf):
    buf = memoryview(buf)
    if len(buf) < 4 or bytes(buf[:4]) != MAGIC:
        raise BundleError("not a MACX bundle")
    pos = 4

    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise BundleError("corrupt bundle: truncated")
        out = buf[pos:pos + n]
        pos += n
        return out

    version, count = struct.unpack("<II", take(8))
    if version != VERSION:
        raise BundleError(f"unsupported MACX bundle version {version}")
    arrays = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4))
        name = bytes(take(nlen)).decode("utf-8")
        if name in arrays:
            raise BundleError(f"corrupt bundle: duplicate array name {name!r}")
        code, ndim = struct.unpack("<BI", take(5))
        if code not in _DTYPES:
            raise BundleError(f"corrupt bundle: unknown dtype code {code}")
        shape = struct.unpack(f"<{ndim}Q", take(8 * ndim))
        dtype = _DTYPES[code]
        n = int(np.prod(shape, dtype=np.int64))
        payload = take(n * dtype.itemsize)
        arrays[name] = np.frombuffer(payload, dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))
    if pos != len(buf):
        raise BundleError("corrupt bundle: trailing bytes")
    return arrays


def atomic_write_bytes(path, data):
    """Write via a temp file in the same directory, then rename."""
    path = os.fspath(path)
    folder = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=folder, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_bundle(arrays, path):
    atomic_write_bytes(path, encode_bundle(arrays))


def read_bundle(path):
    with open(path, "rb") as fh:
        return decode_bundle(fh.read())
