"""Versioned binary container for model and backend files.

Layout (all integers little-endian u32, all floats little-endian f64):

    magic      4 bytes (e.g. b"ASPX" for checkpoints, b"ASPB" for backends)
    version    u32
    meta_len   u32, followed by meta_len bytes of UTF-8 JSON (sorted keys)
    n_arrays   u32
    per array: name_len u32, name bytes, ndim u32, dims u32 each, f64 data

Arrays are written in sorted-name order, so identical contents always produce
identical bytes.
"""

import json
import struct

import numpy as np

from .errors import FormatError

VERSION = 1

_U32 = struct.Struct("<I")


def _write_u32(fh, value):
    fh.write(_U32.pack(value))


def _read_exact(fh, n, what):
    data = fh.read(n)
    if len(data) != n:
        raise FormatError(f"truncated file while reading {what}")
    return data


def _read_u32(fh, what):
    return _U32.unpack(_read_exact(fh, 4, what))[0]


def write_container(path, magic, meta, arrays):
    """Write ``meta`` (JSON-serializable dict) and named float64 arrays."""
    if len(magic) != 4:
        raise ValueError("magic must be exactly 4 bytes")
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(magic)
        _write_u32(fh, VERSION)
        _write_u32(fh, len(meta_bytes))
        fh.write(meta_bytes)
        _write_u32(fh, len(arrays))
        for name in sorted(arrays):
            arr = np.ascontiguousarray(arrays[name], dtype="<f8")
            name_bytes = name.encode("utf-8")
            _write_u32(fh, len(name_bytes))
            fh.write(name_bytes)
            _write_u32(fh, arr.ndim)
            for dim in arr.shape:
                _write_u32(fh, dim)
            fh.write(arr.tobytes())


def read_container(path, magic):
    """Read back ``(meta, arrays)``; raises FormatError on any mismatch."""
    with open(path, "rb") as fh:
        got_magic = _read_exact(fh, 4, "magic")
        if got_magic != magic:
            raise FormatError(f"bad magic {got_magic!r}, expected {magic!r}")
        version = _read_u32(fh, "version")
        if version != VERSION:
            raise FormatError(f"unsupported version {version}, expected {VERSION}")
        meta_len = _read_u32(fh, "meta length")
        try:
            meta = json.loads(_read_exact(fh, meta_len, "meta").decode("utf-8"))
        except ValueError as exc:
            raise FormatError(f"corrupt meta block: {exc}") from exc
        arrays = {}
        n_arrays = _read_u32(fh, "array count")
        for _ in range(n_arrays):
            name_len = _read_u32(fh, "array name length")
            name = _read_exact(fh, name_len, "array name").decode("utf-8")
            ndim = _read_u32(fh, "array rank")
            shape = tuple(_read_u32(fh, "array dim") for _ in range(ndim))
            count = int(np.prod(shape, dtype=np.int64)) if shape else 1
            data = _read_exact(fh, 8 * count, f"array {name!r} data")
            arrays[name] = np.frombuffer(data, dtype="<f8").reshape(shape).astype(
                np.float64
            )
        trailing = fh.read(1)
        if trailing:
            raise FormatError("trailing bytes after final array")
    return meta, arrays
