"""Weight file serialization.

Layout (little-endian throughout): magic "RFRW", version u32, tensor count
u32, then per tensor in sorted-name order: name length u16, UTF-8 name, dtype
code u8 (0 = float32, 1 = float64), rank u8, dims as u32, raw row-major data.
Sorted order makes the byte stream canonical for identical parameters.
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"RFRW"
VERSION = 1

_DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODE_OF = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


class WeightFormatError(ValueError):
    """Malformed or mismatched weight file."""


def save_weights(graph, path):
    """Write every named tensor (parameters and running statistics) to path."""
    entries = sorted(graph.store.entries())
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(entries)))
        for name, tensor in entries:
            raw = name.encode("utf-8")
            data = tensor.data
            code = _CODE_OF.get(data.dtype)
            if code is None:
                raise WeightFormatError(f"tensor {name!r} has unserializable dtype {data.dtype}")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<BB", code, data.ndim))
            for dim in data.shape:
                fh.write(struct.pack("<I", dim))
            fh.write(np.ascontiguousarray(data, dtype=_DTYPE_CODES[code]).tobytes())


def _read_exact(fh, n, what):
    buf = fh.read(n)
    if len(buf) != n:
        raise WeightFormatError(f"truncated weight file while reading {what}")
    return buf


def load_weights(graph, path):
    """Fill graph tensors from path; every entry must match an existing name and shape."""
    known = dict(graph.store.entries())
    seen = set()
    with open(path, "rb") as fh:
        if _read_exact(fh, 4, "magic") != MAGIC:
            raise WeightFormatError(f"bad magic bytes in {path}, expected {MAGIC!r}")
        version, count = struct.unpack("<II", _read_exact(fh, 8, "header"))
        if version != VERSION:
            raise WeightFormatError(f"unsupported weight file version {version}")
        for _ in range(count):
            (name_len,) = struct.unpack("<H", _read_exact(fh, 2, "name length"))
            name = _read_exact(fh, name_len, "name").decode("utf-8")
            code, rank = struct.unpack("<BB", _read_exact(fh, 2, f"dtype/rank of {name}"))
            if code not in _DTYPE_CODES:
                raise WeightFormatError(f"unknown dtype code {code} for tensor {name!r}")
            dims = tuple(
                struct.unpack("<I", _read_exact(fh, 4, f"dims of {name}"))[0] for _ in range(rank)
            )
            dtype = _DTYPE_CODES[code]
            nbytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize if rank else dtype.itemsize
            data = np.frombuffer(_read_exact(fh, nbytes, f"data of {name}"), dtype=dtype).reshape(dims)
            target = known.get(name)
            if target is None:
                raise WeightFormatError(f"unknown tensor name {name!r} in weight file")
            if target.data.shape != dims:
                raise WeightFormatError(
                    f"tensor {name!r} shape {dims} does not match graph shape {target.data.shape}"
                )
            target.data = data.astype(target.data.dtype, copy=True)
            seen.add(name)
        trailing = fh.read(1)
        if trailing:
            raise WeightFormatError("trailing bytes after final tensor record")
    missing = set(known) - seen
    if missing:
        raise WeightFormatError(f"weight file is missing tensors: {sorted(missing)[:5]}")
    return graph
