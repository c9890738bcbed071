"""On-disk formats: the GRT1 binary tensor file, parameter checkpoints and text sidecars.

GRT1 layout (little-endian, no padding)::

    b"GRT1" | u16 version=1 | u8 dtype (0=u8, 1=f32) | u8 rank | rank x u32 dims | payload
"""

from __future__ import annotations

import os
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"GRT1"
VERSION = 1
_DTYPES = {0: np.dtype("<u1"), 1: np.dtype("<f4")}
_CODES = {np.dtype("u1"): 0, np.dtype("f4"): 1}
_U32_MAX = 2**32 - 1


class TensorFormatError(ValueError):
    pass


class TruncatedTensorError(TensorFormatError):
    pass


def encode_tensor(t: np.ndarray) -> bytes:
    t = np.asarray(t)
    if t.dtype == np.uint8:
        code = 0
    elif np.issubdtype(t.dtype, np.floating):
        code = 1
    else:
        raise TensorFormatError(f"unsupported dtype {t.dtype}; use uint8 or float32")
    if t.ndim > 255:
        raise TensorFormatError("rank exceeds 255")
    if any(d > _U32_MAX for d in t.shape):
        raise TensorFormatError(f"dimension overflow in shape {t.shape}")
    header = MAGIC + struct.pack("<HBB", VERSION, code, t.ndim) + struct.pack(f"<{t.ndim}I", *t.shape)
    payload = np.ascontiguousarray(t, dtype=_DTYPES[code]).tobytes()
    return header + payload


def decode_tensor(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Decode one tensor starting at ``offset``; return it and the offset just past it."""
    view = memoryview(buf)
    if len(view) - offset < 8:
        raise TruncatedTensorError("file too short for a GRT1 header")
    if bytes(view[offset:offset + 4]) != MAGIC:
        raise TensorFormatError(f"bad magic {bytes(view[offset:offset + 4])!r}")
    version, code, rank = struct.unpack_from("<HBB", view, offset + 4)
    if version != VERSION:
        raise TensorFormatError(f"unsupported version {version}")
    if code not in _DTYPES:
        raise TensorFormatError(f"unknown dtype code {code}")
    pos = offset + 8
    if len(view) - pos < 4 * rank:
        raise TruncatedTensorError("header truncated inside the dimension list")
    dims = struct.unpack_from(f"<{rank}I", view, pos)
    pos += 4 * rank
    dtype = _DTYPES[code]
    nbytes = int(np.prod(dims, dtype=object)) * dtype.itemsize
    if nbytes > len(view) - pos:
        raise TruncatedTensorError(
            f"header declares {nbytes} payload bytes but only {len(view) - pos} remain"
        )
    arr = np.frombuffer(view[pos:pos + nbytes], dtype=dtype).reshape(dims)
    return arr.astype(dtype.newbyteorder("="), copy=True), pos + nbytes


def write_tensor(t: np.ndarray, path: str | os.PathLike) -> None:
    Path(path).write_bytes(encode_tensor(t))


def read_tensor(path: str | os.PathLike) -> np.ndarray:
    buf = Path(path).read_bytes()
    arr, end = decode_tensor(buf)
    if end != len(buf):
        raise TensorFormatError(f"{len(buf) - end} trailing bytes after payload")
    return arr


def save_checkpoint(params: Mapping[str, np.ndarray], path: str | os.PathLike,
                    meta: Mapping[str, object] | None = None) -> None:
    """Write ``path`` (concatenated GRT1 records) and ``path.manifest``.

    Manifest lines are ``name<TAB>shape<TAB>offset``; ``meta`` entries go
    first as ``# key = value`` comment lines.  Float parameters are stored
    as float32.
    """
    path = Path(path)
    lines = [f"# {k} = {v}" for k, v in (meta or {}).items()]
    chunks, offset = [], 0
    for name, value in params.items():
        rec = encode_tensor(np.asarray(value, dtype=np.float32))
        lines.append(f"{name}\t{'x'.join(map(str, np.shape(value))) or '-'}\t{offset}")
        chunks.append(rec)
        offset += len(rec)
    path.write_bytes(b"".join(chunks))
    Path(str(path) + ".manifest").write_text("\n".join(lines) + "\n")


def load_checkpoint(path: str | os.PathLike) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    path = Path(path)
    buf = path.read_bytes()
    params: dict[str, np.ndarray] = {}
    meta: dict[str, str] = {}
    for line in Path(str(path) + ".manifest").read_text().splitlines():
        if not line.strip():
            continue
        if line.startswith("#"):
            key, _, value = line[1:].partition("=")
            meta[key.strip()] = value.strip()
            continue
        name, shape, offset = line.split("\t")
        arr, _ = decode_tensor(buf, int(offset))
        expected = () if shape == "-" else tuple(int(s) for s in shape.split("x"))
        if arr.shape != expected:
            raise TensorFormatError(f"{name}: manifest shape {expected} != stored {arr.shape}")
        params[name] = arr
    return params, meta


def write_kv(path: str | os.PathLike, items: Mapping[str, object]) -> None:
    """Plain ``key = value`` text sidecar, one entry per line, insertion order."""
    Path(path).write_text("".join(f"{k} = {v}\n" for k, v in items.items()))


def read_kv(path: str | os.PathLike) -> dict[str, str]:
    out = {}
    for line in Path(path).read_text().splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            key, _, value = line.partition("=")
            out[key.strip()] = value.strip()
    return out
