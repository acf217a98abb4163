"""Raw tensor file format and checkpoint archives.

Single-tensor files carry a fixed little-endian header followed by the
row-major payload:

    magic   4 bytes  b"PADT"
    version u16      currently 1
    dtype   u8       1 = float32, 2 = float64
    rank    u8
    dims    u32 * rank
    payload dtype * prod(dims)

Archives are a JSON header (names in storage order plus arbitrary metadata)
followed by one PADT record per tensor.  Both formats round-trip bitwise.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"PADT"
ARCHIVE_MAGIC = b"PADC"
VERSION = 1

_DTYPE_CODES = {np.dtype("<f4"): 1, np.dtype("<f8"): 2}
_CODE_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}


def _encode_tensor(arr: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(arr)
    dt = arr.dtype.newbyteorder("<")
    if dt not in _DTYPE_CODES:
        raise ValueError(f"unsupported dtype {arr.dtype}; expected float32 or float64")
    header = MAGIC + struct.pack("<HBB", VERSION, _DTYPE_CODES[dt], arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + arr.astype(dt, copy=False).tobytes()


def _decode_tensor(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Decode one record starting at ``offset``; returns (array, next offset)."""
    if buf[offset : offset + 4] != MAGIC:
        raise ValueError("bad magic; not a tensor file")
    version, code, rank = struct.unpack_from("<HBB", buf, offset + 4)
    if version != VERSION:
        raise ValueError(f"unsupported tensor file version {version}")
    if code not in _CODE_DTYPES:
        raise ValueError(f"unknown dtype code {code}")
    pos = offset + 8
    dims = struct.unpack_from(f"<{rank}I", buf, pos)
    pos += 4 * rank
    dtype = _CODE_DTYPES[code]
    count = int(np.prod(dims)) if rank else 1
    nbytes = count * dtype.itemsize
    if pos + nbytes > len(buf):
        raise ValueError("truncated tensor payload")
    arr = np.frombuffer(buf[pos : pos + nbytes], dtype=dtype).reshape(dims).copy()
    return arr, pos + nbytes


def write_tensor(path, arr: np.ndarray) -> None:
    Path(path).write_bytes(_encode_tensor(np.asarray(arr)))


def read_tensor(path) -> np.ndarray:
    arr, end = _decode_tensor(Path(path).read_bytes())
    return arr


def write_archive(path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    """Write named tensors plus a JSON metadata block to a single file."""
    names = list(tensors.keys())
    header = json.dumps({"names": names, "meta": meta or {}}, sort_keys=True).encode()
    blob = ARCHIVE_MAGIC + struct.pack("<HI", VERSION, len(header)) + header
    for name in names:
        blob += _encode_tensor(np.asarray(tensors[name]))
    Path(path).write_bytes(blob)


def read_archive(path) -> tuple[dict[str, np.ndarray], dict]:
    buf = Path(path).read_bytes()
    if buf[:4] != ARCHIVE_MAGIC:
        raise ValueError("bad magic; not an archive file")
    version, hlen = struct.unpack_from("<HI", buf, 4)
    if version != VERSION:
        raise ValueError(f"unsupported archive version {version}")
    header = json.loads(buf[10 : 10 + hlen].decode())
    tensors = {}
    pos = 10 + hlen
    for name in header["names"]:
        arr, pos = _decode_tensor(buf, pos)
        tensors[name] = arr
    return tensors, header["meta"]


def export_pgm(path, img: np.ndarray) -> None:
    """Write a 2-D image as binary 8-bit PGM with a linear [-1, 1] window."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError(f"expected a 2-D image, got shape {img.shape}")
    levels = np.clip(np.round((img + 1.0) * 127.5), 0, 255).astype(np.uint8)
    h, w = levels.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode())
        f.write(levels.tobytes())
