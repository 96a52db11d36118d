"""Versioned binary checkpoints: magic, a length-prefixed UTF-8 metadata block,
named little-endian tensor records, and a trailing CRC-32 over everything.

Layout (all integers little-endian):

    magic          4 bytes  b"RSA1"
    version        u32
    meta length    u32, then UTF-8 metadata text
    tensor count   u32
    per tensor:    name length u16, name UTF-8, dtype code u8 (0=f32, 1=f64),
                   rank u8, dims u32 * rank, raw payload
    crc            u32, CRC-32 of every preceding byte
"""

from __future__ import annotations

import struct
import zlib

import numpy as np

from .errors import BadMagicError, CrcError, IoError, VersionError

MAGIC = b"RSA1"
VERSION = 1

_DTYPE_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}
_CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


def write_checkpoint(path: str, meta_text: str, tensors) -> None:
    """`tensors` is an ordered iterable of (name, float array)."""
    parts = [MAGIC, struct.pack("<I", VERSION)]
    meta = meta_text.encode("utf-8")
    parts.append(struct.pack("<I", len(meta)))
    parts.append(meta)
    records = []
    for name, arr in tensors:
        arr = np.ascontiguousarray(arr)
        dt = arr.dtype.newbyteorder("<")
        if dt not in _DTYPE_CODES:
            raise IoError(f"cannot serialize tensor {name!r} of dtype {arr.dtype}")
        nb = name.encode("utf-8")
        rec = [struct.pack("<H", len(nb)), nb, struct.pack("<BB", _DTYPE_CODES[dt], arr.ndim)]
        rec.append(struct.pack(f"<{arr.ndim}I", *arr.shape) if arr.ndim else b"")
        rec.append(arr.astype(dt, copy=False).tobytes())
        records.append(b"".join(rec))
    parts.append(struct.pack("<I", len(records)))
    parts.extend(records)
    body = b"".join(parts)
    blob = body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)
    try:
        with open(path, "wb") as fh:
            fh.write(blob)
    except OSError as e:
        raise IoError(f"cannot write checkpoint {path!r}: {e}") from e


def read_checkpoint(path: str) -> tuple[str, dict[str, np.ndarray]]:
    """Returns (meta text, name -> array). Arrays round-trip bitwise."""
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as e:
        raise IoError(f"cannot read checkpoint {path!r}: {e}") from e
    if len(blob) < len(MAGIC) + 12 or blob[: len(MAGIC)] != MAGIC:
        raise BadMagicError(f"{path!r} is not a checkpoint (bad magic)")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise CrcError(f"{path!r} failed its CRC-32 check")
    off = len(MAGIC)

    def take(fmt):
        nonlocal off
        size = struct.calcsize(fmt)
        vals = struct.unpack_from(fmt, body, off)
        off += size
        return vals

    (version,) = take("<I")
    if version != VERSION:
        raise VersionError(f"{path!r} has format version {version}, expected {VERSION}")
    (meta_len,) = take("<I")
    meta = body[off : off + meta_len].decode("utf-8")
    off += meta_len
    (count,) = take("<I")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = take("<H")
        name = body[off : off + name_len].decode("utf-8")
        off += name_len
        code, rank = take("<BB")
        dims = take(f"<{rank}I") if rank else ()
        dt = _CODE_DTYPES[code]
        nbytes = int(np.prod(dims, dtype=np.int64)) * dt.itemsize if rank else dt.itemsize
        arr = np.frombuffer(body[off : off + nbytes], dtype=dt).reshape(dims).copy()
        off += nbytes
        tensors[name] = arr
    return meta, tensors
