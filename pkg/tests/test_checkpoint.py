"""Binary checkpoint format: bitwise round-trips and corruption detection."""

import struct

import numpy as np
import pytest

from rosalab.checkpoint import MAGIC, read_checkpoint, write_checkpoint
from rosalab.errors import BadMagicError, CrcError, IoError, VersionError


def sample_tensors(rng):
    return [
        ("scalar", np.asarray(rng.normal(), dtype=np.float64)),
        ("vec", rng.normal(size=7).astype(np.float32)),
        ("mat", rng.normal(size=(3, 5)).astype(np.float64)),
        ("cube", rng.normal(size=(2, 3, 4)).astype(np.float32)),
    ]


def test_roundtrip_bitwise(tmp_path, rng):
    path = str(tmp_path / "state.ckpt")
    tensors = sample_tensors(rng)
    write_checkpoint(path, "config text\nwith lines = 1\n", tensors)
    meta, loaded = read_checkpoint(path)
    assert meta == "config text\nwith lines = 1\n"
    assert list(loaded) == [n for n, _ in tensors]
    for name, arr in tensors:
        assert loaded[name].dtype == arr.dtype
        np.testing.assert_array_equal(loaded[name], arr)


def test_identical_content_identical_bytes(tmp_path, rng):
    tensors = sample_tensors(rng)
    p1, p2 = str(tmp_path / "a.ckpt"), str(tmp_path / "b.ckpt")
    write_checkpoint(p1, "meta", tensors)
    write_checkpoint(p2, "meta", tensors)
    assert open(p1, "rb").read() == open(p2, "rb").read()


def test_bad_magic(tmp_path):
    path = tmp_path / "x.ckpt"
    path.write_bytes(b"NOPE" + b"\x00" * 32)
    with pytest.raises(BadMagicError):
        read_checkpoint(str(path))


def test_crc_mismatch(tmp_path, rng):
    path = tmp_path / "x.ckpt"
    write_checkpoint(str(path), "meta", sample_tensors(rng))
    blob = bytearray(path.read_bytes())
    blob[20] ^= 0xFF
    path.write_bytes(bytes(blob))
    with pytest.raises(CrcError):
        read_checkpoint(str(path))


def test_version_skew(tmp_path, rng):
    import zlib

    path = tmp_path / "x.ckpt"
    write_checkpoint(str(path), "meta", [])
    blob = bytearray(path.read_bytes())[:-4]
    struct.pack_into("<I", blob, len(MAGIC), 999)  # rewrite version, refresh crc
    blob += struct.pack("<I", zlib.crc32(bytes(blob)) & 0xFFFFFFFF)
    path.write_bytes(bytes(blob))
    with pytest.raises(VersionError):
        read_checkpoint(str(path))


def test_truncation_detected(tmp_path, rng):
    path = tmp_path / "x.ckpt"
    write_checkpoint(str(path), "meta", sample_tensors(rng))
    blob = path.read_bytes()
    path.write_bytes(blob[: len(blob) // 2])
    with pytest.raises(CrcError):
        read_checkpoint(str(path))


def test_missing_file():
    with pytest.raises(IoError):
        read_checkpoint("/nonexistent/nowhere.ckpt")


def test_integer_arrays_rejected(tmp_path):
    with pytest.raises(IoError):
        write_checkpoint(str(tmp_path / "x.ckpt"), "m", [("ids", np.arange(4))])
