"""Binary tensor and weights containers (little-endian, float64 payloads).

TensorFile::

    magic   4 bytes  b"AGT1"
    version u16      1
    ndim    u16
    dims    ndim x u32
    payload prod(dims) x f64, row-major

WeightsFile::

    magic   4 bytes  b"AGW1"
    version u16      1
    count   u32
    count manifest entries, names in lexicographic order:
        name_len u16, name utf-8, offset u64, length u64, ndim u16, dims ndim x u32
    blobs: one TensorFile encoding per entry at its offset, back to back
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Mapping

import numpy as np

TENSOR_MAGIC = b"AGT1"
WEIGHTS_MAGIC = b"AGW1"
VERSION = 1


class FormatError(ValueError):
    """A file does not follow the container layout; ``field`` names the culprit."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


def encode_tensor(array) -> bytes:
    a = np.asarray(array, dtype=np.float64)
    if a.ndim > 0xFFFF:
        raise FormatError("ndim", "too many dimensions")
    header = TENSOR_MAGIC + struct.pack("<HH", VERSION, a.ndim)
    header += struct.pack(f"<{a.ndim}I", *a.shape)
    return header + np.ascontiguousarray(a, dtype="<f8").tobytes()


def decode_tensor(buf: bytes, where: str = "tensor") -> np.ndarray:
    if len(buf) < 8:
        raise FormatError(f"{where}.header", f"need 8 header bytes, got {len(buf)}")
    if buf[:4] != TENSOR_MAGIC:
        raise FormatError(f"{where}.magic", f"expected {TENSOR_MAGIC!r}, got {bytes(buf[:4])!r}")
    version, ndim = struct.unpack_from("<HH", buf, 4)
    if version != VERSION:
        raise FormatError(f"{where}.version", f"unsupported version {version}")
    end = 8 + 4 * ndim
    if len(buf) < end:
        raise FormatError(f"{where}.dims", f"truncated: {ndim} dims need {4 * ndim} bytes")
    dims = struct.unpack_from(f"<{ndim}I", buf, 8)
    count = int(np.prod(dims, dtype=np.int64)) if ndim else 1
    expected = end + 8 * count
    if len(buf) < expected:
        raise FormatError(f"{where}.payload", f"expected {8 * count} bytes, got {len(buf) - end}")
    if len(buf) > expected:
        raise FormatError(f"{where}.payload", f"{len(buf) - expected} trailing bytes")
    return np.frombuffer(buf, dtype="<f8", count=count, offset=end).astype(np.float64).reshape(dims)


def write_tensor(path, array) -> None:
    Path(path).write_bytes(encode_tensor(array))


def read_tensor(path) -> np.ndarray:
    return decode_tensor(Path(path).read_bytes(), where=Path(path).name)


def encode_weights(arrays: Mapping[str, np.ndarray]) -> bytes:
    names = sorted(arrays)
    blobs = [encode_tensor(arrays[n]) for n in names]
    entries = []
    for n in names:
        raw = n.encode("utf-8")
        nd = np.asarray(arrays[n]).ndim
        entries.append(2 + len(raw) + 8 + 8 + 2 + 4 * nd)
    offset = 4 + 2 + 4 + sum(entries)
    out = bytearray(WEIGHTS_MAGIC + struct.pack("<HI", VERSION, len(names)))
    for n, blob in zip(names, blobs):
        raw = n.encode("utf-8")
        shape = np.asarray(arrays[n]).shape
        out += struct.pack("<H", len(raw)) + raw
        out += struct.pack("<QQH", offset, len(blob), len(shape))
        out += struct.pack(f"<{len(shape)}I", *shape)
        offset += len(blob)
    for blob in blobs:
        out += blob
    return bytes(out)


def decode_weights(buf: bytes) -> dict[str, np.ndarray]:
    if len(buf) < 10:
        raise FormatError("weights.header", "file shorter than the 10-byte header")
    if buf[:4] != WEIGHTS_MAGIC:
        raise FormatError("weights.magic", f"expected {WEIGHTS_MAGIC!r}, got {bytes(buf[:4])!r}")
    version, count = struct.unpack_from("<HI", buf, 4)
    if version != VERSION:
        raise FormatError("weights.version", f"unsupported version {version}")
    pos = 10
    manifest = []
    try:
        for i in range(count):
            (nlen,) = struct.unpack_from("<H", buf, pos)
            pos += 2
            name = bytes(buf[pos:pos + nlen]).decode("utf-8")
            pos += nlen
            offset, length, ndim = struct.unpack_from("<QQH", buf, pos)
            pos += 18
            dims = struct.unpack_from(f"<{ndim}I", buf, pos)
            pos += 4 * ndim
            manifest.append((name, offset, length, tuple(dims)))
    except (struct.error, UnicodeDecodeError) as exc:
        raise FormatError(f"weights.manifest[{len(manifest)}]", f"truncated or corrupt ({exc})")
    names = [m[0] for m in manifest]
    if names != sorted(names) or len(set(names)) != len(names):
        raise FormatError("weights.manifest", "names must be unique and lexicographically ordered")
    out: dict[str, np.ndarray] = {}
    expected_offset = pos
    for name, offset, length, dims in manifest:
        if offset != expected_offset:
            raise FormatError(f"weights[{name}].offset", f"expected {expected_offset}, got {offset}")
        if offset + length > len(buf):
            raise FormatError(f"weights[{name}].length", "blob runs past end of file")
        arr = decode_tensor(buf[offset:offset + length], where=f"weights[{name}]")
        if arr.shape != dims:
            raise FormatError(f"weights[{name}].shape", f"manifest says {dims}, blob has {arr.shape}")
        out[name] = arr
        expected_offset = offset + length
    if expected_offset != len(buf):
        raise FormatError("weights.payload", f"{len(buf) - expected_offset} trailing bytes")
    return out


def write_weights(path, arrays: Mapping[str, np.ndarray]) -> None:
    Path(path).write_bytes(encode_weights(arrays))


def read_weights(path) -> dict[str, np.ndarray]:
    return decode_weights(Path(path).read_bytes())
