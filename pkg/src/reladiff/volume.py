"""Image payload with metadata and its RDVF binary representation.

Layout (all little-endian)::

    b"RDVF" | u8 version (=1) | u8 rank | u8 channels | u8 reserved (=0)
    u32 extent * rank
    f32 data, channel-major then row-major
    u32 meta_len | meta_len bytes of UTF-8 JSON

Writes go to a temporary file in the same directory and are renamed into
place, so a reader never sees a half-written volume.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError, ShapeError, UnsupportedVersionError

MAGIC = b"RDVF"
VERSION = 1


@dataclass(eq=False)
class Volume:
    """``data`` has shape [channels, *dims] and is stored as float32."""

    data: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float32)
        if self.data.ndim not in (3, 4):
            raise ShapeError(f"Volume data must be [C, *dims] with 2 or 3 dims, got {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("Volume data contains non-finite values")

    @property
    def dims(self) -> tuple:
        return self.data.shape[1:]

    @property
    def channels(self) -> int:
        return self.data.shape[0]


def to_model_range(x):
    """[0, 1] -> [-1, 1], exactly x * 2 - 1."""
    return np.asarray(x, dtype=np.float32) * np.float32(2) - np.float32(1)


def from_model_range(y):
    """[-1, 1] -> [0, 1], clipped."""
    y = np.asarray(y, dtype=np.float32)
    return np.clip((y + np.float32(1)) / np.float32(2), 0.0, 1.0)


def encode_volume(v: Volume) -> bytes:
    meta = json.dumps(v.meta, sort_keys=True).encode("utf-8")
    head = MAGIC + struct.pack("<BBBB", VERSION, len(v.dims), v.channels, 0)
    head += struct.pack(f"<{len(v.dims)}I", *v.dims)
    body = v.data.astype("<f4", copy=False).tobytes(order="C")
    return head + body + struct.pack("<I", len(meta)) + meta


def decode_volume(buf: bytes) -> Volume:
    def need(pos, n, what):
        if pos + n > len(buf):
            raise FormatError(f"truncated {what}: need {n} bytes, have {len(buf) - pos}", pos)

    need(0, 8, "header")
    if buf[:4] != MAGIC:
        raise FormatError(f"bad magic {buf[:4]!r}", 0)
    version, rank, channels, _ = struct.unpack_from("<BBBB", buf, 4)
    if version != VERSION:
        raise UnsupportedVersionError(f"unsupported RDVF version {version}", 4)
    if rank not in (2, 3):
        raise FormatError(f"rank {rank} not supported", 5)
    if channels < 1:
        raise FormatError("zero channels", 6)
    pos = 8
    need(pos, 4 * rank, "extents")
    dims = struct.unpack_from(f"<{rank}I", buf, pos)
    pos += 4 * rank
    count = channels * int(np.prod(dims))
    need(pos, 4 * count, "voxel data")
    data = np.frombuffer(buf, dtype="<f4", count=count, offset=pos).astype(np.float32)
    pos += 4 * count
    need(pos, 4, "metadata length")
    (mlen,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    need(pos, mlen, "metadata")
    try:
        meta = json.loads(buf[pos:pos + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"bad metadata blob: {exc}", pos) from None
    pos += mlen
    if pos != len(buf):
        raise FormatError(f"{len(buf) - pos} trailing bytes", pos)
    return Volume(data.reshape((channels,) + tuple(dims)), meta)


def atomic_write_bytes(path, payload: bytes):
    path = os.fspath(path)
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_volume(path, v: Volume):
    atomic_write_bytes(path, encode_volume(v))


def read_volume(path) -> Volume:
    with open(path, "rb") as fh:
        return decode_volume(fh.read())
