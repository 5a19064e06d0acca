"""Binary tensor container.

Layout: ``b"AMFT"``, version (u32), rank (u32), one u64 per extent, then the
row-major little-endian float64 payload.
"""
import struct
from pathlib import Path

import numpy as np

MAGIC = b"AMFT"
VERSION = 1


class ContainerError(ValueError):
    pass


def to_bytes(array) -> bytes:
    arr = np.ascontiguousarray(np.asarray(array, dtype="<f8"))
    header = MAGIC + struct.pack("<II", VERSION, arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return header + arr.tobytes(order="C")


def from_bytes(buf: bytes) -> np.ndarray:
    if len(buf) < 12 or buf[:4] != MAGIC:
        raise ContainerError("not an AMFT container (bad magic)")
    version, rank = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise ContainerError(f"unsupported container version {version}")
    offset = 12 + 8 * rank
    if len(buf) < offset:
        raise ContainerError("truncated header")
    shape = struct.unpack_from(f"<{rank}Q", buf, 12)
    count = int(np.prod(shape, dtype=np.int64)) if rank else 1
    if len(buf) != offset + 8 * count:
        raise ContainerError(f"payload size mismatch: expected {8 * count} bytes, got {len(buf) - offset}")
    return np.frombuffer(buf, dtype="<f8", offset=offset, count=count).reshape(shape).astype(np.float64)


def save(path, array):
    Path(path).write_bytes(to_bytes(array))


def load(path) -> np.ndarray:
    return from_bytes(Path(path).read_bytes())
