"""Binary tensor container used for corpus tensors and checkpoint weights.

File layout: magic ``CVT1``, one dtype byte (0 = uint8, 1 = float32), one
rank byte, ``rank`` little-endian uint32 dimensions, then the row-major
little-endian payload. One tensor per file.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"CVT1"

_CODE_TO_DTYPE = {0: np.dtype("uint8"), 1: np.dtype("<f4")}
_DTYPE_TO_CODE = {np.dtype("uint8"): 0, np.dtype("<f4"): 1}


class ContainerError(ValueError):
    """Raised when a container file is malformed or uses an unsupported dtype."""


def tensor_bytes(array: np.ndarray) -> bytes:
    """Serialize an array; only uint8 and float32 payloads are representable."""
    arr = np.asarray(array)
    if arr.ndim and not arr.flags["C_CONTIGUOUS"]:
        arr = np.ascontiguousarray(arr)  # keeps 0-d shape, unlike calling it blindly
    if arr.dtype == np.float64 or arr.dtype == np.float32:
        arr = arr.astype("<f4", copy=False)
    code = _DTYPE_TO_CODE.get(arr.dtype)
    if code is None:
        raise ContainerError(f"unsupported dtype {arr.dtype}; use uint8 or float32")
    if arr.ndim > 255:
        raise ContainerError(f"rank {arr.ndim} exceeds container limit 255")
    header = MAGIC + struct.pack("<BB", code, arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + arr.tobytes()


def write_tensor(path: str | Path, array: np.ndarray) -> Path:
    path = Path(path)
    path.write_bytes(tensor_bytes(array))
    return path


def tensor_from_bytes(raw: bytes, source: str = "<bytes>") -> np.ndarray:
    if len(raw) < 6 or raw[:4] != MAGIC:
        raise ContainerError(f"{source}: missing CVT1 magic")
    code, rank = struct.unpack_from("<BB", raw, 4)
    dtype = _CODE_TO_DTYPE.get(code)
    if dtype is None:
        raise ContainerError(f"{source}: unknown dtype code {code}")
    offset = 6
    if len(raw) < offset + 4 * rank:
        raise ContainerError(f"{source}: truncated shape header")
    shape = struct.unpack_from(f"<{rank}I", raw, offset)
    offset += 4 * rank
    count = int(np.prod(shape, dtype=np.int64)) if rank else 1
    expected = offset + count * dtype.itemsize
    if len(raw) != expected:
        raise ContainerError(
            f"{source}: payload is {len(raw) - offset} bytes, expected {count * dtype.itemsize}"
        )
    data = np.frombuffer(raw, dtype=dtype, count=count, offset=offset)
    return data.reshape(shape).copy()


def read_tensor(path: str | Path) -> np.ndarray:
    path = Path(path)
    return tensor_from_bytes(path.read_bytes(), source=str(path))
