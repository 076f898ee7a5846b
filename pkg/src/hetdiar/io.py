"""Binary container formats.

Two kinds of file are shared between pipeline stages:

* feature dumps: a 16-byte header (4-byte magic ``HDFM``, little-endian
  u32 frame count ``T``, u32 dimension ``D``, 4 reserved zero bytes)
  followed by the ``T x D`` matrix as little-endian f32, row-major;
* model containers: a 4-byte magic, u32 format version, u32 length of a
  JSON metadata block, the JSON bytes, then a sequence of shape-tagged
  tensors (u32 ndim, u32 dims..., raw little-endian payload) whose dtype
  is fixed by the container (f32 for checkpoints, f64 for the PLDA and
  VB models).
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import DataError

FEATURE_MAGIC = b"HDFM"
CONTAINER_VERSION = 1


def write_feature_dump(path, frames: np.ndarray) -> None:
    frames = np.ascontiguousarray(frames, dtype="<f4")
    if frames.ndim != 2:
        raise DataError(f"feature dump expects a 2-D matrix, got shape {frames.shape}")
    t, d = frames.shape
    with open(path, "wb") as f:
        f.write(FEATURE_MAGIC)
        f.write(struct.pack("<II", t, d))
        f.write(b"\x00" * 4)
        f.write(frames.tobytes())


def read_feature_dump(path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise DataError(f"feature dump not found: {path}")
    raw = path.read_bytes()
    if len(raw) < 16 or raw[:4] != FEATURE_MAGIC:
        raise DataError(f"not a feature dump (bad magic): {path}")
    t, d = struct.unpack("<II", raw[4:12])
    payload = np.frombuffer(raw[16:], dtype="<f4")
    if payload.size != t * d:
        raise DataError(
            f"feature dump {path} truncated: header says {t}x{d}, "
            f"payload has {payload.size} values"
        )
    return payload.reshape(t, d).astype(np.float64)


def _write_tensor(f, arr: np.ndarray, dtype: str) -> None:
    arr = np.ascontiguousarray(arr, dtype=dtype)
    f.write(struct.pack("<I", arr.ndim))
    f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    f.write(arr.tobytes())


def _read_tensor(f, dtype: str) -> np.ndarray:
    (ndim,) = struct.unpack("<I", f.read(4))
    shape = struct.unpack(f"<{ndim}I", f.read(4 * ndim))
    n = int(np.prod(shape)) if shape else 1
    itemsize = np.dtype(dtype).itemsize
    buf = f.read(n * itemsize)
    if len(buf) != n * itemsize:
        raise DataError("model container truncated while reading tensor block")
    return np.frombuffer(buf, dtype=dtype).reshape(shape).astype(np.float64)


def write_container(path, magic: bytes, header: dict, tensors, dtype: str) -> None:
    """Write a model container with ``tensors`` in the given order."""
    if len(magic) != 4:
        raise ValueError("magic must be 4 bytes")
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(magic)
        f.write(struct.pack("<II", CONTAINER_VERSION, len(blob)))
        f.write(blob)
        for arr in tensors:
            _write_tensor(f, arr, dtype)


def read_container(path, magic: bytes, dtype: str, n_tensors: int | None = None):
    """Read back ``(header, tensors)``; validates magic and version.

    With ``n_tensors=None``, tensor blocks are read until end of file.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"model file not found: {path}")
    with open(path, "rb") as f:
        if f.read(4) != magic:
            raise DataError(f"bad magic in {path}: expected {magic!r}")
        version, blob_len = struct.unpack("<II", f.read(8))
        if version != CONTAINER_VERSION:
            raise DataError(f"unsupported container version {version} in {path}")
        header = json.loads(f.read(blob_len).decode("utf-8"))
        tensors = []
        if n_tensors is None:
            while True:
                probe = f.read(4)
                if len(probe) < 4:
                    break
                f.seek(-4, 1)
                tensors.append(_read_tensor(f, dtype))
        else:
            tensors = [_read_tensor(f, dtype) for _ in range(n_tensors)]
    return header, tensors
