"""Binary tensor blobs and the versioned checkpoint container.

Two on-disk formats live here:

* Tensor blob (dataset files): an 8-byte header of four little-endian
  uint16 dims (unused trailing dims set to 1) followed by the float32
  little-endian payload in C order. Readers strip trailing size-1 dims,
  so a (3, 64, 64) image round-trips with its rank intact.

* Checkpoint container: magic ``AVCK``, a uint16 format version, a JSON
  metadata document, then named tensors with an explicit dtype code.
  Parameters are stored in their native dtype (float32 or float64).
"""

from __future__ import annotations

import json
import struct
from typing import BinaryIO

import numpy as np

BLOB_MAX_DIM = 0xFFFF
BLOB_HEADER = struct.Struct("<4H")

CKPT_MAGIC = b"AVCK"
CKPT_VERSION = 1
# dtype code -> numpy dtype (little-endian on disk)
_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<f4"), 2: np.dtype("<i8")}
_DTYPE_CODES = {v: k for k, v in _DTYPES.items()}


def write_blob(fh: BinaryIO, arr: np.ndarray) -> tuple[int, int]:
    """Append one float32 tensor blob; returns (byte offset, byte length)."""
    arr = np.ascontiguousarray(arr, dtype="<f4")
    if arr.ndim > 4:
        raise ValueError(f"blob rank {arr.ndim} > 4")
    dims = list(arr.shape) + [1] * (4 - arr.ndim)
    if any(d < 1 or d > BLOB_MAX_DIM for d in dims):
        raise ValueError(f"blob dims out of uint16 range: {arr.shape}")
    offset = fh.tell()
    fh.write(BLOB_HEADER.pack(*dims))
    fh.write(arr.tobytes())
    return offset, BLOB_HEADER.size + arr.nbytes


def read_blob(buf, offset: int) -> np.ndarray:
    """Read one blob from a bytes-like buffer (bytes, mmap, np.memmap)."""
    mem = memoryview(buf)
    dims = BLOB_HEADER.unpack_from(mem, offset)
    count = int(np.prod(dims))
    start = offset + BLOB_HEADER.size
    data = np.frombuffer(mem, dtype="<f4", count=count, offset=start)
    shape = list(dims)
    while len(shape) > 1 and shape[-1] == 1:
        shape.pop()
    return data.reshape(shape).copy()


def save_checkpoint(path: str, tensors: dict[str, np.ndarray], meta: dict) -> None:
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<H", CKPT_VERSION))
        fh.write(struct.pack("<I", len(meta_bytes)))
        fh.write(meta_bytes)
        fh.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors.items():
            arr = np.ascontiguousarray(arr)
            dt = arr.dtype.newbyteorder("<")
            if dt not in _DTYPE_CODES:
                raise ValueError(f"unsupported checkpoint dtype {arr.dtype} for {name!r}")
            name_b = name.encode("utf-8")
            fh.write(struct.pack("<H", len(name_b)))
            fh.write(name_b)
            fh.write(struct.pack("<BB", _DTYPE_CODES[dt], arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.astype(dt, copy=False).tobytes())


def load_checkpoint(path: str) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    (version,) = struct.unpack_from("<H", raw, 4)
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    (meta_len,) = struct.unpack_from("<I", raw, 6)
    pos = 10
    meta = json.loads(raw[pos : pos + meta_len].decode("utf-8"))
    pos += meta_len
    (n_tensors,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    tensors: dict[str, np.ndarray] = {}
    for _ in range(n_tensors):
        (name_len,) = struct.unpack_from("<H", raw, pos)
        pos += 2
        name = raw[pos : pos + name_len].decode("utf-8")
        pos += name_len
        code, ndim = struct.unpack_from("<BB", raw, pos)
        pos += 2
        shape = struct.unpack_from(f"<{ndim}I", raw, pos)
        pos += 4 * ndim
        dt = _DTYPES.get(code)
        if dt is None:
            raise ValueError(f"{path}: unknown dtype code {code} for {name!r}")
        count = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(raw, dtype=dt, count=count, offset=pos).reshape(shape)
        pos += count * dt.itemsize
        tensors[name] = arr.copy()
    if pos != len(raw):
        raise ValueError(f"{path}: trailing bytes in checkpoint")
    return tensors, meta
