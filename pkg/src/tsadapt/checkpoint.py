"""Flat binary checkpoint format for named float64 tensors.

Layout (all integers little-endian):

    magic   4 bytes  b"ADTN"
    version u32
    then, repeated until EOF, one record per tensor:
        name_len u32
        name     UTF-8 bytes
        rank     u64
        dims     u64 * rank
        payload  f64 * prod(dims), little-endian, row-major

Round-trips are bit-exact; `file_hash` over the bytes is the identity of a
parameter snapshot (used for teacher-immutability checks).
"""

from __future__ import annotations

import hashlib
import struct
from pathlib import Path

import numpy as np

MAGIC = b"ADTN"
VERSION = 1


class CheckpointError(ValueError):
    """Malformed checkpoint file."""


def save_tensors(path: str | Path, tensors: dict[str, np.ndarray]) -> None:
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        for name, arr in tensors.items():
            arr = np.asarray(arr, dtype=np.float64)  # keeps 0-d shape intact
            nb = name.encode("utf-8")
            fh.write(struct.pack("<I", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<Q", arr.ndim))
            for d in arr.shape:
                fh.write(struct.pack("<Q", d))
            fh.write(arr.astype("<f8", copy=False).tobytes(order="C"))


def load_tensors(path: str | Path) -> dict[str, np.ndarray]:
    path = Path(path)
    blob = path.read_bytes()
    if blob[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {blob[:4]!r}")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    pos = 8
    out: dict[str, np.ndarray] = {}
    while pos < len(blob):
        (name_len,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        name = blob[pos : pos + name_len].decode("utf-8")
        pos += name_len
        (rank,) = struct.unpack_from("<Q", blob, pos)
        pos += 8
        dims = struct.unpack_from(f"<{rank}Q", blob, pos)
        pos += 8 * rank
        count = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=pos).reshape(dims)
        pos += 8 * count
        out[name] = arr.astype(np.float64)  # own the memory
    return out


def file_hash(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
