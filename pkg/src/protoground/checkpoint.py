"""Self-describing binary checkpoints.

Layout (all little-endian): magic ``PGCK``, version u32, entry count u32,
then per entry a u16 name length, the UTF-8 name, a u8 rank, u32 dims, and
the payload as IEEE-754 doubles.  Non-numeric state (config JSON, RNG
state) is bit-packed into doubles with an explicit byte-length entry, so
round trips are exact.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import DataError

MAGIC = b"PGCK"
VERSION = 1


def save_checkpoint(path: Path, arrays: dict[str, np.ndarray]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", VERSION, len(arrays)))
        for name, arr in arrays.items():
            arr = np.ascontiguousarray(arr, dtype="<f8")
            encoded = name.encode()
            f.write(struct.pack("<H", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<B", arr.ndim))
            for dim in arr.shape:
                f.write(struct.pack("<I", dim))
            f.write(arr.tobytes())


def load_checkpoint(path: Path) -> dict[str, np.ndarray]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"missing checkpoint: {path}")
    with open(path, "rb") as f:
        if f.read(4) != MAGIC:
            raise DataError(f"{path}: not a checkpoint file")
        version, count = struct.unpack("<II", f.read(8))
        if version != VERSION:
            raise DataError(f"{path}: unsupported checkpoint version {version}")
        out = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<H", f.read(2))
            name = f.read(name_len).decode()
            (ndim,) = struct.unpack("<B", f.read(1))
            shape = tuple(struct.unpack("<I", f.read(4))[0] for _ in range(ndim))
            n = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(f.read(8 * n), dtype="<f8").reshape(shape)
            out[name] = data.copy()
    return out


def pack_bytes(payload: bytes) -> tuple[np.ndarray, int]:
    """Bit-preserving bytes -> doubles packing (pad to 8-byte multiple)."""
    padded = payload + b"\x00" * (-len(payload) % 8)
    return np.frombuffer(padded, dtype="<f8").copy(), len(payload)


def unpack_bytes(arr: np.ndarray, nbytes: int) -> bytes:
    return np.ascontiguousarray(arr, dtype="<f8").tobytes()[:nbytes]
