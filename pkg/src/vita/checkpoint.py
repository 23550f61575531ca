"""Checkpoint blob format.

Little-endian layout: magic "VITA", format version u32, parameter count
u32; then per parameter: name length u16, UTF-8 name, rank u8, extents
u32 each, raw float32 payload. Round trips are bit-exact.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"VITA"
FORMAT_VERSION = 1


class CheckpointError(Exception):
    pass


def save_blob(path, arrays: dict[str, np.ndarray]) -> None:
    """Write named float32 arrays in insertion-independent (sorted) order."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", FORMAT_VERSION, len(arrays)))
        for name in sorted(arrays):
            arr = np.ascontiguousarray(arrays[name], dtype="<f4")
            encoded = name.encode("utf-8")
            f.write(struct.pack("<H", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<B", arr.ndim))
            for ext in arr.shape:
                f.write(struct.pack("<I", ext))
            f.write(arr.tobytes())


def load_blob(path) -> dict[str, np.ndarray]:
    path = Path(path)
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {blob[:4]!r}")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    out: dict[str, np.ndarray] = {}
    off = 12
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", blob, off)
        off += 2
        name = blob[off : off + name_len].decode("utf-8")
        off += name_len
        (rank,) = struct.unpack_from("<B", blob, off)
        off += 1
        shape = struct.unpack_from(f"<{rank}I", blob, off) if rank else ()
        off += 4 * rank
        n = int(np.prod(shape)) if rank else 1
        arr = np.frombuffer(blob, dtype="<f4", count=n, offset=off).reshape(shape)
        off += 4 * n
        out[name] = np.array(arr)  # own the memory, writable
    if off != len(blob):
        raise CheckpointError(f"{path}: trailing bytes after last parameter")
    return out
