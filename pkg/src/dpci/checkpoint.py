"""Named-array checkpoint files.

Flat binary layout: magic "IDEA", u32 version (=1), u32 entry count, then per
entry a u16 name length, the UTF-8 name, a u8 rank, u32 dims, and the array
payload as little-endian f32.  Writes are atomic (temp file + rename).
"""

from __future__ import annotations

import os
import struct

import numpy as np

MAGIC = b"IDEA"
VERSION = 1


class CheckpointError(ValueError):
    """Malformed checkpoint file."""


def save_arrays(path, arrays: dict[str, np.ndarray]):
    """Write an ordered name -> array mapping; values are stored as f32."""
    blob = bytearray()
    blob += MAGIC
    blob += struct.pack("<II", VERSION, len(arrays))
    for name, arr in arrays.items():
        data = np.ascontiguousarray(arr, dtype="<f4")
        encoded = name.encode("utf-8")
        if len(encoded) > 0xFFFF:
            raise CheckpointError(f"parameter name too long: {name[:40]}...")
        blob += struct.pack("<H", len(encoded))
        blob += encoded
        blob += struct.pack("<B", data.ndim)
        blob += struct.pack(f"<{data.ndim}I", *data.shape)
        blob += data.tobytes()
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(blob)
    os.replace(tmp, path)


def load_arrays(path, dtype=np.float32) -> dict[str, np.ndarray]:
    """Read a checkpoint back into an ordered name -> array mapping."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MAGIC:
        raise CheckpointError(f"bad magic in {path}: {blob[:4]!r}")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} in {path}")
    out: dict[str, np.ndarray] = {}
    off = 12
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", blob, off)
        off += 2
        name = blob[off : off + name_len].decode("utf-8")
        off += name_len
        (rank,) = struct.unpack_from("<B", blob, off)
        off += 1
        dims = struct.unpack_from(f"<{rank}I", blob, off)
        off += 4 * rank
        n = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(blob, dtype="<f4", count=n, offset=off).reshape(dims)
        off += 4 * n
        out[name] = arr.astype(dtype)
    if off != len(blob):
        raise CheckpointError(f"trailing bytes in {path}")
    return out
