"""Binary checkpoint container: named float32 tensors.

Layout (all integers little-endian):
    magic "SDTR" (4 bytes)
    u32 version = 1
    u64 entry count
    per entry: u32 name length, UTF-8 name, u8 dtype tag (0 = f32),
               u8 rank, rank x u64 dims, raw little-endian f32 payload
    trailing u64: byte length of everything before the trailer

Non-tensor state (config text, seeds, rng words, epoch counters) rides along
as reserved "__meta__.*" entries encoded into exact small-integer f32 values,
so the round trip stays bit-identical.
"""

from __future__ import annotations

import os
import struct

import numpy as np

MAGIC = b"SDTR"
VERSION = 1
DTYPE_F32 = 0


def save_checkpoint(path: str, entries: dict[str, np.ndarray]) -> None:
    blob = bytearray()
    blob += MAGIC
    blob += struct.pack("<I", VERSION)
    blob += struct.pack("<Q", len(entries))
    for name, arr in entries.items():
        data = np.ascontiguousarray(arr, dtype="<f4")
        encoded = name.encode("utf-8")
        blob += struct.pack("<I", len(encoded))
        blob += encoded
        blob += struct.pack("<BB", DTYPE_F32, data.ndim)
        for dim in data.shape:
            blob += struct.pack("<Q", dim)
        blob += data.tobytes()
    blob += struct.pack("<Q", len(blob))
    tmp = path + ".tmp"
    try:
        with open(tmp, "wb") as f:
            f.write(bytes(blob))
        os.replace(tmp, path)
    except OSError:
        if os.path.exists(tmp):
            os.remove(tmp)
        raise


def load_checkpoint(path: str) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 24 or blob[:4] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint file (bad magic)")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    (declared_len,) = struct.unpack_from("<Q", blob, len(blob) - 8)
    if declared_len != len(blob) - 8:
        raise ValueError(f"{path}: length check failed "
                         f"({declared_len} declared, {len(blob) - 8} actual)")
    (count,) = struct.unpack_from("<Q", blob, 8)
    offset = 16
    entries: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        name = blob[offset:offset + name_len].decode("utf-8")
        offset += name_len
        dtype_tag, rank = struct.unpack_from("<BB", blob, offset)
        offset += 2
        if dtype_tag != DTYPE_F32:
            raise ValueError(f"{path}: unknown dtype tag {dtype_tag} for {name!r}")
        dims = struct.unpack_from(f"<{rank}Q", blob, offset) if rank else ()
        offset += 8 * rank
        size = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(blob, dtype="<f4", count=size, offset=offset).reshape(dims)
        offset += 4 * size
        entries[name] = arr.copy()
    return entries


# -- meta encoding helpers ----------------------------------------------------------


def text_to_array(text: str) -> np.ndarray:
    """UTF-8 bytes as exact f32 values (each byte < 2^24 so round trips exactly)."""
    return np.frombuffer(text.encode("utf-8"), dtype=np.uint8).astype(np.float32)


def array_to_text(arr: np.ndarray) -> str:
    return arr.astype(np.uint8).tobytes().decode("utf-8")


def u64_to_array(value: int) -> np.ndarray:
    """One u64 as four 16-bit chunks, each exactly representable in f32."""
    chunks = [(value >> (16 * i)) & 0xFFFF for i in range(4)]
    return np.array(chunks, dtype=np.float32)


def array_to_u64(arr: np.ndarray) -> int:
    chunks = [int(round(float(v))) for v in arr]
    return sum(c << (16 * i) for i, c in enumerate(chunks))
