"""Binary checkpoint container.

Layout: ``b"SBNT"``, u32 LE version, then for each tensor: u32 LE name
length, UTF-8 name, u32 LE dtype code (0 = float32), u32 LE rank, u32 LE dims,
little-endian payload. Records run to end of file.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"SBNT"
VERSION = 1
DTYPE_CODES = {0: np.dtype("<f4")}


class CheckpointError(ValueError):
    pass


def dumps(state: dict[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<I", VERSION)]
    for name, array in state.items():
        encoded = name.encode("utf-8")
        arr = np.ascontiguousarray(array, dtype="<f4")
        parts.append(struct.pack("<I", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<II", 0, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def loads(blob: bytes) -> dict[str, np.ndarray]:
    if blob[:4] != MAGIC:
        raise CheckpointError("bad magic bytes")
    if len(blob) < 8:
        raise CheckpointError("truncated header")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    pos = 8
    state: dict[str, np.ndarray] = {}

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(blob):
            raise CheckpointError(f"truncated checkpoint at byte {pos}")
        chunk = blob[pos : pos + n]
        pos += n
        return chunk

    while pos < len(blob):
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode("utf-8")
        code, rank = struct.unpack("<II", take(8))
        if code not in DTYPE_CODES:
            raise CheckpointError(f"{name}: unknown dtype code {code}")
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        dtype = DTYPE_CODES[code]
        count = int(np.prod(dims, dtype=np.int64)) if rank else 1
        payload = take(count * dtype.itemsize)
        state[name] = np.frombuffer(payload, dtype=dtype).reshape(dims).astype(np.float32)
    return state


def save(path: str | Path, state: dict[str, np.ndarray]):
    Path(path).write_bytes(dumps(state))


def load(path: str | Path) -> dict[str, np.ndarray]:
    return loads(Path(path).read_bytes())
