"""Binary checkpoint format.

::

    b"CVCP"                     magic
    u16                         format version (1)
    u32                         tensor count
    per tensor, sorted by name:
        u32 + bytes             UTF-8 name
        u32 + rank * u32        shape
        prod(shape) * f32       values
    u32 + bytes                 canonical JSON config

Integers and floats are little-endian. Values are stored as float32 and
widened to float64 on load.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .. import jsonio
from ..errors import DataError

MAGIC = b"CVCP"
VERSION = 1


def encode_checkpoint(arrays: dict[str, np.ndarray], config: dict) -> bytes:
    parts = [MAGIC, struct.pack("<HI", VERSION, len(arrays))]
    for name in sorted(arrays):
        value = np.asarray(arrays[name])
        raw_name = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw_name)) + raw_name)
        parts.append(struct.pack(f"<I{value.ndim}I", value.ndim, *value.shape))
        parts.append(np.ascontiguousarray(value, dtype="<f4").tobytes())
    blob = jsonio.dumps(config).encode("utf-8")
    parts.append(struct.pack("<I", len(blob)) + blob)
    return b"".join(parts)


def decode_checkpoint(raw: bytes) -> tuple[dict[str, np.ndarray], dict]:
    view = memoryview(raw)
    pos = 0

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise DataError("truncated checkpoint")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    if bytes(take(4)) != MAGIC:
        raise DataError("not a checkpoint: bad magic")
    version, count = struct.unpack("<HI", take(6))
    if version != VERSION:
        raise DataError(f"unsupported checkpoint version {version}")
    arrays = {}
    for _ in range(count):
        (n_name,) = struct.unpack("<I", take(4))
        name = bytes(take(n_name)).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        size = int(np.prod(shape, dtype=np.int64))
        arrays[name] = np.frombuffer(take(4 * size), dtype="<f4").astype(np.float64).reshape(shape)
    (n_blob,) = struct.unpack("<I", take(4))
    config = json.loads(bytes(take(n_blob)).decode("utf-8"))
    if pos != len(view):
        raise DataError("trailing bytes after checkpoint config")
    return arrays, config


def save_checkpoint(path, arrays: dict[str, np.ndarray], config: dict) -> None:
    Path(path).write_bytes(encode_checkpoint(arrays, config))


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"missing checkpoint {path}")
    try:
        return decode_checkpoint(path.read_bytes())
    except DataError as exc:
        raise DataError(f"{path}: {exc}") from exc
