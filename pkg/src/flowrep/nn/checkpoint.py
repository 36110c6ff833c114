"""Model checkpoint serialization ("FRNN") and parameter counting.

Layout, little-endian:

    magic   4 bytes  b"FRNN"
    version u16
    seed    u64
    config  u32 length + JSON bytes
    table   u32 entry count, then per entry:
            name (u16 length + utf-8), dtype code u8, rank u8,
            dims (u32 each), raw array bytes

Arrays round-trip bit-exactly.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"FRNN"
VERSION = 1
_DTYPES = {0: "<f4", 1: "<f8", 2: "<i8"}
_DTYPE_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1, np.dtype("int64"): 2}


class CheckpointError(IOError):
    pass


def save_checkpoint(path, config: dict, arrays: dict[str, np.ndarray], seed: int = 0) -> None:
    blob = json.dumps(config, sort_keys=True).encode()
    parts = [MAGIC, struct.pack("<HQ", VERSION, seed), struct.pack("<I", len(blob)), blob]
    parts.append(struct.pack("<I", len(arrays)))
    for name, arr in arrays.items():
        code = _DTYPE_CODES.get(arr.dtype)
        if code is None:
            raise CheckpointError(f"unsupported dtype {arr.dtype} for {name!r}")
        raw = name.encode()
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<BB", code, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr).astype(_DTYPES[code]).tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray], int]:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:4]!r}")
    version, seed = struct.unpack_from("<HQ", raw, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    off = 14
    (blob_len,) = struct.unpack_from("<I", raw, off)
    off += 4
    config = json.loads(raw[off : off + blob_len].decode())
    off += blob_len
    (count,) = struct.unpack_from("<I", raw, off)
    off += 4
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", raw, off)
        off += 2
        name = raw[off : off + name_len].decode()
        off += name_len
        code, rank = struct.unpack_from("<BB", raw, off)
        off += 2
        shape = struct.unpack_from(f"<{rank}I", raw, off)
        off += 4 * rank
        dt = np.dtype(_DTYPES[code])
        nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        arr = np.frombuffer(raw[off : off + nbytes], dtype=dt).reshape(shape)
        off += nbytes
        arrays[name] = np.array(arr)
    if off != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - off} trailing bytes")
    return config, arrays, seed


def count_parameters(named_params) -> int:
    """Total trainable parameter count.

    Accepts an object with named_params() (Sequential / model classes) or
    an iterable of (name, layer, key, array) tuples.
    """
    if hasattr(named_params, "named_params"):
        named_params = named_params.named_params()
    return int(sum(arr.size for *_ignored, arr in named_params))
