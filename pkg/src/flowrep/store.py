"""Binary flow-store format ("CFLW").

Layout, little-endian:

    magic    4 bytes  b"CFLW"
    version  u16
    labelw   u16      fixed label width in bytes
    count    u64
    schema   8 bytes  first 8 bytes of the vector-schema digest
    records  count * (3040 * f32 + 4 device-ip octets + label bytes)
    crc32    u32      over the records region

Re-reading a store yields bit-identical flows.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .schema import (
    SCHEMA,
    VECTOR_LENGTH,
    CustomFlow,
    FlowValidationError,
    validate_flow,
)

MAGIC = b"CFLW"
VERSION = 1
LABEL_WIDTH = 32
_HEADER = struct.Struct("<4sHHQ8s")
_RECORD_TAIL = 4 + LABEL_WIDTH
RECORD_SIZE = VECTOR_LENGTH * 4 + _RECORD_TAIL


class StoreFormatError(IOError):
    pass


@dataclass(frozen=True)
class StoreSummary:
    path: str
    count: int
    checksum: int


def _encode_ip(ip: str) -> bytes:
    parts = ip.split(".")
    if len(parts) != 4:
        raise FlowValidationError(f"device_ip must be dotted IPv4, got {ip!r}")
    return bytes(int(p) for p in parts)


def _decode_ip(raw: bytes) -> str:
    return ".".join(str(b) for b in raw)


def _encode_label(label: str | None) -> bytes:
    raw = (label or "").encode("utf-8")
    if len(raw) >= LABEL_WIDTH:
        raise FlowValidationError(f"device_label longer than {LABEL_WIDTH - 1} bytes: {label!r}")
    return raw.ljust(LABEL_WIDTH, b"\x00")


def write_flow_store(flows: Sequence[CustomFlow], path: str | Path) -> StoreSummary:
    """Validate and write flows; returns (count, checksum) summary."""
    path = Path(path)
    chunks = []
    for i, flow in enumerate(flows):
        try:
            validate_flow(flow)
        except FlowValidationError as e:
            raise FlowValidationError(f"flow {i}: {e}") from None
        chunks.append(flow.to_slots().astype("<f4").tobytes())
        chunks.append(_encode_ip(flow.device_ip))
        chunks.append(_encode_label(flow.device_label))
    records = b"".join(chunks)
    checksum = zlib.crc32(records)
    header = _HEADER.pack(MAGIC, VERSION, LABEL_WIDTH, len(chunks) // 3, bytes.fromhex(SCHEMA.digest()[:16]))
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(records)
        fh.write(struct.pack("<I", checksum))
    return StoreSummary(path=str(path), count=len(chunks) // 3, checksum=checksum)


def read_flow_store(path: str | Path) -> list[CustomFlow]:
    """Read a store back; every record must round-trip bit-exactly."""
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size + 4:
        raise StoreFormatError(f"{path}: file too short for a flow store")
    magic, version, labelw, count, schema_digest = _HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise StoreFormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise StoreFormatError(f"{path}: unsupported version {version}")
    if labelw != LABEL_WIDTH:
        raise StoreFormatError(f"{path}: unexpected label width {labelw}")
    if schema_digest != bytes.fromhex(SCHEMA.digest()[:16]):
        raise StoreFormatError(f"{path}: schema digest mismatch")
    record_size = VECTOR_LENGTH * 4 + 4 + labelw
    body = raw[_HEADER.size : _HEADER.size + count * record_size]
    if len(body) != count * record_size:
        raise StoreFormatError(f"{path}: truncated record region ({len(body)} of {count * record_size} bytes)")
    tail = raw[_HEADER.size + count * record_size :]
    if len(tail) < 4:
        raise StoreFormatError(f"{path}: missing checksum")
    (stored_crc,) = struct.unpack("<I", tail[:4])
    if zlib.crc32(body) != stored_crc:
        raise StoreFormatError(f"{path}: checksum mismatch")

    flows = []
    for i in range(count):
        off = i * record_size
        slots = np.frombuffer(body, dtype="<f4", count=VECTOR_LENGTH, offset=off)
        ip = _decode_ip(body[off + VECTOR_LENGTH * 4 : off + VECTOR_LENGTH * 4 + 4])
        label_raw = body[off + VECTOR_LENGTH * 4 + 4 : off + record_size].rstrip(b"\x00")
        label = label_raw.decode("utf-8") if label_raw else None
        flows.append(CustomFlow.from_slots(np.array(slots, dtype=np.float32), ip, label))
    return flows


def read_store_matrix(path: str | Path) -> tuple[np.ndarray, list[str], list[str | None]]:
    """Bulk read: (N,3040) float32 slot matrix, device ips, labels."""
    flows = read_flow_store(path)
    if not flows:
        return np.empty((0, VECTOR_LENGTH), dtype=np.float32), [], []
    mat = np.stack([f.to_slots() for f in flows])
    return mat, [f.device_ip for f in flows], [f.device_label for f in flows]


def read_store_unlabeled(path: str | Path) -> tuple[np.ndarray, list[str]]:
    """Bulk read that never decodes labels (encoder-training data path).

    Representation learning is label-blind by construction: the label
    bytes are skipped, so no caller downstream of this function can read
    them even accidentally.
    """
    flows = read_flow_store(path)
    if not flows:
        return np.empty((0, VECTOR_LENGTH), dtype=np.float32), []
    mat = np.stack([f.to_slots() for f in flows])
    return mat, [f.device_ip for f in flows]
