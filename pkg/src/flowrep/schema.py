"""Domain types and the fixed 3040-slot flow vector layout.

Every flow record serializes to exactly 3040 real slots:

    [0]        relative flow time (seconds from capture start)
    [1..4]     remote IPv4 octets O1..O4
    [5]        transport protocol number
    [6]        remote port
    [7]        device port
    [8]        byte count (whole record)
    [9]        packet count (whole record)
    [10..19]   first-10-packet time offsets (ms from flow start)
    [20..29]   first-10-packet sizes (bytes on the wire)
    [30..39]   first-10-packet directions (1 = device-to-network)
    [40..3039] payload bytes with delimiter/padding markers

Marker values occupy slots that carry no measured data and never collide
with valid field values (which are all non-negative).
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np

VECTOR_LENGTH = 3040
PAYLOAD_SLOTS = 3000
META_SLOTS = 10

PAD = -255.0
DELIM_PKT = -4.0
DELIM_END = -8.0
MARKERS = (PAD, DELIM_PKT, DELIM_END)

# Slot positions of each region.
REL_TIME = 0
OCTETS = slice(1, 5)
PROTOCOL = 5
REMOTE_PORT = 6
DEVICE_PORT = 7
BYTE_COUNT = 8
PACKET_COUNT = 9
TIME_OFFSETS = slice(10, 20)
SIZES = slice(20, 30)
DIRECTIONS = slice(30, 40)
PAYLOAD = slice(40, 3040)

CATEGORICAL_SLOTS = (PROTOCOL, REMOTE_PORT, DEVICE_PORT)

PROTO_TCP = 6
PROTO_UDP = 17


@dataclass(frozen=True)
class FieldSpec:
    """One contiguous span of the 3040-slot vector."""

    name: str
    start: int
    length: int
    lo: float
    hi: float
    integer: bool = True
    categorical: bool = False
    markers_ok: bool = False

    @property
    def stop(self) -> int:
        return self.start + self.length

    @property
    def indices(self) -> slice:
        return slice(self.start, self.stop)


# Field ranges: octet and port bounds follow the source data; the rest are
# conservative physical bounds recorded here so tests can be exact.
FIELDS: tuple[FieldSpec, ...] = (
    FieldSpec("rel_flow_time", 0, 1, 0.0, 86400.0, integer=False),
    FieldSpec("octet_1", 1, 1, 0.0, 255.0),
    FieldSpec("octet_2", 2, 1, 0.0, 255.0),
    FieldSpec("octet_3", 3, 1, 0.0, 255.0),
    FieldSpec("octet_4", 4, 1, 0.0, 255.0),
    FieldSpec("protocol", 5, 1, 0.0, 255.0, categorical=True),
    FieldSpec("remote_port", 6, 1, 1.0, 65535.0, categorical=True),
    FieldSpec("device_port", 7, 1, 1.0, 65535.0, categorical=True),
    FieldSpec("byte_count", 8, 1, 0.0, 1_000_000.0),
    FieldSpec("packet_count", 9, 1, 1.0, 10_000.0),
    FieldSpec("pkt_time_offsets", 10, 10, 0.0, 60_000.0, markers_ok=True),
    FieldSpec("pkt_sizes", 20, 10, 0.0, 1514.0, markers_ok=True),
    FieldSpec("pkt_directions", 30, 10, 0.0, 1.0, markers_ok=True),
    FieldSpec("payload", 40, 3000, 0.0, 255.0, markers_ok=True),
)


class VectorSchema:
    """Index map over the 3040-slot vector, shared by every module."""

    def __init__(self, fields: Sequence[FieldSpec] = FIELDS):
        self.fields = tuple(fields)
        self.by_name = {f.name: f for f in self.fields}
        self.length = max(f.stop for f in self.fields)
        self._lo = np.empty(self.length)
        self._hi = np.empty(self.length)
        self._integer = np.zeros(self.length, dtype=bool)
        self._markers_ok = np.zeros(self.length, dtype=bool)
        for f in self.fields:
            sl = f.indices
            self._lo[sl] = f.lo
            self._hi[sl] = f.hi
            self._integer[sl] = f.integer
            self._markers_ok[sl] = f.markers_ok

    @property
    def lo(self) -> np.ndarray:
        return self._lo

    @property
    def hi(self) -> np.ndarray:
        return self._hi

    @property
    def integer_mask(self) -> np.ndarray:
        return self._integer

    @property
    def markers_ok_mask(self) -> np.ndarray:
        return self._markers_ok

    def field_at(self, index: int) -> FieldSpec:
        for f in self.fields:
            if f.start <= index < f.stop:
                return f
        raise IndexError(f"slot {index} outside [0,{self.length})")

    def to_json(self) -> dict:
        return {
            "vector_length": self.length,
            "markers": {"PAD": PAD, "DELIM_PKT": DELIM_PKT, "DELIM_END": DELIM_END},
            "fields": [
                {
                    "name": f.name,
                    "start": f.start,
                    "length": f.length,
                    "range": [f.lo, f.hi],
                    "integer": f.integer,
                    "categorical": f.categorical,
                    "markers_ok": f.markers_ok,
                }
                for f in self.fields
            ],
        }

    def digest(self) -> str:
        blob = json.dumps(self.to_json(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


SCHEMA = VectorSchema()


class FlowKey(NamedTuple):
    device_ip: str
    remote_ip: str
    device_port: int
    remote_port: int
    protocol: int


class FlowValidationError(ValueError):
    pass


def _f32(x: float) -> float:
    return float(np.float32(x))


def _meta_array(values, fill_count: int | None = None) -> np.ndarray:
    arr = np.full(META_SLOTS, PAD, dtype=np.float32)
    vals = np.asarray(values, dtype=np.float32)
    if vals.size > META_SLOTS:
        raise FlowValidationError(f"metadata array longer than {META_SLOTS}")
    arr[: vals.size] = vals
    return arr


def pack_payload(segments: Iterable[bytes]) -> np.ndarray:
    """Concatenate per-packet payloads into the 3000-slot payload region.

    Non-empty payloads are joined by DELIM_PKT and terminated by DELIM_END;
    empty payloads contribute nothing (adjacent delimiters collapse). The
    canonical sequence is truncated to 3000 slots, so DELIM_END is omitted
    when payload data fills the whole region. Remaining slots are PAD.
    """
    region = np.full(PAYLOAD_SLOTS, PAD, dtype=np.float32)
    pos = 0
    wrote_any = False
    for seg in segments:
        if not seg:
            continue
        if wrote_any:
            if pos >= PAYLOAD_SLOTS:
                return region
            region[pos] = DELIM_PKT
            pos += 1
        take = min(len(seg), PAYLOAD_SLOTS - pos)
        if take > 0:
            region[pos : pos + take] = np.frombuffer(seg[:take], dtype=np.uint8)
            pos += take
        wrote_any = True
        if pos >= PAYLOAD_SLOTS:
            return region
    if wrote_any and pos < PAYLOAD_SLOTS:
        region[pos] = DELIM_END
    return region


@dataclass(frozen=True, eq=False)
class CustomFlow:
    """One enriched flow record (immutable after construction).

    Metadata arrays hold PAD in positions beyond the packet count; the
    payload region mixes byte values with delimiter/padding markers.
    Numeric fields are canonicalized to their 32-bit representation at
    construction so store round-trips are bit-exact.
    """

    rel_flow_time: float
    remote_ip_octets: tuple[int, int, int, int]
    protocol: int
    remote_port: int
    device_port: int
    byte_count: int
    packet_count: int
    pkt_time_offsets: np.ndarray
    pkt_sizes: np.ndarray
    pkt_directions: np.ndarray
    payload: np.ndarray
    device_ip: str
    device_label: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "rel_flow_time", _f32(self.rel_flow_time))
        object.__setattr__(self, "remote_ip_octets", tuple(int(o) for o in self.remote_ip_octets))
        object.__setattr__(self, "byte_count", int(_f32(self.byte_count)))
        object.__setattr__(self, "packet_count", int(self.packet_count))
        for name in ("pkt_time_offsets", "pkt_sizes", "pkt_directions"):
            arr = np.asarray(getattr(self, name), dtype=np.float32)
            if arr.shape != (META_SLOTS,):
                arr = _meta_array(arr)
            object.__setattr__(self, name, arr)
        pl = np.asarray(self.payload, dtype=np.float32)
        if pl.shape != (PAYLOAD_SLOTS,):
            raise FlowValidationError(f"payload must have {PAYLOAD_SLOTS} slots, got {pl.shape}")
        object.__setattr__(self, "payload", pl)

    @property
    def remote_ip(self) -> str:
        return ".".join(str(o) for o in self.remote_ip_octets)

    @property
    def flow_key(self) -> FlowKey:
        return FlowKey(self.device_ip, self.remote_ip, self.device_port, self.remote_port, self.protocol)

    def to_slots(self) -> np.ndarray:
        slots = np.empty(VECTOR_LENGTH, dtype=np.float32)
        slots[REL_TIME] = self.rel_flow_time
        slots[OCTETS] = self.remote_ip_octets
        slots[PROTOCOL] = self.protocol
        slots[REMOTE_PORT] = self.remote_port
        slots[DEVICE_PORT] = self.device_port
        slots[BYTE_COUNT] = self.byte_count
        slots[PACKET_COUNT] = self.packet_count
        slots[TIME_OFFSETS] = self.pkt_time_offsets
        slots[SIZES] = self.pkt_sizes
        slots[DIRECTIONS] = self.pkt_directions
        slots[PAYLOAD] = self.payload
        return slots

    @classmethod
    def from_slots(cls, slots: np.ndarray, device_ip: str, device_label: str | None = None) -> "CustomFlow":
        slots = np.asarray(slots, dtype=np.float32)
        if slots.shape != (VECTOR_LENGTH,):
            raise FlowValidationError(f"expected {VECTOR_LENGTH} slots, got {slots.shape}")
        return cls(
            rel_flow_time=float(slots[REL_TIME]),
            remote_ip_octets=tuple(int(v) for v in slots[OCTETS]),
            protocol=int(slots[PROTOCOL]),
            remote_port=int(slots[REMOTE_PORT]),
            device_port=int(slots[DEVICE_PORT]),
            byte_count=int(slots[BYTE_COUNT]),
            packet_count=int(slots[PACKET_COUNT]),
            pkt_time_offsets=slots[TIME_OFFSETS].copy(),
            pkt_sizes=slots[SIZES].copy(),
            pkt_directions=slots[DIRECTIONS].copy(),
            payload=slots[PAYLOAD].copy(),
            device_ip=device_ip,
            device_label=device_label,
        )

    def __eq__(self, other) -> bool:
        if not isinstance(other, CustomFlow):
            return NotImplemented
        return (
            self.device_ip == other.device_ip
            and self.device_label == other.device_label
            and np.array_equal(self.to_slots(), other.to_slots())
        )


def _check_range(errors, name, values, lo, hi, markers_ok=False):
    vals = np.atleast_1d(np.asarray(values, dtype=np.float64))
    for k, v in enumerate(vals):
        if markers_ok and v in MARKERS:
            continue
        if not (lo <= v <= hi):
            idx = f"[{k}]" if vals.size > 1 else ""
            errors.append(f"{name}{idx} out of range: {v!r} not in [{lo}, {hi}]")


def validate_flow(flow: CustomFlow) -> None:
    """Raise FlowValidationError naming the first offending fields.

    Structural ranges (markers, payload bytes, octets, ports, directions)
    are hard errors here; the wider featurization ranges for counts and
    offsets are handled by clipping at normalization time instead.
    """
    errors: list[str] = []
    if flow.rel_flow_time < 0:
        errors.append(f"rel_flow_time negative: {flow.rel_flow_time}")
    _check_range(errors, "remote_ip_octets", flow.remote_ip_octets, 0, 255)
    _check_range(errors, "protocol", flow.protocol, 0, 255)
    _check_range(errors, "remote_port", flow.remote_port, 0, 65535)
    _check_range(errors, "device_port", flow.device_port, 0, 65535)
    if flow.byte_count < 0:
        errors.append(f"byte_count negative: {flow.byte_count}")
    if flow.packet_count < 1:
        errors.append(f"packet_count must be >= 1: {flow.packet_count}")
    _check_range(errors, "pkt_time_offsets", flow.pkt_time_offsets, 0, 60_000, markers_ok=True)
    _check_range(errors, "pkt_sizes", flow.pkt_sizes, 0, 65_535, markers_ok=True)
    _check_range(errors, "payload", flow.payload, 0, 255, markers_ok=True)

    # Outgoing-only stores: every present direction entry equals 1.
    present = int(min(flow.packet_count, META_SLOTS))
    for name in ("pkt_time_offsets", "pkt_sizes", "pkt_directions"):
        arr = getattr(flow, name)
        got = int(np.sum(arr != PAD))
        if got != present:
            errors.append(f"{name}: {got} present entries, expected {present} for packet_count {flow.packet_count}")
    dirs = flow.pkt_directions[:present]
    if not np.all(dirs == 1):
        errors.append(f"pkt_directions: present entries must equal 1, got {dirs.tolist()}")
    if errors:
        raise FlowValidationError("; ".join(errors))


@dataclass
class DatasetManifest:
    """Names the stores and label vocabulary of one dataset split."""

    dataset_id: str
    role: str
    stores: list[str] = field(default_factory=list)
    labels: list[str] = field(default_factory=list)
    caps: dict[str, int] = field(default_factory=dict)
    start: float = 0.0
    end: float = 0.0

    ROLES = ("train", "val", "test")

    def __post_init__(self):
        if self.role not in self.ROLES:
            raise ValueError(f"role must be one of {self.ROLES}, got {self.role!r}")

    def write(self, path: str | Path) -> None:
        lines = [
            "# flowrep dataset manifest",
            f"dataset_id = {self.dataset_id}",
            f"role = {self.role}",
            f"start = {self.start!r}",
            f"end = {self.end!r}",
        ]
        lines += [f"label = {lab}" for lab in self.labels]
        lines += [f"store = {s}" for s in self.stores]
        lines += [f"cap {lab} = {n}" for lab, n in sorted(self.caps.items())]
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def read(cls, path: str | Path) -> "DatasetManifest":
        kv: dict[str, str] = {}
        stores: list[str] = []
        labels: list[str] = []
        caps: dict[str, int] = {}
        for raw in Path(path).read_text().splitlines():
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            key, _, value = line.partition("=")
            key, value = key.strip(), value.strip()
            if key == "store":
                stores.append(value)
            elif key == "label":
                labels.append(value)
            elif key.startswith("cap "):
                caps[key[4:].strip()] = int(value)
            else:
                kv[key] = value
        return cls(
            dataset_id=kv["dataset_id"],
            role=kv["role"],
            stores=stores,
            labels=labels,
            caps=caps,
            start=float(kv.get("start", 0.0)),
            end=float(kv.get("end", 0.0)),
        )

    def store_paths(self, base: str | Path | None = None) -> list[Path]:
        root = Path(base) if base is not None else None
        out = []
        for s in self.stores:
            p = Path(s)
            if root is not None and not p.is_absolute():
                p = root / p
            out.append(p)
        return out
