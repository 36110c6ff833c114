"""Packet-capture ingestion: pcap parsing and one-minute flow segmentation.

Only classic libpcap files (magic 0xa1b2c3d4, either byte order) over
Ethernet or raw-IPv4 link types are accepted. Non-IP and non-TCP/UDP
packets are counted and dropped. Segmentation keys packets by five-tuple,
keeps only packets sourced by mapped devices, and opens a new record when
a packet arrives 60 s or more after the current record's first packet.
"""

from __future__ import annotations

import csv
import gzip
import struct
from collections import Counter, OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .schema import (
    META_SLOTS,
    PAD,
    PROTO_TCP,
    PROTO_UDP,
    VECTOR_LENGTH,
    CustomFlow,
    DatasetManifest,
    pack_payload,
)
from .store import write_flow_store

WINDOW_SECONDS = 60.0

PCAP_MAGIC_LE = 0xA1B2C3D4
LINKTYPE_ETHERNET = 1
LINKTYPE_RAW_IPV4 = 101


class CaptureFormatError(IOError):
    pass


@dataclass(frozen=True)
class PacketRecord:
    timestamp: float
    src_ip: str
    dst_ip: str
    src_port: int
    dst_port: int
    protocol: int
    frame_len: int
    payload: bytes
    src_mac: str | None = None
    dst_mac: str | None = None


@dataclass
class ParseStats:
    total: int = 0
    kept: int = 0
    dropped_non_ip: int = 0
    dropped_non_transport: int = 0
    dropped_malformed: int = 0
    from_mapped_devices: int = 0


class DeviceMap:
    """Maps device identifiers (IPv4 or MAC) to device-type labels."""

    def __init__(self, entries: dict[str, str]):
        self.entries = {self._norm(k): v for k, v in entries.items()}
        if len(self.entries) != len(entries):
            raise ValueError("duplicate device identifiers after normalization")

    @staticmethod
    def _norm(ident: str) -> str:
        return ident.strip().lower()

    @classmethod
    def from_file(cls, path: str | Path) -> "DeviceMap":
        entries: dict[str, str] = {}
        for raw in Path(path).read_text().splitlines():
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.replace(",", " ").split()
            if len(parts) != 2:
                raise ValueError(f"device map line needs 'identifier label': {raw!r}")
            ident, label = parts
            if cls._norm(ident) in entries:
                raise ValueError(f"duplicate device identifier {ident!r}")
            entries[ident] = label
        return cls(entries)

    def lookup(self, ip: str | None, mac: str | None = None) -> str | None:
        if ip is not None:
            hit = self.entries.get(self._norm(ip))
            if hit is not None:
                return hit
        if mac is not None:
            return self.entries.get(self._norm(mac))
        return None


def _ipv4_str(raw: bytes) -> str:
    return ".".join(str(b) for b in raw)


def _mac_str(raw: bytes) -> str:
    return ":".join(f"{b:02x}" for b in raw)


def _dissect_ip(ts, frame_len, ip_bytes, src_mac, dst_mac, stats):
    if len(ip_bytes) < 20 or (ip_bytes[0] >> 4) != 4:
        stats.dropped_malformed += 1
        return None
    ihl = (ip_bytes[0] & 0x0F) * 4
    if ihl < 20 or len(ip_bytes) < ihl:
        stats.dropped_malformed += 1
        return None
    total_len = struct.unpack_from("!H", ip_bytes, 2)[0]
    proto = ip_bytes[9]
    src = _ipv4_str(ip_bytes[12:16])
    dst = _ipv4_str(ip_bytes[16:20])
    body = ip_bytes[ihl : total_len if total_len >= ihl else len(ip_bytes)]
    if proto == PROTO_TCP:
        if len(body) < 20:
            stats.dropped_malformed += 1
            return None
        sport, dport = struct.unpack_from("!HH", body, 0)
        data_off = (body[12] >> 4) * 4
        if data_off < 20:
            stats.dropped_malformed += 1
            return None
        payload = body[data_off:]
    elif proto == PROTO_UDP:
        if len(body) < 8:
            stats.dropped_malformed += 1
            return None
        sport, dport, udp_len = struct.unpack_from("!HHH", body, 0)
        payload = body[8 : max(8, udp_len)]
    else:
        stats.dropped_non_transport += 1
        return None
    return PacketRecord(
        timestamp=ts,
        src_ip=src,
        dst_ip=dst,
        src_port=sport,
        dst_port=dport,
        protocol=proto,
        frame_len=frame_len,
        payload=payload,
        src_mac=src_mac,
        dst_mac=dst_mac,
    )


def parse_capture(
    path: str | Path, devices: DeviceMap | None = None
) -> tuple[list[PacketRecord], ParseStats]:
    """Parse a classic pcap into timestamp-ordered TCP/UDP packet records."""
    raw = Path(path).read_bytes()
    if len(raw) < 24:
        raise CaptureFormatError(f"{path}: too short for a pcap global header")
    magic = struct.unpack_from("<I", raw, 0)[0]
    if magic == PCAP_MAGIC_LE:
        endian = "<"
    elif struct.unpack_from(">I", raw, 0)[0] == PCAP_MAGIC_LE:
        endian = ">"
    else:
        raise CaptureFormatError(f"{path}: bad pcap magic 0x{magic:08x}")
    _, _, _, _, _, linktype = struct.unpack_from(endian + "HHiIII", raw, 4)
    if linktype not in (LINKTYPE_ETHERNET, LINKTYPE_RAW_IPV4):
        raise CaptureFormatError(f"{path}: unsupported link type {linktype}")

    stats = ParseStats()
    records: list[PacketRecord] = []
    off = 24
    pkt_hdr = struct.Struct(endian + "IIII")
    while off < len(raw):
        if off + pkt_hdr.size > len(raw):
            stats.dropped_malformed += 1
            break
        ts_sec, ts_usec, incl_len, orig_len = pkt_hdr.unpack_from(raw, off)
        off += pkt_hdr.size
        data = raw[off : off + incl_len]
        off += incl_len
        stats.total += 1
        if len(data) < incl_len:
            stats.dropped_malformed += 1
            break
        ts = ts_sec + ts_usec / 1e6

        if linktype == LINKTYPE_ETHERNET:
            if len(data) < 14:
                stats.dropped_malformed += 1
                continue
            dst_mac, src_mac = _mac_str(data[0:6]), _mac_str(data[6:12])
            ethertype = struct.unpack_from("!H", data, 12)[0]
            ip_off = 14
            if ethertype == 0x8100 and len(data) >= 18:  # single 802.1Q tag
                ethertype = struct.unpack_from("!H", data, 16)[0]
                ip_off = 18
            if ethertype != 0x0800:
                stats.dropped_non_ip += 1
                continue
            rec = _dissect_ip(ts, orig_len, data[ip_off:], src_mac, dst_mac, stats)
        else:
            rec = _dissect_ip(ts, orig_len, data, None, None, stats)
        if rec is not None:
            records.append(rec)
            stats.kept += 1
    records.sort(key=lambda r: r.timestamp)
    if devices is not None:
        stats.from_mapped_devices = sum(
            1 for r in records if devices.lookup(r.src_ip, r.src_mac) is not None
        )
    return records, stats


def _build_flow(
    packets: list[PacketRecord], capture_start: float, label: str | None
) -> CustomFlow:
    first = packets[0]
    n = len(packets)
    head = packets[:META_SLOTS]
    offsets = np.full(META_SLOTS, PAD, dtype=np.float32)
    sizes = np.full(META_SLOTS, PAD, dtype=np.float32)
    dirs = np.full(META_SLOTS, PAD, dtype=np.float32)
    for k, p in enumerate(head):
        offsets[k] = round((p.timestamp - first.timestamp) * 1000.0)
        sizes[k] = p.frame_len
        dirs[k] = 1.0
    return CustomFlow(
        rel_flow_time=first.timestamp - capture_start,
        remote_ip_octets=tuple(int(x) for x in first.dst_ip.split(".")),
        protocol=first.protocol,
        remote_port=first.dst_port,
        device_port=first.src_port,
        byte_count=sum(p.frame_len for p in packets),
        packet_count=n,
        pkt_time_offsets=offsets,
        pkt_sizes=sizes,
        pkt_directions=dirs,
        payload=pack_payload([p.payload for p in head]),
        device_ip=first.src_ip,
        device_label=label,
    )


@dataclass
class SegmentStats:
    retained_packets: int = 0
    dropped_unmapped: int = 0
    flows: int = 0


def segment_flows(
    packets: Sequence[PacketRecord],
    devices: DeviceMap,
    capture_start: float | None = None,
) -> tuple[list[CustomFlow], SegmentStats]:
    """Group outgoing packets into one-minute flow records.

    capture_start defaults to the first packet's timestamp; relative flow
    times are measured from it.
    """
    stats = SegmentStats()
    if not packets:
        return [], stats
    if capture_start is None:
        capture_start = packets[0].timestamp

    groups: "OrderedDict[tuple, list[list[PacketRecord]]]" = OrderedDict()
    labels: dict[tuple, str] = {}
    for p in packets:
        label = devices.lookup(p.src_ip, p.src_mac)
        if label is None:
            stats.dropped_unmapped += 1
            continue
        stats.retained_packets += 1
        key = (p.src_ip, p.dst_ip, p.src_port, p.dst_port, p.protocol)
        labels[key] = label
        windows = groups.setdefault(key, [])
        if not windows or p.timestamp >= windows[-1][0].timestamp + WINDOW_SECONDS:
            windows.append([p])
        else:
            windows[-1].append(p)

    flows = [
        _build_flow(window, capture_start, labels[key])
        for key, windows in groups.items()
        for window in windows
    ]
    flows.sort(key=lambda f: (f.rel_flow_time, f.flow_key))
    stats.flows = len(flows)
    return flows, stats


def extract_to_store(
    pcap_paths: Sequence[str | Path],
    devices: DeviceMap,
    out_path: str | Path,
) -> dict:
    """CLI backend: parse captures (sorted by name), segment, write one store."""
    all_flows: list[CustomFlow] = []
    per_capture = {}
    for p in sorted(Path(x) for x in pcap_paths):
        records, pstats = parse_capture(p, devices)
        flows, sstats = segment_flows(records, devices)
        all_flows.extend(flows)
        per_capture[str(p)] = {
            "packets": pstats.total,
            "kept": pstats.kept,
            "dropped_non_ip": pstats.dropped_non_ip,
            "dropped_non_transport": pstats.dropped_non_transport,
            "dropped_malformed": pstats.dropped_malformed,
            "dropped_unmapped": sstats.dropped_unmapped,
            "flows": sstats.flows,
        }
    summary = write_flow_store(all_flows, out_path)
    return {"store": summary.path, "count": summary.count, "captures": per_capture}


# --- published Custom Flow archive conversion ---------------------------

ARCHIVE_META_COLUMNS = ("timestamp", "device_ip", "label")


class ArchiveFormatError(ValueError):
    pass


def convert_published_dataset(
    archive_path: str | Path,
    out_dir: str | Path,
    dataset_id: str = "data16",
    train_days: int = 7,
    val_days: int = 5,
) -> dict:
    """Convert a published Custom Flow CSV archive into stores + manifests.

    Expected layout: a CSV (optionally gzip-compressed) whose header is
    timestamp,device_ip,label,s0,...,s3039. The chronological split puts
    the first `train_days` days into train, the next `val_days` into val,
    and the remainder into test.
    """
    archive_path = Path(archive_path)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    opener = gzip.open if archive_path.suffix == ".gz" else open
    with opener(archive_path, "rt", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ArchiveFormatError("no records: archive is empty") from None
        if tuple(header[:3]) != ARCHIVE_META_COLUMNS:
            raise ArchiveFormatError(
                f"unknown archive layout: header starts {header[:3]!r}, expected {ARCHIVE_META_COLUMNS}"
            )
        if len(header) != 3 + VECTOR_LENGTH:
            raise ArchiveFormatError(
                f"schema-width mismatch: {len(header) - 3} slot columns, expected {VECTOR_LENGTH}"
            )
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != 3 + VECTOR_LENGTH:
                raise ArchiveFormatError(f"schema-width mismatch at line {lineno}")
            ts = float(row[0])
            slots = np.asarray(row[3:], dtype=np.float32)
            rows.append((ts, row[1], row[2], slots))
    if not rows:
        raise ArchiveFormatError("no records in archive")

    rows.sort(key=lambda r: r[0])
    t0 = rows[0][0]
    split_edges = (t0 + train_days * 86400.0, t0 + (train_days + val_days) * 86400.0)
    buckets: dict[str, list] = {"train": [], "val": [], "test": []}
    per_device: Counter = Counter()
    for ts, ip, label, slots in rows:
        role = "train" if ts < split_edges[0] else "val" if ts < split_edges[1] else "test"
        buckets[role].append(CustomFlow.from_slots(slots, ip, label))
        per_device[label] += 1

    labels = sorted(per_device)
    manifests = {}
    bounds = {
        "train": (t0, split_edges[0]),
        "val": (split_edges[0], split_edges[1]),
        "test": (split_edges[1], rows[-1][0]),
    }
    for role, flows in buckets.items():
        store_path = out_dir / f"{dataset_id}_{role}.cflw"
        write_flow_store(flows, store_path)
        man = DatasetManifest(
            dataset_id=dataset_id,
            role=role,
            stores=[store_path.name],
            labels=labels,
            start=bounds[role][0],
            end=bounds[role][1],
        )
        man_path = out_dir / f"{dataset_id}_{role}.manifest"
        man.write(man_path)
        manifests[role] = str(man_path)
    return {
        "dataset_id": dataset_id,
        "records": len(rows),
        "per_device": dict(sorted(per_device.items())),
        "labels": labels,
        "split_counts": {role: len(b) for role, b in buckets.items()},
        "manifests": manifests,
    }
