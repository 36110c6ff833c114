#!/usr/bin/env python3
"""Builds the golden pcap fixtures byte by byte.

Run from the repo root: python3 tests/fixtures/build_fixtures.py
The generated files are committed; tests verify the builder reproduces
them bit-exactly.
"""

from __future__ import annotations

import struct
from pathlib import Path

HERE = Path(__file__).parent

DEV = "10.0.0.2"
DEV2 = "10.0.0.99"
DEV_MAC = bytes.fromhex("02aabbccdd01")
REMOTE_MAC = bytes.fromhex("02aabbccdd99")


def ip_bytes(ip: str) -> bytes:
    return bytes(int(p) for p in ip.split("."))


def eth(src_mac: bytes, dst_mac: bytes, ethertype: int, body: bytes) -> bytes:
    return dst_mac + src_mac + struct.pack("!H", ethertype) + body


def ipv4(src: str, dst: str, proto: int, body: bytes) -> bytes:
    total = 20 + len(body)
    header = struct.pack("!BBHHHBBH4s4s", 0x45, 0, total, 0x1234, 0, 64, proto, 0,
                         ip_bytes(src), ip_bytes(dst))
    return header + body


def tcp(sport: int, dport: int, payload: bytes) -> bytes:
    header = struct.pack("!HHIIBBHHH", sport, dport, 1000, 0, 5 << 4, 0x18, 8192, 0, 0)
    return header + payload


def udp(sport: int, dport: int, payload: bytes) -> bytes:
    return struct.pack("!HHHH", sport, dport, 8 + len(payload), 0) + payload


def arp_frame() -> bytes:
    body = struct.pack("!HHBBH", 1, 0x0800, 6, 4, 1) + DEV_MAC + ip_bytes(DEV) + b"\x00" * 6 + ip_bytes("10.0.0.1")
    return eth(DEV_MAC, b"\xff" * 6, 0x0806, body)


def tcp_frame(src, dst, sport, dport, payload, src_mac=DEV_MAC, dst_mac=REMOTE_MAC) -> bytes:
    return eth(src_mac, dst_mac, 0x0800, ipv4(src, dst, 6, tcp(sport, dport, payload)))


def pcap(packets: list[tuple[float, bytes]], swapped: bool = False) -> bytes:
    endian = ">" if swapped else "<"
    out = [struct.pack(endian + "IHHiIII", 0xA1B2C3D4, 2, 4, 0, 0, 65535, 1)]
    for ts, frame in packets:
        sec = int(ts)
        usec = round((ts - sec) * 1e6)
        out.append(struct.pack(endian + "IIII", sec, usec, len(frame), len(frame)))
        out.append(frame)
    return b"".join(out)


def build() -> dict[str, bytes]:
    fixtures = {}

    # two TCP packets of one flow plus one ARP frame
    fixtures["mixed.pcap"] = pcap(
        [
            (1.0, tcp_frame(DEV, "93.184.216.34", 40000, 443, b"\x16\x03\x01\x02\x00")),
            (1.2, arp_frame()),
            (1.5, tcp_frame(DEV, "93.184.216.34", 40000, 443, b"AB")),
        ]
    )

    # one 130-second connection -> three one-minute records, with an
    # incoming packet and an unmapped-source packet that must be dropped
    fixtures["segmented.pcap"] = pcap(
        [
            (100.0, tcp_frame(DEV, "52.1.2.3", 51000, 443, b"AAAA")),
            (150.0, tcp_frame(DEV, "52.1.2.3", 51000, 443, b"BB")),
            (160.0, tcp_frame("52.1.2.3", DEV, 443, 51000, b"ZZ", src_mac=REMOTE_MAC, dst_mac=DEV_MAC)),
            (170.0, tcp_frame(DEV, "52.1.2.3", 51000, 443, b"CC")),
            (180.0, tcp_frame(DEV2, "52.1.2.3", 50000, 443, b"Q")),
            (230.0, tcp_frame(DEV, "52.1.2.3", 51000, 443, b"DDDD")),
        ]
    )

    # delimiter layout (4-byte + 2-byte payloads) and a 12-packet flow
    packets = [
        (10.0, tcp_frame(DEV, "20.0.0.1", 40000, 80, b"\x01\x02\x03\x04")),
        (10.5, tcp_frame(DEV, "20.0.0.1", 40000, 80, b"\x05\x06")),
    ]
    for k in range(12):
        packets.append((20.0 + 0.5 * k, tcp_frame(DEV, "20.0.0.2", 41000, 8080, bytes([k]))))
    fixtures["payload.pcap"] = pcap(packets)

    # same single packet, byte-swapped pcap header
    fixtures["swapped.pcap"] = pcap(
        [(5.0, tcp_frame(DEV, "20.0.0.1", 40000, 80, b"HI"))], swapped=True
    )
    return fixtures


def main():
    for name, blob in build().items():
        (HERE / name).write_bytes(blob)
        print(f"wrote {name} ({len(blob)} bytes)")
    (HERE / "devices.txt").write_text(f"{DEV} sensor-a\n")


if __name__ == "__main__":
    main()
