"""Seeded synthetic IoT traffic corpora for desk-scale experiments.

Each profile plays one device type: a mixture of protocol/port/endpoint
signatures, a payload byte template with a noise rate, and packet count
and size distributions. Generation is fully reproducible from a seed and
emits chronological train/val/test stores plus manifests.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .schema import META_SLOTS, PAD, PROTO_TCP, PROTO_UDP, CustomFlow, DatasetManifest, pack_payload
from .store import write_flow_store

HEADER_OVERHEAD = 54  # rough ethernet+ip+tcp header budget per packet


@dataclass(frozen=True)
class Signature:
    protocol: int
    remote_port: int
    remote_ip: str
    weight: float
    device_port: int = 0  # 0 = ephemeral


@dataclass(frozen=True)
class SyntheticProfile:
    name: str
    signatures: tuple[Signature, ...]
    template: bytes
    noise_rate: float = 0.05
    packet_count_range: tuple[int, int] = (2, 14)
    size_range: tuple[int, int] = (60, 1200)
    flows_per_day: int = 100

    def __post_init__(self):
        total = sum(s.weight for s in self.signatures)
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"{self.name}: signature weights sum to {total}, expected 1")
        if len(self.template) > 3000:
            raise ValueError(f"{self.name}: template longer than the 3000-slot payload region")


def _profile_template(name: str, length: int = 192) -> bytes:
    """Deterministic per-profile byte pattern."""
    out = b""
    counter = 0
    while len(out) < length:
        out += hashlib.sha256(f"{name}:{counter}".encode()).digest()
        counter += 1
    return out[:length]


def make_default_profiles(
    count: int = 8,
    flows_per_day: int = 100,
    shared_tls_weight: float = 0.02,
) -> list[SyntheticProfile]:
    """Profiles with one dominant distinctive signature each, plus a small
    shared TCP/443 component so signature sets partially overlap."""
    base_ports = [8443, 5353, 8883, 1900, 56700, 5683, 123, 8080, 4433, 7547, 6667, 2525]
    protos = [PROTO_TCP, PROTO_UDP]
    profiles = []
    for k in range(count):
        name = f"device-{chr(ord('a') + k)}"
        proto = protos[k % 2]
        main = Signature(
            protocol=proto,
            remote_port=base_ports[k % len(base_ports)],
            remote_ip=f"{20 + 3 * k}.{10 + k}.{40 + 2 * k}.{5 + k}",
            weight=1.0 - shared_tls_weight,
            device_port=30000 + 100 * k,
        )
        shared = Signature(
            protocol=PROTO_TCP,
            remote_port=443,
            remote_ip=f"52.94.{k}.10",
            weight=shared_tls_weight,
        )
        profiles.append(
            SyntheticProfile(
                name=name,
                signatures=(main, shared),
                template=_profile_template(name),
                noise_rate=0.02 + 0.01 * (k % 3),
                packet_count_range=(2 + k % 3, 8 + 2 * (k % 4)),
                size_range=(80 + 40 * (k % 4), 500 + 120 * (k % 5)),
                flows_per_day=flows_per_day,
            )
        )
    return profiles


def make_shift_profiles(count: int = 4, flows_per_day: int = 120) -> list[SyntheticProfile]:
    """Mixed corpus with a large TCP/443 share, for distribution-shift
    studies that train on TCP/443 only and evaluate with it removed."""
    profiles = []
    alt_ports = [53, 1900, 8883, 5683, 123, 8080]
    for k in range(count):
        name = f"shift-{chr(ord('a') + k)}"
        tls = Signature(
            protocol=PROTO_TCP,
            remote_port=443,
            remote_ip=f"34.{60 + k}.12.{7 + k}",
            weight=0.5,
            device_port=31000 + 50 * k,
        )
        other = Signature(
            protocol=PROTO_UDP if k % 2 else PROTO_TCP,
            remote_port=alt_ports[k % len(alt_ports)],
            remote_ip=f"{90 + k}.44.{20 + k}.9",
            weight=0.5,
            device_port=32000 + 50 * k,
        )
        profiles.append(
            SyntheticProfile(
                name=name,
                signatures=(tls, other),
                template=_profile_template(name),
                noise_rate=0.03,
                packet_count_range=(2, 10),
                size_range=(100, 900),
                flows_per_day=flows_per_day,
            )
        )
    return profiles


def env_b_variant(profiles: list[SyntheticProfile], port_shift: int = 1000) -> list[SyntheticProfile]:
    """Deployment-shift transform: 30% of each signature's mixture weight
    moves to a remapped port, and the payload noise rate doubles."""
    out = []
    for p in profiles:
        sigs = []
        for s in p.signatures:
            remapped = (s.remote_port + port_shift - 1) % 64511 + 1025
            sigs.append(replace(s, weight=s.weight * 0.7))
            sigs.append(replace(s, weight=s.weight * 0.3, remote_port=remapped))
        out.append(
            replace(p, signatures=tuple(sigs), noise_rate=min(0.9, p.noise_rate * 2.0))
        )
    return out


def _gen_flow(rng: np.random.Generator, profile: SyntheticProfile, rel_time: float, device_ip: str) -> CustomFlow:
    weights = np.array([s.weight for s in profile.signatures])
    sig = profile.signatures[rng.choice(len(weights), p=weights / weights.sum())]
    lo_pc, hi_pc = profile.packet_count_range
    packet_count = int(rng.integers(lo_pc, hi_pc + 1))
    lo_s, hi_s = profile.size_range
    all_sizes = rng.integers(lo_s, hi_s + 1, size=packet_count)
    head = min(packet_count, META_SLOTS)

    offsets = np.full(META_SLOTS, PAD, dtype=np.float32)
    sizes = np.full(META_SLOTS, PAD, dtype=np.float32)
    dirs = np.full(META_SLOTS, PAD, dtype=np.float32)
    offs = np.sort(rng.integers(0, 59_999, size=head))
    offs[0] = 0
    offsets[:head] = offs
    sizes[:head] = all_sizes[:head]
    dirs[:head] = 1.0

    template = np.frombuffer(profile.template, dtype=np.uint8)
    segments = []
    for k in range(head):
        length = max(0, int(all_sizes[k]) - HEADER_OVERHEAD)
        if length == 0:
            segments.append(b"")
            continue
        reps = int(np.ceil(length / len(template)))
        seg = np.tile(template, reps)[:length].copy()
        noise = rng.random(length) < profile.noise_rate
        seg[noise] = rng.integers(0, 256, size=int(noise.sum()), dtype=np.uint8)
        segments.append(seg.tobytes())

    device_port = sig.device_port or int(rng.integers(49152, 65536))
    return CustomFlow(
        rel_flow_time=rel_time,
        remote_ip_octets=tuple(int(x) for x in sig.remote_ip.split(".")),
        protocol=sig.protocol,
        remote_port=sig.remote_port,
        device_port=device_port,
        byte_count=int(all_sizes.sum()),
        packet_count=packet_count,
        pkt_time_offsets=offsets,
        pkt_sizes=sizes,
        pkt_directions=dirs,
        payload=pack_payload(segments),
        device_ip=device_ip,
        device_label=profile.name,
    )


def generate_synthetic(
    profiles: list[SyntheticProfile],
    days: int,
    seed: int,
    out_dir: str | Path,
    dataset_id: str = "synthetic",
    train_days: int | None = None,
    val_days: int | None = None,
) -> dict:
    """Generate a labeled corpus with chronological train/val/test splits.

    Default split: 40% of days train, 20% val, the rest test (at least
    one day each). Same seed, same output, bit for bit.
    """
    if len(profiles) < 2:
        raise ValueError("need at least 2 profiles")
    if train_days is None:
        train_days = max(1, int(days * 0.4))
    if val_days is None:
        val_days = max(1, int(days * 0.2))
    if train_days + val_days >= days:
        raise ValueError(f"{days} days cannot fit train={train_days} + val={val_days} + test")

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    buckets: dict[str, list[tuple[float, CustomFlow]]] = {"train": [], "val": [], "test": []}
    counts: dict[str, int] = {}
    for day in range(days):
        role = "train" if day < train_days else "val" if day < train_days + val_days else "test"
        for i, profile in enumerate(profiles):
            device_ip = f"10.0.{i}.2"
            times = np.sort(rng.uniform(0.0, 86_400.0, size=profile.flows_per_day))
            for t in times:
                flow = _gen_flow(rng, profile, float(t), device_ip)
                buckets[role].append((day * 86_400.0 + float(t), flow))
                counts[profile.name] = counts.get(profile.name, 0) + 1

    labels = [p.name for p in profiles]
    edges = {
        "train": (0.0, train_days * 86_400.0),
        "val": (train_days * 86_400.0, (train_days + val_days) * 86_400.0),
        "test": ((train_days + val_days) * 86_400.0, days * 86_400.0),
    }
    manifests, stores, split_counts = {}, {}, {}
    for role, items in buckets.items():
        items.sort(key=lambda pair: (pair[0], pair[1].device_ip))
        flows = [f for _, f in items]
        store_path = out_dir / f"{dataset_id}_{role}.cflw"
        write_flow_store(flows, store_path)
        man = DatasetManifest(
            dataset_id=dataset_id,
            role=role,
            stores=[str(store_path)],
            labels=labels,
            start=edges[role][0],
            end=edges[role][1],
        )
        man_path = out_dir / f"{dataset_id}_{role}.manifest"
        man.write(man_path)
        manifests[role] = str(man_path)
        stores[role] = str(store_path)
        split_counts[role] = len(flows)
    return {
        "dataset_id": dataset_id,
        "labels": labels,
        "per_profile": counts,
        "split_counts": split_counts,
        "stores": stores,
        "manifests": manifests,
        "seed": seed,
    }


def port_rule_oracle(train_flows, test_flows) -> dict:
    """Majority-vote (protocol, remote_port) -> label rule.

    A deliberately trivial classifier whose accuracy evidences how
    separable the corpus is before any representation learning.
    """
    votes: dict[tuple[int, int], dict[str, int]] = {}
    overall: dict[str, int] = {}
    for f in train_flows:
        key = (f.protocol, f.remote_port)
        votes.setdefault(key, {})
        votes[key][f.device_label] = votes[key].get(f.device_label, 0) + 1
        overall[f.device_label] = overall.get(f.device_label, 0) + 1
    rule = {k: max(sorted(v), key=lambda lab: v[lab]) for k, v in votes.items()}
    fallback = max(sorted(overall), key=lambda lab: overall[lab])
    correct = sum(
        1 for f in test_flows if rule.get((f.protocol, f.remote_port), fallback) == f.device_label
    )
    return {
        "accuracy": correct / max(len(test_flows), 1),
        "rules": {f"{k[0]}/{k[1]}": lab for k, lab in sorted(rule.items())},
        "test_flows": len(test_flows),
    }
