"""Shared test utilities: flow builders and finite-difference oracles."""

from __future__ import annotations

import numpy as np

from flowrep.schema import META_SLOTS, PAD, PAYLOAD_SLOTS, CustomFlow, pack_payload


def make_flow(
    rel_time=12.5,
    octets=(52, 94, 1, 10),
    protocol=6,
    remote_port=443,
    device_port=51234,
    packet_count=3,
    sizes=(120, 80, 66),
    offsets=(0, 40, 900),
    segments=(b"\x16\x03\x01", b"", b"\x17\x03"),
    device_ip="10.0.0.2",
    label="camera",
):
    meta = lambda vals: np.concatenate(
        [np.asarray(vals, dtype=np.float32), np.full(META_SLOTS - len(vals), PAD, dtype=np.float32)]
    )
    return CustomFlow(
        rel_flow_time=rel_time,
        remote_ip_octets=octets,
        protocol=protocol,
        remote_port=remote_port,
        device_port=device_port,
        byte_count=int(sum(sizes)),
        packet_count=packet_count,
        pkt_time_offsets=meta(offsets),
        pkt_sizes=meta(sizes),
        pkt_directions=meta([1] * min(packet_count, META_SLOTS)),
        payload=pack_payload(list(segments)),
        device_ip=device_ip,
        device_label=label,
    )


def random_flow(rng: np.random.Generator, label="dev") -> CustomFlow:
    """A random flow satisfying every store invariant."""
    packet_count = int(rng.integers(1, 30))
    head = min(packet_count, META_SLOTS)
    offsets = np.sort(rng.integers(0, 59_999, size=head))
    offsets[0] = 0
    sizes = rng.integers(60, 1515, size=head)
    n_segments = int(rng.integers(0, head + 1))
    segments = [rng.integers(0, 256, size=rng.integers(0, 400)).astype(np.uint8).tobytes()
                for _ in range(n_segments)]
    return make_flow(
        rel_time=float(rng.uniform(0, 86_400)),
        octets=tuple(int(x) for x in rng.integers(0, 256, size=4)),
        protocol=int(rng.choice([6, 17])),
        remote_port=int(rng.integers(1, 65_536)),
        device_port=int(rng.integers(1, 65_536)),
        packet_count=packet_count,
        sizes=sizes.tolist(),
        offsets=offsets.tolist(),
        segments=segments,
        device_ip=f"10.0.{int(rng.integers(0, 8))}.{int(rng.integers(1, 250))}",
        label=label,
    )


# --- finite-difference oracles (never call backward) -----------------------


def numeric_grad_array(fn, arr: np.ndarray, h: float = 1e-3, sample: int | None = None,
                       rng: np.random.Generator | None = None) -> tuple[np.ndarray, np.ndarray | None]:
    """Central finite differences of scalar fn() w.r.t. arr, in place.

    Returns (grad, checked_indices); when `sample` is set only that many
    flat indices are probed and the rest stay NaN.
    """
    grad = np.full(arr.size, np.nan)
    flat = arr.reshape(-1)
    if sample is not None and arr.size > sample:
        rng = rng or np.random.default_rng(0)
        indices = rng.choice(arr.size, size=sample, replace=False)
    else:
        indices = np.arange(arr.size)
    for i in indices:
        old = flat[i]
        flat[i] = old + h
        up = fn()
        flat[i] = old - h
        down = fn()
        flat[i] = old
        grad[i] = (up - down) / (2 * h)
    return grad.reshape(arr.shape), indices


def max_rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max elementwise relative error over the positions numeric covers."""
    mask = ~np.isnan(numeric)
    a, n = np.asarray(analytic)[mask], np.asarray(numeric)[mask]
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1.0)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


class FixedEps:
    """Stub generator: standard_normal returns a pre-chosen array."""

    def __init__(self, eps: np.ndarray):
        self.eps = eps

    def standard_normal(self, shape):
        assert tuple(shape) == self.eps.shape
        return self.eps
