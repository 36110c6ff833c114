"""Normalization of flow vectors into [0,1] and the inverse mapping.

Markers map to fixed levels inside [0,0.5); valid data maps affinely into
[0.5,1], so the two populations never overlap:

    PAD       -> 0.00
    DELIM_END -> 0.15
    DELIM_PKT -> 0.30
    value v   -> 0.5 + 0.5 * (clip(v, lo, hi) - lo) / (hi - lo)

Denormalization snaps sub-0.5 entries to the nearest marker level
(decision thresholds at 0.075 and 0.225) and inverts the affine map for
the rest, rounding integer-typed fields.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .schema import (
    DELIM_END,
    DELIM_PKT,
    DEVICE_PORT,
    PAD,
    PROTOCOL,
    REMOTE_PORT,
    SCHEMA,
    VECTOR_LENGTH,
    CustomFlow,
    VectorSchema,
)

MARKER_LEVELS = {PAD: 0.0, DELIM_END: 0.15, DELIM_PKT: 0.30}
_MARKER_THRESHOLDS = (0.075, 0.225)  # PAD | DELIM_END | DELIM_PKT boundaries


def normalize_slots(slots: np.ndarray, schema: VectorSchema = SCHEMA) -> np.ndarray:
    """Map raw slot values (any leading batch shape) into [0,1], float64."""
    x = np.asarray(slots, dtype=np.float64)
    lo, hi = schema.lo, schema.hi
    clipped = np.clip(x, lo, hi)
    out = 0.5 + 0.5 * (clipped - lo) / (hi - lo)
    out = np.where(x == PAD, MARKER_LEVELS[PAD], out)
    out = np.where(x == DELIM_END, MARKER_LEVELS[DELIM_END], out)
    out = np.where(x == DELIM_PKT, MARKER_LEVELS[DELIM_PKT], out)
    return out


def denormalize_slots(
    vec: np.ndarray, schema: VectorSchema = SCHEMA, round_ints: bool = True
) -> np.ndarray:
    """Invert normalize_slots; entries below 0.5 snap to marker values.

    round_ints=False keeps the raw inverse-affine values for integer
    fields, which reconstruction diagnostics need.
    """
    x = np.asarray(vec, dtype=np.float64)
    lo, hi = schema.lo, schema.hi
    raw = lo + (x - 0.5) * 2.0 * (hi - lo)
    if round_ints:
        raw = np.where(schema.integer_mask, np.rint(raw), raw)
    t0, t1 = _MARKER_THRESHOLDS
    marker = np.where(x < t0, PAD, np.where(x < t1, DELIM_END, DELIM_PKT))
    return np.where(x < 0.5, marker, raw)


def normalize(flow: CustomFlow, schema: VectorSchema = SCHEMA) -> np.ndarray:
    return normalize_slots(flow.to_slots(), schema)


def flows_to_matrix(flows: Sequence[CustomFlow], schema: VectorSchema = SCHEMA) -> np.ndarray:
    """Normalized (N, 3040) float32 matrix ready for encoder input."""
    if not flows:
        return np.empty((0, VECTOR_LENGTH), dtype=np.float32)
    raw = np.stack([f.to_slots() for f in flows])
    return normalize_slots(raw, schema).astype(np.float32)


RESIDUAL_LENGTH = VECTOR_LENGTH - 3
_CAT_SLOTS = np.array([PROTOCOL, REMOTE_PORT, DEVICE_PORT])
_RESIDUAL_SLOTS = np.setdiff1d(np.arange(VECTOR_LENGTH), _CAT_SLOTS)


@dataclass(frozen=True)
class CategoricalView:
    """Raw categorical indices plus the order-preserving numeric residual."""

    protocol_index: int
    device_port_index: int
    remote_port_index: int
    residual: np.ndarray

    def reassemble(self, normalized_cats: np.ndarray) -> np.ndarray:
        """Rebuild the full 3040 vector from residual + 3 normalized slots."""
        full = np.empty(VECTOR_LENGTH, dtype=self.residual.dtype)
        full[_RESIDUAL_SLOTS] = self.residual
        full[_CAT_SLOTS] = normalized_cats
        return full


def categorical_view(vec: np.ndarray, flow: CustomFlow) -> CategoricalView:
    vec = np.asarray(vec)
    return CategoricalView(
        protocol_index=int(flow.protocol),
        device_port_index=int(flow.device_port),
        remote_port_index=int(flow.remote_port),
        residual=vec[_RESIDUAL_SLOTS].copy(),
    )


def split_categorical(matrix: np.ndarray, raw_slots: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Batch form: (residual (N,3037), integer indices (N,3) proto/rem/dev).

    raw_slots carries the unnormalized slot values the indices come from.
    """
    residual = matrix[:, _RESIDUAL_SLOTS]
    idx = raw_slots[:, [PROTOCOL, REMOTE_PORT, DEVICE_PORT]].astype(np.int64)
    return residual, idx


def residual_slot_positions() -> np.ndarray:
    return _RESIDUAL_SLOTS.copy()
