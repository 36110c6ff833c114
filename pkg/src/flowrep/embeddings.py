"""Per-flow embedding files and the external-embedding import path.

Format: a text file whose first line is

    flowemb,v1,dim=<d>,encoder=<hash>

followed by CSV rows (flow id, device label, timestamp, d reals). Flow
ids use the convention "<device>#<seq>"; windowing groups by the part
before '#', falling back to the label when absent (imported files).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .featurize import flows_to_matrix
from .schema import REL_TIME, CustomFlow
from .store import read_flow_store

HEADER_TAG = "flowemb"
FORMAT_VERSION = "v1"


class EmbeddingFormatError(ValueError):
    pass


@dataclass
class EmbeddingSet:
    dim: int
    encoder_hash: str
    flow_ids: list[str]
    labels: list[str]
    timestamps: np.ndarray
    vectors: np.ndarray

    def __len__(self) -> int:
        return len(self.flow_ids)

    def device_of(self, row: int) -> str:
        fid = self.flow_ids[row]
        return fid.rsplit("#", 1)[0] if "#" in fid else self.labels[row]


def write_embeddings(
    path: str | Path,
    dim: int,
    encoder_hash: str,
    rows: Iterable[tuple[str, str, float, np.ndarray]],
) -> int:
    count = 0
    with open(path, "w", newline="") as fh:
        fh.write(f"{HEADER_TAG},{FORMAT_VERSION},dim={dim},encoder={encoder_hash}\n")
        writer = csv.writer(fh)
        for flow_id, label, ts, vec in rows:
            vec = np.asarray(vec)
            if vec.shape != (dim,):
                raise EmbeddingFormatError(f"row {count}: vector shape {vec.shape}, expected ({dim},)")
            writer.writerow([flow_id, label, repr(float(ts))] + [repr(float(v)) for v in vec])
            count += 1
    return count


def read_embeddings(path: str | Path) -> EmbeddingSet:
    with open(path, newline="") as fh:
        header = fh.readline().strip()
        parts = header.split(",")
        if len(parts) < 4 or parts[0] != HEADER_TAG or parts[1] != FORMAT_VERSION:
            raise EmbeddingFormatError(f"{path}: bad embedding header {header!r}")
        dim = int(parts[2].split("=", 1)[1])
        encoder_hash = parts[3].split("=", 1)[1]
        ids, labels, ts, vecs = [], [], [], []
        for lineno, row in enumerate(csv.reader(fh), start=2):
            if not row:
                continue
            if len(row) != 3 + dim:
                raise EmbeddingFormatError(f"{path}:{lineno}: {len(row) - 3} values, expected {dim}")
            ids.append(row[0])
            labels.append(row[1])
            ts.append(float(row[2]))
            vecs.append(np.asarray(row[3:], dtype=np.float64))
    vectors = np.stack(vecs) if vecs else np.empty((0, dim))
    return EmbeddingSet(
        dim=dim,
        encoder_hash=encoder_hash,
        flow_ids=ids,
        labels=labels,
        timestamps=np.asarray(ts),
        vectors=vectors,
    )


def embed_flows(encoder, flows: Sequence[CustomFlow], out_path: str | Path) -> int:
    """Encode flows with a frozen encoder and write the embedding file.

    Flow ids are "<device_ip>#<seq>" with seq running in store order, so
    per-device chronology is recoverable downstream.
    """
    matrix = flows_to_matrix(flows)
    vectors = encoder.encode_matrix(matrix)
    seq_per_device: dict[str, int] = {}
    rows = []
    for flow, vec in zip(flows, vectors):
        seq = seq_per_device.get(flow.device_ip, 0)
        seq_per_device[flow.device_ip] = seq + 1
        rows.append((f"{flow.device_ip}#{seq}", flow.device_label or "", flow.rel_flow_time, vec))
    return write_embeddings(out_path, encoder.embedding_dim, encoder.fingerprint(), rows)


def embed_store(encoder, store_path: str | Path, out_path: str | Path) -> int:
    return embed_flows(encoder, read_flow_store(store_path), out_path)


def import_external_embeddings(
    src_path: str | Path, declared_dim: int, out_path: str | Path
) -> dict:
    """Validate an external CSV of (flow id, label, timestamp, dim reals)
    and re-emit it in the native embedding format."""
    rows = []
    with open(src_path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row:
                continue
            if lineno == 1 and row[0] == HEADER_TAG:
                continue  # already native; re-validate the body
            if len(row) != 3 + declared_dim:
                raise EmbeddingFormatError(
                    f"{src_path}:{lineno}: dim mismatch: {len(row) - 3} values, declared {declared_dim}"
                )
            try:
                ts = float(row[2])
                vec = np.asarray(row[3:], dtype=np.float64)
            except ValueError as e:
                raise EmbeddingFormatError(f"{src_path}:{lineno}: unparseable value ({e})") from None
            if not math.isfinite(ts) or not np.all(np.isfinite(vec)):
                raise EmbeddingFormatError(f"{src_path}:{lineno}: non-finite value in row")
            rows.append((row[0], row[1], ts, vec))
    if not rows:
        raise EmbeddingFormatError(f"{src_path}: no embedding rows")
    count = write_embeddings(out_path, declared_dim, f"imported:{Path(src_path).name}", rows)
    return {"rows": count, "dim": declared_dim, "out": str(out_path)}
