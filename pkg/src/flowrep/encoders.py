"""Encoder-decoder models (AE, entity-embedding AE, VAE) and training.

All three variants share the convolutional trunk: stacked conv blocks
(conv -> batchnorm -> leaky relu) feeding a dense bottleneck of dimension
`latent_dim`. Decoders mirror the encoder with transposed convolutions.
Training is unsupervised; device labels are never loaded on this path.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import featurize
from .featurize import normalize_slots, residual_slot_positions
from .nn import (
    Adam,
    BatchNorm,
    Conv1D,
    ConvTranspose1D,
    Dense,
    Flatten,
    LeakyReLU,
    Reshape,
    Sequential,
    count_parameters,
    kl_unit_gaussian,
    load_checkpoint,
    mse,
    save_checkpoint,
    sparse_ce,
)
from .schema import (
    DEVICE_PORT,
    PROTOCOL,
    PROTO_TCP,
    PROTO_UDP,
    REMOTE_PORT,
    SCHEMA,
    VECTOR_LENGTH,
    DatasetManifest,
)
from .store import read_store_unlabeled

AE = "ae"
AE_ENTITY = "ae_entity"
VAE = "vae"
VARIANTS = (AE, AE_ENTITY, VAE)

DEPTH_GRID = (1, 2, 4, 8)
LATENT_GRID = (10, 20, 40, 80)

RESIDUAL_LENGTH = VECTOR_LENGTH - 3
LOGVAR_CLAMP = 10.0


class TrainingDiverged(RuntimeError):
    pass


class EncodeError(ValueError):
    pass


@dataclass(frozen=True)
class TrafficFilter:
    """Protocol/port predicate, e.g. "all", "only:tcp/443", "except:tcp/443"."""

    spec: str = "all"

    _PROTOS = {"tcp": PROTO_TCP, "udp": PROTO_UDP}

    def _parse(self) -> tuple[str, int, int] | None:
        if self.spec == "all":
            return None
        mode, _, rest = self.spec.partition(":")
        if mode not in ("only", "except") or "/" not in rest:
            raise ValueError(f"bad traffic filter {self.spec!r}; want 'all', 'only:tcp/443', ...")
        proto_s, port_s = rest.split("/", 1)
        proto = self._PROTOS.get(proto_s.lower())
        if proto is None:
            proto = int(proto_s)
        return mode, proto, int(port_s)

    def mask(self, raw_slots: np.ndarray) -> np.ndarray:
        parsed = self._parse()
        if parsed is None:
            return np.ones(raw_slots.shape[0], dtype=bool)
        mode, proto, port = parsed
        hit = (raw_slots[:, PROTOCOL] == proto) & (raw_slots[:, REMOTE_PORT] == port)
        return hit if mode == "only" else ~hit


@dataclass
class EncoderConfig:
    variant: str = AE
    depth: int = 4
    latent_dim: int = 40
    channels: int = 128
    beta: float = 0.001
    entity_dims: tuple[int, int, int] = (4, 16, 16)  # proto, remote port, device port
    port_vocab_size: int = 1024  # 0 -> full 65536-way heads
    seed: int = 0
    epochs: int = 100
    batch_size: int = 64
    learning_rate: float = 1e-3
    per_device_cap: int = 5000
    traffic_filter: str = "all"
    allow_custom_grid: bool = False

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if not self.allow_custom_grid:
            if self.depth not in DEPTH_GRID:
                raise ValueError(f"depth {self.depth} outside grid {DEPTH_GRID}; set allow_custom_grid")
            if self.latent_dim not in LATENT_GRID:
                raise ValueError(f"latent_dim {self.latent_dim} outside grid {LATENT_GRID}; set allow_custom_grid")
        if self.variant == VAE and self.beta <= 0:
            raise ValueError(f"beta must be positive for VAE, got {self.beta}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["entity_dims"] = list(self.entity_dims)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        d = dict(d)
        d["entity_dims"] = tuple(d.get("entity_dims", (4, 16, 16)))
        return cls(**d)


class PortVocab:
    """Top-K port remap with an OTHER bucket, or the identity over 65536."""

    OTHER_NAME = "OTHER"

    def __init__(self, ports: list[int] | None, full_cardinality: int = 65536):
        self.ports = None if ports is None else [int(p) for p in ports]
        self.full_cardinality = full_cardinality
        self._index = None if self.ports is None else {p: i for i, p in enumerate(self.ports)}

    @property
    def cardinality(self) -> int:
        if self.ports is None:
            return self.full_cardinality
        return len(self.ports) + 1  # + OTHER

    def indices(self, ports: np.ndarray) -> np.ndarray:
        ports = np.asarray(ports, dtype=np.int64)
        if self.ports is None:
            return ports
        other = len(self.ports)
        return np.array([self._index.get(int(p), other) for p in ports], dtype=np.int64)

    def port_of(self, index: int) -> int | None:
        """Inverse map; None for the OTHER bucket."""
        if self.ports is None:
            return int(index)
        return self.ports[index] if index < len(self.ports) else None

    @classmethod
    def fit(cls, ports: np.ndarray, k: int) -> "PortVocab":
        if k <= 0:
            return cls(None)
        vals, counts = np.unique(np.asarray(ports, dtype=np.int64), return_counts=True)
        order = np.lexsort((vals, -counts))  # frequency desc, then port asc
        return cls([int(vals[i]) for i in order[:k]])

    def to_dict(self) -> dict:
        return {"ports": self.ports, "full_cardinality": self.full_cardinality}

    @classmethod
    def from_dict(cls, d: dict) -> "PortVocab":
        return cls(d.get("ports"), d.get("full_cardinality", 65536))


def _conv_trunk(depth, channels, rng, prefix):
    layers = [
        Conv1D(1, channels, rng=rng, name=f"{prefix}_conv1"),
        BatchNorm(channels, name=f"{prefix}_bn1"),
        LeakyReLU(name=f"{prefix}_act1"),
    ]
    for b in range(2, depth + 1):
        layers += [
            Conv1D(channels, channels, rng=rng, name=f"{prefix}_conv{b}"),
            BatchNorm(channels, name=f"{prefix}_bn{b}"),
            LeakyReLU(name=f"{prefix}_act{b}"),
        ]
    return layers


def _deconv_stack(depth, channels, length, latent_dim, rng, prefix):
    layers = [
        Dense(latent_dim, channels * length, rng=rng, name=f"{prefix}_expand"),
        BatchNorm(channels * length, name=f"{prefix}_bn0"),
        LeakyReLU(name=f"{prefix}_act0"),
        Reshape(channels, length, name=f"{prefix}_reshape"),
    ]
    for b in range(1, depth + 1):
        layers += [
            ConvTranspose1D(channels, channels, rng=rng, name=f"{prefix}_deconv{b}"),
            BatchNorm(channels, name=f"{prefix}_dbn{b}"),
            LeakyReLU(name=f"{prefix}_dact{b}"),
        ]
    layers.append(ConvTranspose1D(channels, 1, rng=rng, name=f"{prefix}_out"))
    return layers


class AEModel:
    """Deterministic autoencoder over the full 3040-slot vector."""

    variant = AE
    input_length = VECTOR_LENGTH

    def __init__(self, config: EncoderConfig, rng: np.random.Generator):
        ch, n, i = config.channels, config.depth, config.latent_dim
        self.encoder = Sequential(
            _conv_trunk(n, ch, rng, "enc")
            + [Flatten(name="enc_flat"), Dense(ch * self.input_length, i, rng=rng, name="enc_latent")],
            name="encoder",
        )
        self.decoder = Sequential(_deconv_stack(n, ch, self.input_length, i, rng, "dec"), name="decoder")

    def forward_train(self, x, rng=None):
        z = self.encoder.forward(x, train=True)
        recon = self.decoder.forward(z, train=True)
        return recon[:, 0, :]

    def backward(self, drecon):
        dz = self.decoder.backward(drecon[:, None, :])
        self.encoder.backward(dz)

    def encode(self, x):
        return self.encoder.forward(x, train=False)

    def reconstruct(self, x):
        return self.decoder.forward(self.encode(x), train=False)[:, 0, :]

    def parts(self):
        return [self.encoder, self.decoder]

    def encoder_parts(self):
        return [self.encoder]


class VAEModel:
    """Variational autoencoder: mu/logvar heads over the shared trunk."""

    variant = VAE
    input_length = VECTOR_LENGTH

    def __init__(self, config: EncoderConfig, rng: np.random.Generator):
        ch, n, i = config.channels, config.depth, config.latent_dim
        flat = ch * self.input_length
        self.trunk = Sequential(_conv_trunk(n, ch, rng, "enc") + [Flatten(name="enc_flat")], name="trunk")
        self.mu_head = Sequential([Dense(flat, i, rng=rng, name="mu")], name="mu_head")
        self.logvar_head = Sequential([Dense(flat, i, rng=rng, name="logvar")], name="logvar_head")
        self.decoder = Sequential(_deconv_stack(n, ch, self.input_length, i, rng, "dec"), name="decoder")

    def forward_train(self, x, rng):
        h = self.trunk.forward(x, train=True)
        mu = self.mu_head.forward(h, train=True)
        logvar_raw = self.logvar_head.forward(h, train=True)
        logvar = np.clip(logvar_raw, -LOGVAR_CLAMP, LOGVAR_CLAMP)
        eps = rng.standard_normal(mu.shape).astype(mu.dtype)
        z = mu + np.exp(0.5 * logvar) * eps
        recon = self.decoder.forward(z, train=True)[:, 0, :]
        self._cache = (logvar, eps, np.abs(logvar_raw) < LOGVAR_CLAMP)
        return recon, mu, logvar

    def backward(self, drecon, dmu_kl, dlogvar_kl):
        logvar, eps, open_mask = self._cache
        dz = self.decoder.backward(drecon[:, None, :])
        dmu = dz + dmu_kl
        dlogvar = (dz * eps * 0.5 * np.exp(0.5 * logvar) + dlogvar_kl) * open_mask
        dh = self.mu_head.backward(dmu) + self.logvar_head.backward(dlogvar)
        self.trunk.backward(dh)

    def encode(self, x):
        # inference is deterministic: the latent is mu, never sampled
        return self.mu_head.forward(self.trunk.forward(x, train=False), train=False)

    def encode_stats(self, x):
        h = self.trunk.forward(x, train=False)
        mu = self.mu_head.forward(h, train=False)
        logvar = np.clip(self.logvar_head.forward(h, train=False), -LOGVAR_CLAMP, LOGVAR_CLAMP)
        return mu, logvar

    def reconstruct(self, x):
        return self.decoder.forward(self.encode(x), train=False)[:, 0, :]

    def parts(self):
        return [self.trunk, self.mu_head, self.logvar_head, self.decoder]

    def encoder_parts(self):
        return [self.trunk, self.mu_head, self.logvar_head]


class EntityAEModel:
    """Hybrid model: entity embeddings for protocol/ports, convs for the rest."""

    variant = AE_ENTITY
    input_length = RESIDUAL_LENGTH

    def __init__(self, config: EncoderConfig, rng: np.random.Generator,
                 rem_vocab: PortVocab | None = None, dev_vocab: PortVocab | None = None):
        from .nn import Embedding

        ch, n, i = config.channels, config.depth, config.latent_dim
        d_proto, d_rem, d_dev = config.entity_dims
        self.rem_vocab = rem_vocab or PortVocab.fit(np.array([], dtype=np.int64), config.port_vocab_size)
        self.dev_vocab = dev_vocab or PortVocab.fit(np.array([], dtype=np.int64), config.port_vocab_size)
        flat = ch * self.input_length
        self.trunk = Sequential(_conv_trunk(n, ch, rng, "enc") + [Flatten(name="enc_flat")], name="trunk")
        self.emb_proto = Embedding(256, d_proto, rng=rng, name="emb_proto")
        self.emb_rem = Embedding(self.rem_vocab.cardinality, d_rem, rng=rng, name="emb_rem")
        self.emb_dev = Embedding(self.dev_vocab.cardinality, d_dev, rng=rng, name="emb_dev")
        self.latent = Sequential(
            [Dense(flat + d_proto + d_rem + d_dev, i, rng=rng, name="enc_latent")], name="latent"
        )
        self.decoder = Sequential(_deconv_stack(n, ch, self.input_length, i, rng, "dec"), name="decoder")
        self.head_proto = Sequential([Dense(i, 256, rng=rng, name="head_proto")], name="head_proto_seq")
        self.head_rem = Sequential([Dense(i, self.rem_vocab.cardinality, rng=rng, name="head_rem")], name="head_rem_seq")
        self.head_dev = Sequential([Dense(i, self.dev_vocab.cardinality, rng=rng, name="head_dev")], name="head_dev_seq")
        self._emb_layers = (self.emb_proto, self.emb_rem, self.emb_dev)
        self._dims = (flat, d_proto, d_rem, d_dev)

    def _latent_input(self, residual, idx, train):
        h = self.trunk.forward(residual, train=train)
        parts = [h]
        for layer, col in zip(self._emb_layers, range(3)):
            parts.append(layer.forward(idx[:, col], train=train))
        return np.concatenate(parts, axis=1)

    def forward_train(self, residual, idx, rng=None):
        z = self.latent.forward(self._latent_input(residual, idx, train=True), train=True)
        recon = self.decoder.forward(z, train=True)[:, 0, :]
        logits = (
            self.head_proto.forward(z, train=True),
            self.head_rem.forward(z, train=True),
            self.head_dev.forward(z, train=True),
        )
        return recon, logits

    def backward(self, drecon, dlogits):
        dz = self.decoder.backward(drecon[:, None, :])
        for head, dl in zip((self.head_proto, self.head_rem, self.head_dev), dlogits):
            dz = dz + head.backward(dl)
        dcat = self.latent.backward(dz)
        flat, d_p, d_r, d_d = self._dims
        bounds = np.cumsum([flat, d_p, d_r, d_d])
        self.trunk.backward(dcat[:, : bounds[0]])
        for layer, (a, b) in zip(self._emb_layers, zip(bounds[:-1], bounds[1:])):
            layer.backward(dcat[:, a:b])

    def remap_indices(self, raw_idx: np.ndarray) -> np.ndarray:
        """(N,3) raw proto/rem/dev values -> embedding-table indices."""
        out = np.empty_like(raw_idx)
        out[:, 0] = np.clip(raw_idx[:, 0], 0, 255)
        out[:, 1] = self.rem_vocab.indices(raw_idx[:, 1])
        out[:, 2] = self.dev_vocab.indices(raw_idx[:, 2])
        return out

    def encode(self, residual, idx):
        return self.latent.forward(self._latent_input(residual, idx, train=False), train=False)

    def reconstruct(self, residual, idx):
        z = self.encode(residual, idx)
        recon = self.decoder.forward(z, train=False)[:, 0, :]
        preds = (
            np.argmax(self.head_proto.forward(z, train=False), axis=1),
            np.argmax(self.head_rem.forward(z, train=False), axis=1),
            np.argmax(self.head_dev.forward(z, train=False), axis=1),
        )
        return recon, preds

    def parts(self):
        return [
            self.trunk, self.emb_proto, self.emb_rem, self.emb_dev, self.latent,
            self.decoder, self.head_proto, self.head_rem, self.head_dev,
        ]

    def encoder_parts(self):
        return [self.trunk, self.emb_proto, self.emb_rem, self.emb_dev, self.latent]


def _named_params(parts):
    for part in parts:
        if isinstance(part, Sequential):
            yield from part.named_params()
        else:  # bare Embedding layer
            for key, val in part.params.items():
                yield f"{part.name}.{key}", part, key, val


def _named_buffers(parts):
    for part in parts:
        if isinstance(part, Sequential):
            yield from part.named_buffers()
        else:
            for key, val in part.buffers.items():
                yield f"{part.name}.{key}", part, key, val


def build_model(config: EncoderConfig, rem_vocab=None, dev_vocab=None):
    """Instantiate the seeded, untrained model for a config."""
    rng = np.random.default_rng(config.seed)
    if config.variant == AE:
        return AEModel(config, rng)
    if config.variant == VAE:
        return VAEModel(config, rng)
    return EntityAEModel(config, rng, rem_vocab=rem_vocab, dev_vocab=dev_vocab)


def model_named_params(model):
    return _named_params(model.parts())


def model_parameter_count(model) -> int:
    return count_parameters(model_named_params(model))


def encoder_parameter_count(model) -> int:
    """Trainable parameters of the encoder half only."""
    return count_parameters(_named_params(model.encoder_parts()))


# --- data loading (label-blind) ------------------------------------------


def load_manifest_slots(
    manifest: DatasetManifest | str | Path,
    traffic_filter: TrafficFilter | None = None,
    per_device_cap: int = 0,
) -> np.ndarray:
    """Raw (N,3040) slots from a manifest's stores, filtered and capped.

    Uses the unlabeled reader: device labels are structurally absent from
    the encoder-training data path. Capping keeps the chronologically
    first records per device address.
    """
    manifest = _resolve_manifest(manifest)
    mats, ips = [], []
    for path in manifest.store_paths():
        mat, dev_ips = read_store_unlabeled(path)
        mats.append(mat)
        ips.extend(dev_ips)
    raw = np.concatenate(mats) if mats else np.empty((0, VECTOR_LENGTH), dtype=np.float32)
    if traffic_filter is not None:
        keep = traffic_filter.mask(raw)
        raw = raw[keep]
        ips = [ip for ip, k in zip(ips, keep) if k]
    if per_device_cap > 0 and len(ips):
        counts: dict[str, int] = {}
        keep_idx = []
        for j, ip in enumerate(ips):
            c = counts.get(ip, 0)
            if c < per_device_cap:
                keep_idx.append(j)
                counts[ip] = c + 1
        raw = raw[keep_idx]
    return raw


def _resolve_manifest(manifest, base=None) -> DatasetManifest:
    if isinstance(manifest, DatasetManifest):
        return manifest
    path = Path(manifest)
    man = DatasetManifest.read(path)
    man.stores = [str(p) for p in man.store_paths(path.parent)]
    return man


# --- training -------------------------------------------------------------


@dataclass
class TrainedEncoder:
    config: EncoderConfig
    model: object
    curve: list[dict] = field(default_factory=list)
    initial_val: dict = field(default_factory=dict)
    provenance: dict = field(default_factory=dict)
    schema_digest: str = ""

    @property
    def embedding_dim(self) -> int:
        return self.config.latent_dim

    def _check(self, matrix: np.ndarray):
        if self.schema_digest and self.schema_digest != SCHEMA.digest():
            raise EncodeError("schema hash mismatch between encoder and runtime schema")
        if matrix.ndim != 2 or matrix.shape[1] != VECTOR_LENGTH:
            raise EncodeError(f"expected (N,{VECTOR_LENGTH}) normalized vectors, got {matrix.shape}")

    def _entity_inputs(self, matrix: np.ndarray):
        residual = matrix[:, residual_slot_positions()][:, None, :].astype(np.float32)
        raw_idx = cat_indices_from_normalized(matrix)
        return residual, self.model.remap_indices(raw_idx)

    def encode_matrix(self, matrix: np.ndarray, batch_size: int = 256) -> np.ndarray:
        """Frozen, deterministic embeddings for (N,3040) normalized vectors."""
        self._check(matrix)
        out = []
        for s in range(0, len(matrix), batch_size):
            chunk = matrix[s : s + batch_size]
            if self.config.variant == AE_ENTITY:
                residual, idx = self._entity_inputs(chunk)
                out.append(self.model.encode(residual, idx))
            else:
                out.append(self.model.encode(chunk[:, None, :].astype(np.float32)))
        return np.concatenate(out) if out else np.empty((0, self.embedding_dim), dtype=np.float32)

    def encode_flow(self, vec: np.ndarray) -> np.ndarray:
        vec = np.asarray(vec)
        if vec.shape != (VECTOR_LENGTH,):
            raise EncodeError(f"expected a {VECTOR_LENGTH}-slot vector, got {vec.shape}")
        return self.encode_matrix(vec[None, :])[0]

    def reconstruct_matrix(self, matrix: np.ndarray, batch_size: int = 256) -> np.ndarray:
        """Reconstructed 3040-slot vectors, clipped into [0,1]."""
        self._check(matrix)
        out = []
        for s in range(0, len(matrix), batch_size):
            chunk = matrix[s : s + batch_size]
            if self.config.variant == AE_ENTITY:
                residual, idx = self._entity_inputs(chunk)
                recon_res, preds = self.model.reconstruct(residual, idx)
                out.append(_entity_full_recon(self.model, recon_res, preds))
            else:
                out.append(self.model.reconstruct(chunk[:, None, :].astype(np.float32)))
        full = np.concatenate(out) if out else np.empty((0, VECTOR_LENGTH), dtype=np.float32)
        return np.clip(full, 0.0, 1.0)

    def categorical_predictions(self, matrix: np.ndarray, batch_size: int = 256):
        """Entity-variant head argmaxes as (proto_idx, rem_idx, dev_idx) arrays."""
        if self.config.variant != AE_ENTITY:
            raise EncodeError("categorical predictions exist only for the entity variant")
        self._check(matrix)
        cols = ([], [], [])
        for s in range(0, len(matrix), batch_size):
            residual, idx = self._entity_inputs(matrix[s : s + batch_size])
            _, preds = self.model.reconstruct(residual, idx)
            for c, p in zip(cols, preds):
                c.append(p)
        return tuple(np.concatenate(c) for c in cols)

    def reconstruction_mse(self, matrix: np.ndarray, batch_size: int = 256) -> float:
        """Validation-style reconstruction MSE (mu path for the VAE)."""
        self._check(matrix)
        total, n = 0.0, 0
        for s in range(0, len(matrix), batch_size):
            chunk = matrix[s : s + batch_size]
            if self.config.variant == AE_ENTITY:
                residual, idx = self._entity_inputs(chunk)
                recon, _ = self.model.reconstruct(residual, idx)
                target = residual[:, 0, :]
            else:
                recon = self.model.reconstruct(chunk[:, None, :].astype(np.float32))
                target = chunk
            total += float(np.sum((recon.astype(np.float64) - target) ** 2))
            n += recon.size
        return total / max(n, 1)

    def fingerprint(self) -> str:
        h = hashlib.sha256(json.dumps(self.config.to_dict(), sort_keys=True).encode())
        for name, _, _, arr in sorted(model_named_params(self.model), key=lambda t: t[0]):
            h.update(name.encode())
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()

    def save(self, path: str | Path) -> None:
        arrays = {f"param:{n}": a for n, _, _, a in model_named_params(self.model)}
        arrays.update({f"buffer:{n}": a for n, _, _, a in _named_buffers(self.model.parts())})
        meta = {
            "kind": "encoder",
            "config": self.config.to_dict(),
            "curve": self.curve,
            "initial_val": self.initial_val,
            "provenance": self.provenance,
            "schema_digest": self.schema_digest or SCHEMA.digest(),
        }
        if self.config.variant == AE_ENTITY:
            meta["rem_vocab"] = self.model.rem_vocab.to_dict()
            meta["dev_vocab"] = self.model.dev_vocab.to_dict()
        save_checkpoint(path, meta, arrays, seed=self.config.seed)

    @classmethod
    def load(cls, path: str | Path) -> "TrainedEncoder":
        meta, arrays, _ = load_checkpoint(path)
        if meta.get("kind") != "encoder":
            raise EncodeError(f"{path}: not an encoder checkpoint")
        config = EncoderConfig.from_dict(meta["config"])
        vocabs = {}
        if config.variant == AE_ENTITY:
            vocabs = {
                "rem_vocab": PortVocab.from_dict(meta["rem_vocab"]),
                "dev_vocab": PortVocab.from_dict(meta["dev_vocab"]),
            }
        model = build_model(config, **vocabs)
        for name, layer, key, arr in model_named_params(model):
            layer.params[key] = arrays[f"param:{name}"].copy()
        for name, layer, key, arr in _named_buffers(model.parts()):
            layer.buffers[key] = arrays[f"buffer:{name}"].copy()
        return cls(
            config=config,
            model=model,
            curve=meta["curve"],
            initial_val=meta["initial_val"],
            provenance=meta["provenance"],
            schema_digest=meta["schema_digest"],
        )


def cat_indices_from_normalized(matrix: np.ndarray) -> np.ndarray:
    """Recover raw proto/rem-port/dev-port integers from normalized slots."""
    cols = np.stack([matrix[:, PROTOCOL], matrix[:, REMOTE_PORT], matrix[:, DEVICE_PORT]], axis=1)
    lo = np.array([SCHEMA.lo[PROTOCOL], SCHEMA.lo[REMOTE_PORT], SCHEMA.lo[DEVICE_PORT]])
    hi = np.array([SCHEMA.hi[PROTOCOL], SCHEMA.hi[REMOTE_PORT], SCHEMA.hi[DEVICE_PORT]])
    raw = lo + (cols.astype(np.float64) - 0.5) * 2.0 * (hi - lo)
    return np.rint(raw).astype(np.int64)


def _entity_full_recon(model: EntityAEModel, recon_residual: np.ndarray, preds) -> np.ndarray:
    """Assemble a full 3040 normalized vector from residual + head argmaxes."""
    n = recon_residual.shape[0]
    full = np.empty((n, VECTOR_LENGTH), dtype=np.float64)
    full[:, residual_slot_positions()] = recon_residual
    proto_idx, rem_idx, dev_idx = preds
    rem_ports = np.array([model.rem_vocab.port_of(int(i)) or 0 for i in rem_idx], dtype=np.float64)
    dev_ports = np.array([model.dev_vocab.port_of(int(i)) or 0 for i in dev_idx], dtype=np.float64)
    for slot, vals in ((PROTOCOL, proto_idx.astype(np.float64)), (REMOTE_PORT, rem_ports), (DEVICE_PORT, dev_ports)):
        lo, hi = SCHEMA.lo[slot], SCHEMA.hi[slot]
        full[:, slot] = 0.5 + 0.5 * (np.clip(vals, lo, hi) - lo) / (hi - lo)
    return full


def _param_dicts(model):
    params, grads_src = {}, []
    for name, layer, key, arr in model_named_params(model):
        params[name] = arr
        grads_src.append((name, layer, key))
    return params, grads_src


def _collect_grads(grads_src):
    return {name: layer.grads[key] for name, layer, key in grads_src}


def _entity_val_metrics(model, config, residual, idx):
    n = len(residual)
    sq_sum, count = 0.0, 0
    ce_sums = np.zeros(3)
    for s in range(0, n, 256):
        sl = slice(s, min(s + 256, n))
        z = model.encode(residual[sl][:, None, :], idx[sl])
        recon = model.decoder.forward(z, train=False)[:, 0, :]
        target = residual[sl]
        sq_sum += float(np.sum((recon.astype(np.float64) - target) ** 2))
        count += recon.size
        logits = (
            model.head_proto.forward(z, train=False),
            model.head_rem.forward(z, train=False),
            model.head_dev.forward(z, train=False),
        )
        for j, lg in enumerate(logits):
            ce_sums[j] += sparse_ce(lg, idx[sl][:, j])[0] * (sl.stop - sl.start)
    val_cnn = sq_sum / max(count, 1)
    ce = ce_sums / max(n, 1)
    total = val_cnn + 0.001 * float(ce.sum())
    return {
        "val_mse": val_cnn,
        "val_ce_proto": float(ce[0]),
        "val_ce_rem_port": float(ce[1]),
        "val_ce_dev_port": float(ce[2]),
        "val_total": total,
    }


def _batched(fn, X, batch=256):
    return np.concatenate([fn(X[s : s + batch].astype(np.float32)) for s in range(0, len(X), batch)])


def _mse64(a, b) -> float:
    return float(np.mean((np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)) ** 2))


def train(
    config: EncoderConfig,
    train_manifest: DatasetManifest | str | Path,
    val_manifest: DatasetManifest | str | Path,
) -> TrainedEncoder:
    """Unsupervised training per the configured variant.

    Records per-epoch validation metrics; raises TrainingDiverged on
    non-finite loss. Device labels are never read (the loader skips them).
    """
    train_man = _resolve_manifest(train_manifest)
    val_man = _resolve_manifest(val_manifest)
    tf = TrafficFilter(config.traffic_filter)
    raw_train = load_manifest_slots(train_man, tf, config.per_device_cap)
    raw_val = load_manifest_slots(val_man, tf, 0)
    if len(raw_train) == 0:
        raise ValueError(f"empty training set after filter {config.traffic_filter!r}")

    X_train = normalize_slots(raw_train).astype(np.float32)
    X_val = normalize_slots(raw_val).astype(np.float32)

    rem_vocab = dev_vocab = None
    if config.variant == AE_ENTITY:
        rem_vocab = PortVocab.fit(raw_train[:, REMOTE_PORT].astype(np.int64), config.port_vocab_size)
        dev_vocab = PortVocab.fit(raw_train[:, DEVICE_PORT].astype(np.int64), config.port_vocab_size)

    model = build_model(config, rem_vocab=rem_vocab, dev_vocab=dev_vocab)
    params, grads_src = _param_dicts(model)
    adam = Adam(lr=config.learning_rate)
    rng = np.random.default_rng(config.seed)

    if config.variant == AE_ENTITY:
        residual_train = X_train[:, residual_slot_positions()]
        idx_train = model.remap_indices(cat_indices_from_normalized(X_train))

    initial_val = _epoch_val(model, config, X_val)
    curve: list[dict] = []
    n = len(X_train)
    for epoch in range(1, config.epochs + 1):
        perm = rng.permutation(n)
        train_losses = []
        for s in range(0, n, config.batch_size):
            take = perm[s : s + config.batch_size]
            if config.variant == AE:
                x = X_train[take][:, None, :]
                recon = model.forward_train(x)
                loss, g = mse(recon, X_train[take])
                model.backward(g)
            elif config.variant == VAE:
                x = X_train[take][:, None, :]
                recon, mu, logvar = model.forward_train(x, rng)
                loss_r, g = mse(recon, X_train[take])
                loss_k, dmu, dlogvar = kl_unit_gaussian(mu, logvar)
                loss = loss_r + config.beta * loss_k
                model.backward(g, config.beta * dmu, config.beta * dlogvar)
            else:
                res = residual_train[take][:, None, :]
                idx = idx_train[take]
                recon, logits = model.forward_train(res, idx)
                loss_c, g = mse(recon, residual_train[take])
                dlogits, loss_cats = [], 0.0
                for j, lg in enumerate(logits):
                    lc, dl = sparse_ce(lg, idx[:, j])
                    loss_cats += lc
                    dlogits.append(0.001 * dl)
                loss = loss_c + 0.001 * loss_cats
                model.backward(g, dlogits)
            if not np.isfinite(loss):
                raise TrainingDiverged(
                    f"non-finite loss {loss!r} at epoch {epoch}, batch {s // config.batch_size}"
                )
            train_losses.append(loss)
            adam.step(params, _collect_grads(grads_src))
        entry = {"epoch": epoch, "train_loss": float(np.mean(train_losses))}
        entry.update(_epoch_val(model, config, X_val))
        curve.append(entry)

    provenance = {
        "train_dataset": train_man.dataset_id,
        "val_dataset": val_man.dataset_id,
        "traffic_filter": config.traffic_filter,
        "train_flows": int(n),
        "val_flows": int(len(X_val)),
        "port_vocab_mode": ("full" if config.port_vocab_size == 0 else f"top{config.port_vocab_size}+OTHER")
        if config.variant == AE_ENTITY
        else None,
        "seed": config.seed,
    }
    return TrainedEncoder(
        config=config,
        model=model,
        curve=curve,
        initial_val=initial_val,
        provenance=provenance,
        schema_digest=SCHEMA.digest(),
    )


def _epoch_val(model, config, X_val):
    if len(X_val) == 0:
        return {"val_mse": float("nan")}
    if config.variant == AE_ENTITY:
        residual = X_val[:, residual_slot_positions()]
        idx = model.remap_indices(cat_indices_from_normalized(X_val))
        return _entity_val_metrics(model, config, residual, idx)
    if config.variant == VAE:
        mus, logvars, recons = [], [], []
        for s in range(0, len(X_val), 256):
            chunk = X_val[s : s + 256][:, None, :].astype(np.float32)
            mu, logvar = model.encode_stats(chunk)
            recons.append(model.decoder.forward(mu, train=False)[:, 0, :])
            mus.append(mu)
            logvars.append(logvar)
        kl, _, _ = kl_unit_gaussian(np.concatenate(mus), np.concatenate(logvars))
        v = _mse64(np.concatenate(recons), X_val)
        return {"val_mse": v, "val_kl": kl, "val_total": v + config.beta * kl}
    recon = _batched(lambda c: model.reconstruct(c[:, None, :]), X_val)
    return {"val_mse": _mse64(recon, X_val)}
