"""Scripted reproductions of the representation and classification studies.

Every study returns (and writes) a machine-readable report carrying a
config hash, the seeds, and dataset ids, so identical inputs reproduce
identical report JSON. Wall-clock timings appear only as relative values
(hardware-dependent absolutes are not asserted anywhere).
"""

from __future__ import annotations

import csv
import hashlib
import json
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import downstream, encoders, synthetic
from .downstream import ClassifierConfig, cap_per_class_chronological, train_classifier, window_embeddings
from .embeddings import embed_store, read_embeddings
from .encoders import EncoderConfig, TrafficFilter, TrainedEncoder, load_manifest_slots, train
from .featurize import normalize_slots
from .metrics import EvalReport
from .schema import PROTOCOL, PROTO_TCP, PROTO_UDP, REMOTE_PORT, SCHEMA, DatasetManifest
from .store import read_flow_store

DEPTH_GRID = (1, 2, 4, 8)
LATENT_GRID = (10, 20, 40, 80)
BETA_GRID = (1e-4, 1e-3, 0.002, 0.004, 1e-2, 1e-1, 1.0, 10.0, 100.0, 1e3, 1e4)
ADOPTED_CELL = {"depth": 4, "latent_dim": 40}

NODES_GRID = (40, 64, 128, 256, 512)
BLOCKS_GRID = (1, 2, 3, 4)
INSTANCES_GRID = (125, 250, 500, 1000, 2000, 4000, 8000)
ABLATION_SEEDS = (0, 1, 2, 3, 4)


def desk_encoder_config(variant: str = encoders.AE, **overrides) -> EncoderConfig:
    """Small-but-faithful defaults for laptop-scale studies.

    Paper-scale values (128 channels, 100 epochs, 1024-port heads) remain
    available by passing them explicitly.
    """
    params = dict(
        variant=variant,
        depth=2,
        latent_dim=40,
        channels=16,
        epochs=20,
        batch_size=64,
        learning_rate=1e-3,
        port_vocab_size=256,
        allow_custom_grid=True,
    )
    params.update(overrides)
    return EncoderConfig(**params)


def _config_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:16]


def _envelope(study: str, params: dict, seeds, dataset_ids) -> dict:
    h = _config_hash({"study": study, "params": params, "seeds": list(seeds)})
    return {
        "study": study,
        "config_hash": h,
        "seeds": list(seeds),
        "dataset_ids": list(dataset_ids),
        "provenance": f"{study}@{h} seeds={list(seeds)} data={list(dataset_ids)}",
    }


def write_report(out_dir: str | Path, name: str, report: dict, csv_rows: list[dict] | None = None) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / f"{name}.json"
    path.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    if csv_rows:
        with open(out_dir / f"{name}.csv", "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(csv_rows[0].keys()))
            writer.writeheader()
            writer.writerows(csv_rows)
    return path


# --- reconstruction-side studies ------------------------------------------


def grid_search_ae(
    train_manifest,
    val_manifest,
    out_dir: str | Path,
    depths=DEPTH_GRID,
    latents=LATENT_GRID,
    base_config: EncoderConfig | None = None,
) -> dict:
    """Depth x latent grid of fresh autoencoders sharing one seed."""
    base = base_config or desk_encoder_config(encoders.AE)
    cells = []
    for n in depths:
        for i in latents:
            config = replace(base, variant=encoders.AE, depth=n, latent_dim=i, allow_custom_grid=True)
            cell = {"depth": n, "latent_dim": i, "seed": config.seed}
            try:
                enc = train(config, train_manifest, val_manifest)
                cell["initial_val_mse"] = enc.initial_val["val_mse"]
                cell["curve_val_mse"] = [e["val_mse"] for e in enc.curve]
                cell["final_val_mse"] = enc.curve[-1]["val_mse"]
                cell["adopted"] = (n == ADOPTED_CELL["depth"] and i == ADOPTED_CELL["latent_dim"])
            except Exception as e:  # annotate the cell, keep the grid going
                cell["error"] = f"{type(e).__name__}: {e}"
            cells.append(cell)
    man = encoders._resolve_manifest(train_manifest)
    report = _envelope("grid_search_ae", {"depths": list(depths), "latents": list(latents)}, [base.seed], [man.dataset_id])
    report["cells"] = cells
    report["epochs"] = base.epochs
    rows = [
        {k: cell.get(k) for k in ("depth", "latent_dim", "initial_val_mse", "final_val_mse", "adopted", "error")}
        for cell in cells
    ]
    write_report(out_dir, "grid_search_ae", report, rows)
    return report


def feature_reconstruction_report(encoder: TrainedEncoder, val_manifest, out_dir: str | Path | None = None) -> dict:
    """Per-field reconstruction MSE on the validation set."""
    raw = load_manifest_slots(val_manifest)
    X = normalize_slots(raw).astype(np.float32)
    recon = encoder.reconstruct_matrix(X)
    err = (recon.astype(np.float64) - X) ** 2
    fields = []
    for f in SCHEMA.fields:
        fields.append({"field": f.name, "slots": f.length, "mse": float(err[:, f.indices].mean())})
    global_mse = float(err.mean())
    ordering = [row["field"] for row in sorted(fields, key=lambda r: -r["mse"])]
    report = _envelope("feature_reconstruction", {"fields": len(fields)}, [encoder.config.seed], [encoder.provenance.get("train_dataset", "?")])
    report.update({"per_field": fields, "global_mse": global_mse, "ordering_by_mse": ordering, "flows": int(len(X))})
    if out_dir is not None:
        write_report(out_dir, "feature_reconstruction", report, fields)
    return report


def protocol_separability(encoder: TrainedEncoder, val_manifest, out_dir: str | Path | None = None,
                          low_threshold: float = 11.5, high_threshold: float = 21.0) -> dict:
    """Distribution of the reconstructed (raw-domain) protocol value,
    conditioned on the true transport protocol."""
    raw = load_manifest_slots(val_manifest)
    X = normalize_slots(raw).astype(np.float32)
    recon = encoder.reconstruct_matrix(X)
    lo, hi = SCHEMA.lo[PROTOCOL], SCHEMA.hi[PROTOCOL]
    value = lo + (recon[:, PROTOCOL].astype(np.float64) - 0.5) * 2.0 * (hi - lo)
    truth = raw[:, PROTOCOL]

    def _stats(mask):
        if not mask.any():
            return None  # undefined for an absent class, never zero
        v = value[mask]
        return {
            "count": int(mask.sum()),
            "median": float(np.median(v)),
            f"frac_below_{low_threshold}": float(np.mean(v < low_threshold)),
            f"frac_above_{high_threshold}": float(np.mean(v > high_threshold)),
        }

    report = _envelope("protocol_separability", {"low": low_threshold, "high": high_threshold},
                       [encoder.config.seed], [encoder.provenance.get("train_dataset", "?")])
    report["tcp"] = _stats(truth == PROTO_TCP)
    report["udp"] = _stats(truth == PROTO_UDP)
    if out_dir is not None:
        write_report(out_dir, "protocol_separability", report)
    return report


def beta_sweep(
    train_manifest,
    val_manifest,
    out_dir: str | Path,
    betas=BETA_GRID,
    base_config: EncoderConfig | None = None,
) -> dict:
    """Reconstruction/KL trade-off across the beta grid."""
    base = base_config or desk_encoder_config(encoders.VAE)
    rows = []
    for beta in betas:
        config = replace(base, variant=encoders.VAE, beta=float(beta))
        enc = train(config, train_manifest, val_manifest)
        last = enc.curve[-1]
        rows.append({"beta": float(beta), "val_recon_mse": last["val_mse"], "val_kl": last["val_kl"]})
    man = encoders._resolve_manifest(train_manifest)
    report = _envelope("beta_sweep", {"betas": [float(b) for b in betas]}, [base.seed], [man.dataset_id])
    report["rows"] = rows
    first, last = rows[0], rows[-1]
    report["summary"] = {
        "kl_drops_with_beta": last["val_kl"] <= first["val_kl"],
        "recon_rises_with_beta": last["val_recon_mse"] >= first["val_recon_mse"],
    }
    write_report(out_dir, "beta_sweep", report, rows)
    return report


def distribution_shift_study(
    train_manifest,
    val_manifest,
    out_dir: str | Path,
    base_config: EncoderConfig | None = None,
    focus: str = "tcp/443",
) -> dict:
    """Train AE-limited and VAE-limited on one traffic class; compare
    reconstruction on the seen class vs the rest of the validation set."""
    base = base_config or desk_encoder_config(encoders.AE)
    seen_filter = TrafficFilter(f"only:{focus}")
    shift_filter = TrafficFilter(f"except:{focus}")

    raw_val = load_manifest_slots(val_manifest)
    seen_raw = raw_val[seen_filter.mask(raw_val)]
    shifted_raw = raw_val[shift_filter.mask(raw_val)]
    if seen_filter.mask(shifted_raw).any():
        raise AssertionError("shifted evaluation set still contains the focus traffic class")
    X_seen = normalize_slots(seen_raw).astype(np.float32)
    X_shift = normalize_slots(shifted_raw).astype(np.float32)

    variants = {}
    for variant in (encoders.AE, encoders.VAE):
        config = replace(base, variant=variant, traffic_filter=f"only:{focus}")
        enc = train(config, train_manifest, val_manifest)
        seen_mse = enc.reconstruction_mse(X_seen)
        shifted_mse = enc.reconstruction_mse(X_shift)
        variants[f"{variant}_limited"] = {
            "seen_mse": seen_mse,
            "shifted_mse": shifted_mse,
            "degradation_ratio": shifted_mse / seen_mse if seen_mse > 0 else float("inf"),
            "filter": config.traffic_filter,
            "train_flows": enc.provenance["train_flows"],
        }
    man = encoders._resolve_manifest(train_manifest)
    report = _envelope("distribution_shift", {"focus": focus}, [base.seed], [man.dataset_id])
    report["variants"] = variants
    report["seen_flows"] = int(len(X_seen))
    report["shifted_flows"] = int(len(X_shift))
    report["ae_ratio_exceeds_vae"] = (
        variants["ae_limited"]["degradation_ratio"] > variants["vae_limited"]["degradation_ratio"]
    )
    write_report(out_dir, "distribution_shift", report)
    return report


# --- classifier-side studies ----------------------------------------------


def _train_eval_classifier(train_emb, val_emb, eval_emb, config: ClassifierConfig):
    train_inst = window_embeddings(train_emb)
    val_inst = window_embeddings(val_emb)
    eval_inst = window_embeddings(eval_emb) if eval_emb is not None else val_inst
    t0 = time.perf_counter()
    clf = train_classifier(train_inst, val_inst, config)
    train_time = time.perf_counter() - t0
    report = downstream.evaluate(clf, eval_inst, per_class_cap=10_000, seed=config.seed)
    return clf, report, train_time


def classifier_ablations(
    kind: str,
    train_emb,
    val_emb,
    out_dir: str | Path,
    seeds=ABLATION_SEEDS,
    base_config: ClassifierConfig | None = None,
    grid=None,
) -> dict:
    """Node-count / depth / instance-cap ablations, averaged over seeds."""
    base = base_config or ClassifierConfig(batch_size=16)
    grids = {"nodes": NODES_GRID, "depth": BLOCKS_GRID, "instances": INSTANCES_GRID}
    if kind not in grids:
        raise ValueError(f"ablation kind must be one of {sorted(grids)}, got {kind!r}")
    grid = tuple(grid) if grid is not None else grids[kind]

    train_set = read_embeddings(train_emb) if not hasattr(train_emb, "vectors") else train_emb
    val_set = read_embeddings(val_emb) if not hasattr(val_emb, "vectors") else val_emb

    rows = []
    for value in grid:
        epochs, times, f1s, params = [], [], [], None
        for seed in seeds:
            if kind == "nodes":
                config = replace(base, units=int(value), seed=seed)
            elif kind == "depth":
                config = replace(base, blocks=int(value), seed=seed)
            else:
                config = replace(base, max_per_class=int(value), seed=seed)
            clf, report, train_time = _train_eval_classifier(train_set, val_set, None, config)
            epochs.append(clf.stopped_epoch)
            times.append(train_time)
            f1s.append(report.macro_f1)
            params = clf.parameter_count
        rows.append(
            {
                kind: value,
                "params": params,
                "mean_epochs": float(np.mean(epochs)),
                "mean_train_time_s": float(np.mean(times)),
                "mean_macro_f1": float(np.mean(f1s)),
                "seeds": list(seeds),
            }
        )
    ref = rows[0]
    for row in rows:
        row["delta_params_pct"] = 100.0 * (row["params"] - ref["params"]) / ref["params"]
        row["delta_train_time_pct"] = 100.0 * (row["mean_train_time_s"] - ref["mean_train_time_s"]) / ref["mean_train_time_s"]
        row["delta_f1_pct"] = 100.0 * (row["mean_macro_f1"] - ref["mean_macro_f1"]) / max(ref["mean_macro_f1"], 1e-12)

    report = _envelope(f"ablation_{kind}", {"grid": list(grid)}, seeds, ["embeddings"])
    report["reference_row"] = {kind: ref[kind]}
    report["rows"] = rows
    csv_rows = [{k: r[k] for k in (kind, "params", "mean_epochs", "delta_train_time_pct", "mean_macro_f1", "delta_f1_pct")} for r in rows]
    write_report(out_dir, f"ablation_{kind}", report, csv_rows)
    return report


def encoder_comparison(
    embedding_files: dict[str, dict[str, dict[str, str]]],
    out_dir: str | Path,
    config: ClassifierConfig | None = None,
) -> dict:
    """Accuracy/macro-F1 matrix over encoders x datasets.

    embedding_files[encoder][dataset] = {"train": path, "val": path, "test": path}.
    One classifier per cell under the fixed reference configuration.
    """
    config = config or ClassifierConfig()
    out_dir = Path(out_dir)
    matrix = {}
    for enc_name, datasets in embedding_files.items():
        matrix[enc_name] = {}
        for ds_name, paths in datasets.items():
            clf, report, _ = _train_eval_classifier(paths["train"], paths["val"], paths.get("test"), config)
            cell_dir = out_dir / f"{enc_name}_{ds_name}"
            report.write(cell_dir.with_suffix(".report.json"), cell_dir.with_suffix(".confusion.csv"))
            matrix[enc_name][ds_name] = {"accuracy": report.accuracy, "macro_f1": report.macro_f1}
    report = _envelope("encoder_comparison", {"encoders": sorted(embedding_files)}, [config.seed], sorted({d for v in embedding_files.values() for d in v}))
    report["matrix"] = matrix
    write_report(out_dir, "encoder_comparison", report)
    return report


def cross_environment_eval(
    encoder: TrainedEncoder,
    classifier,
    target_store: str | Path,
    out_dir: str | Path,
    per_class_cap: int = 10_000,
    seed: int = 0,
) -> EvalReport:
    """Frozen encoder + frozen classifier on an unseen environment."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    emb_path = out_dir / "target_embeddings.csv"
    embed_store(encoder, target_store, emb_path)
    instances = window_embeddings(str(emb_path))
    target_labels = sorted({i.label for i in instances})
    extra = [lab for lab in target_labels if lab not in classifier.label_order]
    report = downstream.evaluate(classifier, instances, per_class_cap=per_class_cap, seed=seed)
    report.extras["extra_target_labels"] = extra
    report.extras["per_class_recall"] = {
        lab: report.per_class[lab]["recall"] for lab in report.label_order if report.per_class[lab]["support"] > 0
    }
    report.write(out_dir / "cross_env.report.json", out_dir / "cross_env.confusion.csv")
    return report


# --- study spec / dispatch --------------------------------------------------


@dataclass
class StudySpec:
    kind: str
    manifests: dict[str, str] = field(default_factory=dict)
    embeddings: dict[str, str] = field(default_factory=dict)
    params: dict = field(default_factory=dict)
    seeds: list[int] = field(default_factory=lambda: [0])
    out_dir: str = "study_out"

    @classmethod
    def read(cls, path: str | Path) -> "StudySpec":
        kind, out_dir = None, "study_out"
        manifests, embeddings, params, seeds = {}, {}, {}, []
        for raw in Path(path).read_text().splitlines():
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            key, _, value = line.partition("=")
            key, value = key.strip(), value.strip()
            if key == "kind":
                kind = value
            elif key == "out_dir":
                out_dir = value
            elif key == "seed":
                seeds.append(int(value))
            elif key.startswith("manifest "):
                manifests[key.split(None, 1)[1]] = value
            elif key.startswith("embeddings "):
                embeddings[key.split(None, 1)[1]] = value
            elif key.startswith("param "):
                params[key.split(None, 1)[1]] = value
            else:
                raise ValueError(f"unknown study-spec line: {raw!r}")
        if kind is None:
            raise ValueError(f"{path}: study spec needs a 'kind = ...' line")
        return cls(kind=kind, manifests=manifests, embeddings=embeddings,
                   params=params, seeds=seeds or [0], out_dir=out_dir)


def run_study(spec: StudySpec) -> dict:
    """Dispatch a parsed study spec; returns the report dict."""
    p = spec.params
    epochs = int(p.get("epochs", 20))
    channels = int(p.get("channels", 16))
    seed = spec.seeds[0]
    if spec.kind == "grid_search_ae":
        base = desk_encoder_config(encoders.AE, epochs=epochs, channels=channels, seed=seed)
        depths = tuple(int(x) for x in p.get("depths", "1,2,4,8").split(","))
        latents = tuple(int(x) for x in p.get("latents", "10,20,40,80").split(","))
        return grid_search_ae(spec.manifests["train"], spec.manifests["val"], spec.out_dir,
                              depths, latents, base)
    if spec.kind == "beta_sweep":
        base = desk_encoder_config(encoders.VAE, epochs=epochs, channels=channels, seed=seed)
        betas = tuple(float(x) for x in p.get("betas", ",".join(str(b) for b in BETA_GRID)).split(","))
        return beta_sweep(spec.manifests["train"], spec.manifests["val"], spec.out_dir, betas, base)
    if spec.kind == "distribution_shift":
        base = desk_encoder_config(encoders.AE, epochs=epochs, channels=channels, seed=seed)
        return distribution_shift_study(spec.manifests["train"], spec.manifests["val"], spec.out_dir,
                                        base, p.get("focus", "tcp/443"))
    if spec.kind in ("ablation_nodes", "ablation_depth", "ablation_instances"):
        kind = spec.kind.split("_", 1)[1]
        base = ClassifierConfig(batch_size=int(p.get("batch_size", 16)))
        grid = tuple(int(x) for x in p["grid"].split(",")) if "grid" in p else None
        return classifier_ablations(kind, spec.embeddings["train"], spec.embeddings["val"],
                                    spec.out_dir, spec.seeds, base, grid)
    if spec.kind == "feature_reconstruction":
        enc = TrainedEncoder.load(p["encoder"])
        return feature_reconstruction_report(enc, spec.manifests["val"], spec.out_dir)
    if spec.kind == "protocol_separability":
        enc = TrainedEncoder.load(p["encoder"])
        return protocol_separability(enc, spec.manifests["val"], spec.out_dir)
    raise ValueError(f"unknown study kind {spec.kind!r}")
