"""flowrep command-line interface.

Every run resolves its configuration, hashes its inputs, and writes a
run manifest beside the outputs so results are auditable. Exit codes:
0 success, 1 runtime failure, 2 usage error. FLOWREP_SEED overrides any
configured seed.
"""

from __future__ import annotations

import argparse
import glob
import hashlib
import json
import logging
import os
import sys
import time
from pathlib import Path

from . import __version__
from .downstream import ClassifierConfig, TrainedClassifier, evaluate, train_classifier, window_embeddings
from .embeddings import embed_store, import_external_embeddings
from .encoders import EncoderConfig, TrainedEncoder, train
from .ingest import DeviceMap, convert_published_dataset, extract_to_store
from .schema import SCHEMA
from .studies import StudySpec, run_study
from .synthetic import generate_synthetic, make_default_profiles, make_shift_profiles

log = logging.getLogger("flowrep")


def _sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_run_manifest(out_dir: Path, command: str, resolved: dict, inputs: list[str]) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "version": __version__,
        "resolved_config": resolved,
        "input_digests": {p: _sha256_file(Path(p)) for p in inputs if Path(p).is_file()},
    }
    (out_dir / "run_manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    with open(out_dir / "run.log", "a") as fh:
        fh.write(f"{time.strftime('%Y-%m-%dT%H:%M:%S')} {command} {json.dumps(resolved, sort_keys=True)}\n")


def _parse_kv_config(path: str) -> dict:
    out = {}
    for raw in Path(path).read_text().splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, _, value = line.partition("=")
        out[key.strip()] = value.strip()
    return out


def _coerce(value: str):
    for cast in (int, float):
        try:
            return cast(value)
        except ValueError:
            pass
    if value.lower() in ("true", "false"):
        return value.lower() == "true"
    return value


def _seed_override(seed: int) -> int:
    env = os.environ.get("FLOWREP_SEED")
    return int(env) if env else seed


def cmd_schema(args) -> int:
    doc = SCHEMA.to_json()
    doc["digest"] = SCHEMA.digest()
    if args.json:
        print(json.dumps(doc, indent=2, sort_keys=True))
    else:
        for f in SCHEMA.fields:
            print(f"{f.start:5d} +{f.length:<5d} {f.name:18s} range [{f.lo:g}, {f.hi:g}]"
                  + ("  categorical" if f.categorical else ""))
    return 0


def cmd_extract(args) -> int:
    paths = sorted(glob.glob(args.pcap))
    if not paths:
        raise FileNotFoundError(f"no pcap files match {args.pcap!r}")
    devices = DeviceMap.from_file(args.devices)
    result = extract_to_store(paths, devices, args.out)
    out_dir = Path(args.out).parent
    _write_run_manifest(out_dir, "extract", vars(args), paths + [args.devices])
    print(json.dumps(result, indent=2))
    return 0


def cmd_convert_dataset(args) -> int:
    result = convert_published_dataset(
        args.archive, args.out, dataset_id=args.dataset_id,
        train_days=args.train_days, val_days=args.val_days,
    )
    _write_run_manifest(Path(args.out), "convert-dataset", vars(args), [args.archive])
    print(json.dumps(result, indent=2))
    return 0


def cmd_gen_synthetic(args) -> int:
    seed = _seed_override(args.seed)
    if args.profiles == "default8":
        profiles = make_default_profiles(8, flows_per_day=args.flows_per_day)
    elif args.profiles == "shift4":
        profiles = make_shift_profiles(4, flows_per_day=args.flows_per_day)
    else:
        raise ValueError(f"unknown profile set {args.profiles!r} (default8 | shift4)")
    result = generate_synthetic(profiles, days=args.days, seed=seed, out_dir=args.out,
                                dataset_id=args.dataset_id)
    _write_run_manifest(Path(args.out), "gen-synthetic", {**vars(args), "seed": seed}, [])
    print(json.dumps(result, indent=2))
    return 0


def cmd_train_encoder(args) -> int:
    raw = {k: _coerce(v) for k, v in _parse_kv_config(args.config).items()}
    raw["seed"] = _seed_override(int(raw.get("seed", 0)))
    if "entity_dims" in raw:
        raw["entity_dims"] = tuple(int(x) for x in str(raw["entity_dims"]).split(","))
    config = EncoderConfig(**raw)
    encoder = train(config, args.train, args.val)
    encoder.save(args.out)
    _write_run_manifest(Path(args.out).parent, "train-encoder", config.to_dict(),
                        [args.config, args.train, args.val])
    last = encoder.curve[-1]
    print(json.dumps({"checkpoint": args.out, "epochs": len(encoder.curve),
                      "final": last, "fingerprint": encoder.fingerprint()}, indent=2))
    return 0


def cmd_embed(args) -> int:
    encoder = TrainedEncoder.load(args.encoder)
    count = embed_store(encoder, args.infile, args.out)
    _write_run_manifest(Path(args.out).parent, "embed", vars(args), [args.encoder, args.infile])
    print(json.dumps({"rows": count, "dim": encoder.embedding_dim, "out": args.out}, indent=2))
    return 0


def cmd_import_embeddings(args) -> int:
    result = import_external_embeddings(args.infile, args.dim, args.out)
    _write_run_manifest(Path(args.out).parent, "import-embeddings", vars(args), [args.infile])
    print(json.dumps(result, indent=2))
    return 0


def cmd_train_classifier(args) -> int:
    raw = {k: _coerce(v) for k, v in _parse_kv_config(args.config).items()} if args.config else {}
    raw["seed"] = _seed_override(int(raw.get("seed", 0)))
    config = ClassifierConfig(**raw)
    train_inst = window_embeddings(args.train, stride=args.stride)
    val_inst = window_embeddings(args.val, stride=args.stride)
    clf = train_classifier(train_inst, val_inst, config)
    clf.save(args.out)
    _write_run_manifest(Path(args.out).parent, "train-classifier", vars(args),
                        [p for p in (args.train, args.val, args.config) if p])
    print(json.dumps({"checkpoint": args.out, "classes": clf.label_order,
                      "parameters": clf.parameter_count, "stopped_epoch": clf.stopped_epoch,
                      "best_epoch": clf.best_epoch}, indent=2))
    return 0


def cmd_evaluate(args) -> int:
    clf = TrainedClassifier.load(args.classifier)
    instances = window_embeddings(args.test, stride=args.stride)
    report = evaluate(clf, instances, per_class_cap=args.cap, seed=_seed_override(args.seed))
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    report.write(out_dir / "eval.report.json", out_dir / "eval.confusion.csv")
    _write_run_manifest(out_dir, "evaluate", vars(args), [args.classifier, args.test])
    print(json.dumps({"accuracy": report.accuracy, "macro_f1": report.macro_f1,
                      "report": str(out_dir / "eval.report.json")}, indent=2))
    return 0


def cmd_study(args) -> int:
    spec = StudySpec.read(args.spec)
    if args.out:
        spec.out_dir = args.out
    report = run_study(spec)
    _write_run_manifest(Path(spec.out_dir), "study", {"spec": args.spec, "kind": spec.kind}, [args.spec])
    print(json.dumps({"study": spec.kind, "out_dir": spec.out_dir,
                      "config_hash": report.get("config_hash")}, indent=2))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="flowrep", description="Flow representation learning pipeline")
    parser.add_argument("--version", action="version", version=f"flowrep {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("schema", help="dump the 3040-slot vector schema")
    p.add_argument("--json", action="store_true")
    p.set_defaults(fn=cmd_schema)

    p = sub.add_parser("extract", help="pcaps -> flow store")
    p.add_argument("--pcap", required=True, help="glob of classic pcap files")
    p.add_argument("--devices", required=True, help="two-column device map (identifier label)")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_extract)

    p = sub.add_parser("convert-dataset", help="published flow archive -> stores + manifests")
    p.add_argument("--archive", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--dataset-id", default="data16")
    p.add_argument("--train-days", type=int, default=7)
    p.add_argument("--val-days", type=int, default=5)
    p.set_defaults(fn=cmd_convert_dataset)

    p = sub.add_parser("gen-synthetic", help="generate a synthetic labeled corpus")
    p.add_argument("--profiles", default="default8")
    p.add_argument("--days", type=int, default=10)
    p.add_argument("--flows-per-day", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dataset-id", default="synthetic")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_gen_synthetic)

    p = sub.add_parser("train-encoder", help="unsupervised encoder training")
    p.add_argument("--config", required=True, help="key = value encoder config file")
    p.add_argument("--train", required=True, help="train manifest")
    p.add_argument("--val", required=True, help="validation manifest")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.set_defaults(fn=cmd_train_encoder)

    p = sub.add_parser("embed", help="frozen-encoder embedding extraction")
    p.add_argument("--encoder", required=True)
    p.add_argument("--in", dest="infile", required=True, help="flow store")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_embed)

    p = sub.add_parser("import-embeddings", help="external embedding CSV -> native format")
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--dim", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_import_embeddings)

    p = sub.add_parser("train-classifier", help="train the downstream classifier")
    p.add_argument("--train", required=True, help="training embedding file")
    p.add_argument("--val", required=True, help="validation embedding file")
    p.add_argument("--config", default=None, help="key = value classifier config file")
    p.add_argument("--stride", type=int, default=5)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_train_classifier)

    p = sub.add_parser("evaluate", help="evaluate a trained classifier")
    p.add_argument("--classifier", required=True)
    p.add_argument("--test", required=True, help="test embedding file")
    p.add_argument("--cap", type=int, default=10_000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--stride", type=int, default=5)
    p.add_argument("--out", required=True, help="report directory")
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("study", help="run a study spec")
    p.add_argument("--spec", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(fn=cmd_study)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    try:
        return args.fn(args)
    except (ValueError, OSError, KeyError, AssertionError) as e:
        log.error("%s: %s", type(e).__name__, e)
        return 1


if __name__ == "__main__":
    sys.exit(main())
