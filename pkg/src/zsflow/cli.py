"""Command-line front end for reproducible runs.

Commands: ``synth``, ``train``, ``generate``, ``eval``, ``verify``.
stdout carries machine-readable JSON only; human-readable progress goes to
stderr. Exit codes: 0 success, 2 usage/config error, 3 I/O or input-data
error, 4 numerical divergence.

Config precedence (lowest to highest): config file, ``ZSFLOW_SEED``
environment variable (seed only), then ``--set key=value`` flags in order.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time

import numpy as np

from . import __version__
from .augment import ContrastiveNet
from .data import (
    SynthConfig,
    generate_synthetic,
    load_dataset_dir,
    save_dataset,
    save_features_csv,
)
from .errors import (
    ConfigurationError,
    InputDataError,
    TrainingDivergenceError,
    ZsflowError,
)
from .flow import FORMAT_VERSION, FlowModel, write_json
from .pipeline import (
    TrainConfig,
    generate_unseen,
    run_ablation,
    run_gzsl,
    run_zsl,
    train_pipeline,
)
from .semantics import embedder_from_doc

ENV_SEED = "ZSFLOW_SEED"


def _log(msg: str) -> None:
    print(msg, file=sys.stderr)


def _emit(doc: dict) -> None:
    print(json.dumps(doc, sort_keys=True, allow_nan=False))


def _sha256(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _load_json_file(path: str) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{path}: invalid JSON ({exc})")


def _parse_set_value(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def _apply_overrides(doc: dict, sets: list[str] | None) -> dict:
    """Apply ZSFLOW_SEED and --set overrides (last wins) to a config dict."""
    doc = dict(doc)
    env_seed = os.environ.get(ENV_SEED)
    if env_seed is not None:
        try:
            doc["seed"] = int(env_seed)
        except ValueError:
            raise ConfigurationError(f"{ENV_SEED} must be an integer, got {env_seed!r}")
    for item in sets or []:
        if "=" not in item:
            raise ConfigurationError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        value = _parse_set_value(raw)
        parts = key.split(".")
        target = doc
        for part in parts[:-1]:
            node = target.get(part)
            if not isinstance(node, dict):
                node = {}
                target[part] = node
            target = node
        target[parts[-1]] = value
    return doc


def _write_manifest(
    path: str, command: str, config: dict, seed: int, artifacts: dict[str, str], t0: float
) -> dict:
    manifest = {
        "tool": "zsflow",
        "version": __version__,
        "command": command,
        "config": config,
        "seed": seed,
        "artifacts": {
            name: {
                "path": os.path.abspath(p),
                "sha256": _sha256(p),
                "bytes": os.path.getsize(p),
            }
            for name, p in artifacts.items()
        },
        "duration_seconds": time.time() - t0,
    }
    write_json(path, manifest)
    return manifest


def _verify_manifest(manifest: dict) -> dict:
    checked = []
    ok = True
    for name, entry in manifest.get("artifacts", {}).items():
        path = entry["path"]
        if not os.path.exists(path):
            checked.append({"artifact": name, "path": path, "ok": False, "error": "missing"})
            ok = False
            continue
        actual = _sha256(path)
        good = actual == entry["sha256"]
        ok = ok and good
        checked.append(
            {"artifact": name, "path": path, "ok": good, "expected": entry["sha256"], "actual": actual}
        )
    return {"ok": ok, "artifacts": checked}


# -- commands ----------------------------------------------------------------


def cmd_synth(args: argparse.Namespace) -> int:
    t0 = time.time()
    doc = _apply_overrides(_load_json_file(args.config), args.set)
    cfg = SynthConfig.from_dict(doc)
    ds = generate_synthetic(cfg)
    paths = save_dataset(ds, args.out)
    manifest_path = os.path.join(args.out, "manifest.json")
    manifest = _write_manifest(manifest_path, "synth", cfg.to_dict(), cfg.seed, paths, t0)
    if args.verify:
        result = _verify_manifest(manifest)
        if not result["ok"]:
            raise InputDataError("post-write verification failed")
        manifest["verified"] = True
    _log(f"wrote {ds.n_samples} samples to {args.out}")
    _emit(manifest)
    return 0


def _model_doc(result, cfg: TrainConfig) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "flow": result.flow.to_doc(),
        "embedder": result.embedder.to_doc(),
        "contrastive": result.contrastive.to_doc() if result.contrastive else None,
        "train_config": cfg.to_dict(),
    }


def _load_model_doc(path: str):
    doc = _load_json_file(path)
    if doc.get("format_version") != FORMAT_VERSION:
        raise ConfigurationError(
            f"{path}: unsupported model format_version {doc.get('format_version')!r}, "
            f"expected {FORMAT_VERSION}"
        )
    flow = FlowModel.from_doc(doc["flow"])
    embedder = embedder_from_doc(doc["embedder"])
    contrastive = (
        ContrastiveNet.from_doc(doc["contrastive"]) if doc.get("contrastive") else None
    )
    return flow, embedder, contrastive, doc


def cmd_train(args: argparse.Namespace) -> int:
    t0 = time.time()
    doc = _apply_overrides(_load_json_file(args.config), args.set)
    cfg = TrainConfig.from_dict(doc)
    ds = load_dataset_dir(args.data)
    _log(f"training on {ds.n_samples} samples ({len(ds.seen_classes)} seen classes)")
    result = train_pipeline(ds, cfg)
    write_json(args.out, _model_doc(result, cfg))
    log_path = args.log or f"{args.out}.log.jsonl"
    tmp = f"{log_path}.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        for entry in result.history:
            fh.write(json.dumps(entry, sort_keys=True, allow_nan=False) + "\n")
    os.replace(tmp, log_path)
    manifest = _write_manifest(
        f"{args.out}.manifest.json",
        "train",
        cfg.to_dict(),
        cfg.seed,
        {"model": args.out, "log": log_path},
        t0,
    )
    if args.verify:
        result_doc = _verify_manifest(manifest)
        if not result_doc["ok"]:
            raise InputDataError("post-write verification failed")
        manifest["verified"] = True
    _emit(manifest)
    return 0


def cmd_generate(args: argparse.Namespace) -> int:
    t0 = time.time()
    flow, embedder, _, _ = _load_model_doc(args.model)
    ds = load_dataset_dir(args.data)
    seed = args.seed
    env_seed = os.environ.get(ENV_SEED)
    if env_seed is not None:
        try:
            seed = int(env_seed)
        except ValueError:
            raise ConfigurationError(f"{ENV_SEED} must be an integer, got {env_seed!r}")
    feats, labels = generate_unseen(
        flow, embedder, ds.attributes, ds.unseen_classes, args.n, seed
    )
    if feats.shape[0] == 0:
        feats = np.empty((0, flow.d_v))
    save_features_csv(args.out, feats, labels)
    manifest = _write_manifest(
        f"{args.out}.manifest.json",
        "generate",
        {"model": os.path.abspath(args.model), "n_per_class": args.n},
        seed,
        {"features": args.out},
        t0,
    )
    if args.verify:
        result_doc = _verify_manifest(manifest)
        if not result_doc["ok"]:
            raise InputDataError("post-write verification failed")
        manifest["verified"] = True
    _log(f"generated {feats.shape[0]} rows")
    _emit(manifest)
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    t0 = time.time()
    doc = _apply_overrides(_load_json_file(args.config), args.set)
    cfg = TrainConfig.from_dict(doc)
    ds = load_dataset_dir(args.data)
    if args.mode == "gzsl":
        report = run_gzsl(ds, cfg).to_json_dict()
    elif args.mode == "zsl":
        report = run_zsl(ds, cfg).to_json_dict()
    else:
        reports = run_ablation(ds, cfg)
        report = {name: rep.to_json_dict() for name, rep in reports.items()}
    if args.out:
        write_json(args.out, report)
        _write_manifest(
            f"{args.out}.manifest.json", "eval", cfg.to_dict(), cfg.seed,
            {"report": args.out}, t0,
        )
    _emit(report)
    return 0


def cmd_verify(args: argparse.Namespace) -> int:
    manifest = _load_json_file(args.manifest)
    result = _verify_manifest(manifest)
    _emit(result)
    return 0 if result["ok"] else 3


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="zsflow",
        description="Conditional-flow feature generation and evaluation for "
        "generalized zero-shot learning.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic benchmark dataset")
    p.add_argument("--config", required=True, help="SynthConfig JSON file")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    p.add_argument("--verify", action="store_true", help="re-hash outputs after writing")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train the generator on a dataset")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--config", required=True, help="TrainConfig JSON file")
    p.add_argument("--out", required=True, help="output model JSON path")
    p.add_argument("--log", help="training-log JSONL path (default: <out>.log.jsonl)")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    p.add_argument("--verify", action="store_true", help="re-hash outputs after writing")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("generate", help="sample unseen-class features from a model")
    p.add_argument("--model", required=True, help="model JSON from `zsflow train`")
    p.add_argument("--data", required=True, help="dataset directory (attributes + split)")
    p.add_argument("--n", type=int, required=True, help="samples per unseen class")
    p.add_argument("--out", required=True, help="output features.csv path")
    p.add_argument("--seed", type=int, default=0, help="generation seed")
    p.add_argument("--verify", action="store_true", help="re-hash outputs after writing")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("eval", help="run the full pipeline and report metrics")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--config", required=True, help="TrainConfig JSON file")
    p.add_argument("--mode", choices=("gzsl", "zsl", "ablation"), default="gzsl")
    p.add_argument("--out", help="also write the report JSON to this path")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("verify", help="re-hash the artifacts listed in a run manifest")
    p.add_argument("--manifest", required=True, help="manifest JSON path")
    p.set_defaults(func=cmd_verify)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except ConfigurationError as exc:
        _log(f"error: {exc}")
        return 2
    except (InputDataError, OSError) as exc:
        _log(f"error: {exc}")
        return 3
    except TrainingDivergenceError as exc:
        _log(f"error: {exc}")
        return 4
    except ZsflowError as exc:
        _log(f"error: {exc}")
        return 2


if __name__ == "__main__":
    sys.exit(main())
