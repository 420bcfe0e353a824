"""Operator CLI: forge, tokenize, pretrain, finetune, classify, eval, compare.

Batch/offline only. Exit codes: 0 success, 2 usage or config error, 3 data
error, 4 internal invariant violation. stdout carries only the primary
artifact or report; diagnostics go to stderr. Every file-producing run writes
a JSON run manifest (atomically, last) so pipelines are reproducible from
manifests alone. The SENTINEL_THREADS environment variable caps worker count;
this implementation executes subcommands single-threaded (the deterministic
reference semantics), which trivially honors any cap >= 1.

Training tunables live in a JSON config file (``--config``), flags override:

    {
      "model":    {"d_model": 64, "n_layers": 2, "n_heads": 4, "d_ff": 128},
      "schedule": {"epochs": 3, "batch_size": 64, "lr": 0.001,
                   "beta1": 0.9, "beta2": 0.999, "eps": 1e-8, "mask_frac": 0.15},
      "seed": 0,
      "freeze": ["tok_emb", "pos_emb", "layers.0"],
      "holdout_frac": 0.2,
      "stop_macro_recall": null
    }
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time

from . import CLASS_NAMES, CLASS_TO_ID
from . import dataset as ds_mod
from . import forge as forge_mod
from . import metrics as metrics_mod
from .lang import build_vocabulary, render_sentence, tokenize_stream
from .model import (
    CheckpointError,
    CompatibilityError,
    EmptyCorpus,
    ModelConfig,
    ParamBundle,
    load_checkpoint,
    predict_batch,
    save_checkpoint,
)
from .packets import decode_frame
from .pcap import BadMagic, RecordTooLong, TruncatedRecord, read_pcap
from .train import TrainSchedule, finetune, pretrain, to_arrays, write_log_csv

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_INTERNAL = 4


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


def _info(msg: str) -> None:
    print(msg, file=sys.stderr)


def _sha256_file(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _atomic_write(path: str, data: bytes | str) -> None:
    mode = "wb" if isinstance(data, bytes) else "w"
    tmp = path + ".tmp"
    with open(tmp, mode) as fh:
        fh.write(data)
    os.replace(tmp, path)


def _read_file(path: str, binary=True):
    try:
        with open(path, "rb" if binary else "r") as fh:
            return fh.read()
    except FileNotFoundError:
        raise UsageError(f"no such file: {path}") from None
    except IsADirectoryError:
        raise UsageError(f"expected a file: {path}") from None


def _load_json(path: str) -> dict:
    text = _read_file(path, binary=False)
    try:
        return json.loads(text)
    except json.JSONDecodeError as e:
        raise UsageError(f"{path}: invalid JSON: {e}") from None


def _check_threads_env() -> int:
    raw = os.environ.get("SENTINEL_THREADS")
    if raw is None:
        return 1
    try:
        cap = int(raw)
        if cap < 1:
            raise ValueError
    except ValueError:
        raise UsageError(f"SENTINEL_THREADS={raw!r}: expected a positive integer") from None
    return cap


def _write_manifest(path: str, doc: dict) -> None:
    _atomic_write(path, json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _manifest_base(subcommand: str, args_doc: dict, started: float) -> dict:
    return {
        "subcommand": subcommand,
        "resolved": args_doc,
        "wall_seconds": time.time() - started,
    }


# ------------------------------------------------------------- train config


_SCHEDULE_KEYS = {"epochs", "batch_size", "lr", "beta1", "beta2", "eps",
                  "mask_frac", "mask_token_prob", "random_token_prob"}
_MODEL_KEYS = {"d_model", "n_layers", "n_heads", "d_ff", "max_len", "n_classes", "dropout"}
_TRAIN_KEYS = {"model", "schedule", "seed", "freeze", "holdout_frac", "stop_macro_recall"}

DEFAULT_FREEZE = ["tok_emb", "pos_emb", "layers.0"]


def _load_train_config(path: str | None) -> dict:
    if path is None:
        return {}
    doc = _load_json(path)
    for key in doc:
        if key not in _TRAIN_KEYS:
            raise UsageError(f"{path}: {key}: unknown key")
    for section, allowed in (("model", _MODEL_KEYS), ("schedule", _SCHEDULE_KEYS)):
        for key in doc.get(section, {}):
            if key not in allowed:
                raise UsageError(f"{path}: {section}.{key}: unknown key")
    return doc


def _resolve_training(doc: dict, vocab_size: int, seed_flag: int | None, epochs_flag: int | None):
    model_args = dict(doc.get("model", {}))
    schedule_args = dict(doc.get("schedule", {}))
    if epochs_flag is not None:
        schedule_args["epochs"] = epochs_flag
    try:
        config = ModelConfig(vocab_size=vocab_size, **model_args)
        schedule = TrainSchedule(**schedule_args)
    except (TypeError, ValueError) as e:
        raise UsageError(f"bad training config: {e}") from None
    seed = seed_flag if seed_flag is not None else int(doc.get("seed", 0))
    return config, schedule, seed


def _load_dataset(path: str) -> ds_mod.TokenDataset:
    data = _read_file(path)
    try:
        if data[:4] == ds_mod.DATASET_MAGIC:
            return ds_mod.read_binary(data)
        return ds_mod.read_jsonl(data.decode("utf-8"))
    except (ds_mod.DatasetError, UnicodeDecodeError, json.JSONDecodeError, KeyError) as e:
        raise DataError(f"{path}: {e}") from None


def _require_vocab_match(found: bytes, expected: bytes, what: str) -> None:
    if found != expected:
        raise DataError(f"{what}: vocabulary hash mismatch")


# -------------------------------------------------------------- subcommands


def cmd_forge(args) -> int:
    started = time.time()
    doc = _load_json(args.config)
    try:
        if args.seed is not None:
            doc["seed"] = args.seed
        config = forge_mod.config_from_dict(doc)
    except forge_mod.InvalidConfig as e:
        raise UsageError(str(e)) from None
    _info(f"forging scenario (seed {config.seed}) ...")
    capture = forge_mod.forge(config)
    os.makedirs(args.out, exist_ok=True)
    pcap_path = os.path.join(args.out, "capture.pcap")
    labels_path = os.path.join(args.out, "labels.jsonl")
    manifest_path = os.path.join(args.out, "manifest.json")
    _atomic_write(pcap_path, capture.pcap_bytes)
    _atomic_write(labels_path, forge_mod.labels_jsonl(capture))
    manifest = dict(capture.manifest)
    manifest.update(_manifest_base("forge", {"config": args.config, "out": args.out}, started))
    manifest["outputs"] = {
        "capture.pcap": manifest["pcap_sha256"],
        "labels.jsonl": hashlib.sha256(forge_mod.labels_jsonl(capture).encode()).hexdigest(),
    }
    _write_manifest(manifest_path, manifest)
    _info(f"wrote {len(capture.records)} records, classes {manifest['class_counts']}")
    return EXIT_OK


def _read_capture(path: str):
    data = _read_file(path)
    try:
        return read_pcap(data)
    except (BadMagic, TruncatedRecord) as e:
        raise DataError(f"{path}: {e}") from None


def _read_labels_sidecar(path: str, n_records: int):
    text = _read_file(path, binary=False)
    labels = []
    for i, line in enumerate(ln for ln in text.splitlines() if ln.strip()):
        try:
            row = json.loads(line)
            if row["index"] != i:
                raise DataError(f"{path}: line {i}: index out of order")
            labels.append(CLASS_TO_ID[row["label"]])
        except (json.JSONDecodeError, KeyError) as e:
            raise DataError(f"{path}: line {i}: {e}") from None
    if len(labels) != n_records:
        raise DataError(f"{path}: {len(labels)} labels for {n_records} records")
    return labels


def cmd_tokenize(args) -> int:
    started = time.time()
    _check_threads_env()
    meta, records = _read_capture(args.pcap)
    labels = _read_labels_sidecar(args.labels, len(records)) if args.labels else None
    vocab = build_vocabulary()
    _info(f"tokenizing {len(records)} records ...")
    packets = [decode_frame(r.frame, r.timestamp_us) for r in records]
    seqs = tokenize_stream(packets, vocab)
    dataset = ds_mod.from_seqs(seqs, vocab, labels)
    if args.format == "binary":
        payload: bytes | str = ds_mod.write_binary(dataset)
    else:
        payload = ds_mod.write_jsonl(dataset)
    _atomic_write(args.out, payload)
    if args.vocab_out:
        _atomic_write(args.vocab_out, vocab.export_text())
    manifest = _manifest_base(
        "tokenize",
        {"pcap": args.pcap, "labels": args.labels, "out": args.out, "format": args.format},
        started,
    )
    manifest["inputs"] = {args.pcap: _sha256_file(args.pcap)}
    manifest["outputs"] = {args.out: _sha256_file(args.out)}
    manifest["record_count"] = len(records)
    manifest["vocab_sha256"] = vocab.sha256().hex()
    _write_manifest(args.out + ".manifest.json", manifest)
    _info(f"wrote {len(seqs)} sequences to {args.out}")
    return EXIT_OK


def cmd_pretrain(args) -> int:
    started = time.time()
    _check_threads_env()
    dataset = _load_dataset(args.dataset)
    vocab = build_vocabulary()
    _require_vocab_match(dataset.vocab_hash, vocab.sha256(), args.dataset)
    doc = _load_train_config(args.config)
    config, schedule, seed = _resolve_training(doc, len(vocab), args.seed, args.epochs)
    _info(f"pretraining on {len(dataset)} sequences, {schedule.epochs} epochs, seed {seed} ...")
    try:
        params, history = pretrain(dataset.to_seqs(), config, schedule, seed, vocab)
    except EmptyCorpus as e:
        raise DataError(str(e)) from None
    blob = save_checkpoint(params, vocab.sha256())
    _atomic_write(args.out, blob)
    log_path = args.log or (args.out + ".log.csv")
    write_log_csv(history, log_path)
    manifest = _manifest_base(
        "pretrain",
        {"dataset": args.dataset, "config": args.config, "seed": seed, "out": args.out,
         "deterministic": args.deterministic},
        started,
    )
    manifest["inputs"] = {args.dataset: _sha256_file(args.dataset)}
    manifest["outputs"] = {args.out: _sha256_file(args.out), log_path: _sha256_file(log_path)}
    manifest["final_loss"] = history[-1].loss
    _write_manifest(args.out + ".manifest.json", manifest)
    _info(f"pretrain loss {history[0].loss:.4f} -> {history[-1].loss:.4f}")
    return EXIT_OK


def cmd_finetune(args) -> int:
    started = time.time()
    _check_threads_env()
    dataset = _load_dataset(args.dataset)
    if not dataset.labeled:
        raise DataError(f"{args.dataset}: fine-tuning needs a labeled dataset")
    vocab = build_vocabulary()
    _require_vocab_match(dataset.vocab_hash, vocab.sha256(), args.dataset)
    doc = _load_train_config(args.config)
    config, schedule, seed = _resolve_training(doc, len(vocab), args.seed, args.epochs)
    freeze = doc.get("freeze", DEFAULT_FREEZE if args.init else [])
    stop = doc.get("stop_macro_recall")

    if args.init:
        blob = _read_file(args.init)
        try:
            params, _ = load_checkpoint(blob, expect_vocab_hash=dataset.vocab_hash)
        except CompatibilityError as e:
            raise DataError(f"{args.init}: {e}") from None
        except CheckpointError as e:
            raise DataError(f"{args.init}: {e}") from None
        config = params.config
    else:
        from .rng import derive_stream_seed
        from .train import INIT_STREAM

        params = ParamBundle.initialize(config, derive_stream_seed(seed, INIT_STREAM))

    train_ds, eval_ds = dataset, None
    if args.eval_dataset:
        eval_ds = _load_dataset(args.eval_dataset)
        if not eval_ds.labeled:
            raise DataError(f"{args.eval_dataset}: evaluation dataset must be labeled")
        _require_vocab_match(eval_ds.vocab_hash, vocab.sha256(), args.eval_dataset)
    elif doc.get("holdout_frac"):
        frac = float(doc["holdout_frac"])
        n_eval = int(len(dataset) * frac)
        train_ds, eval_ds = ds_mod.split_dataset(dataset, len(dataset) - n_eval, n_eval, seed)

    _info(f"fine-tuning on {len(train_ds)} sequences, {schedule.epochs} epochs, seed {seed} ...")
    tuned, history = finetune(
        params,
        train_ds.to_seqs(),
        train_ds.labels,
        freeze,
        schedule,
        seed,
        eval_seqs=eval_ds.to_seqs() if eval_ds is not None else None,
        eval_labels=eval_ds.labels if eval_ds is not None else None,
        stop_macro_recall=stop,
    )
    blob = save_checkpoint(tuned, vocab.sha256())
    _atomic_write(args.out, blob)
    log_path = args.log or (args.out + ".log.csv")
    write_log_csv(history, log_path)
    manifest = _manifest_base(
        "finetune",
        {"dataset": args.dataset, "eval_dataset": args.eval_dataset, "init": args.init,
         "config": args.config, "seed": seed, "out": args.out, "freeze": list(freeze),
         "deterministic": args.deterministic},
        started,
    )
    manifest["inputs"] = {args.dataset: _sha256_file(args.dataset)}
    if args.init:
        manifest["inputs"][args.init] = _sha256_file(args.init)
    manifest["outputs"] = {args.out: _sha256_file(args.out), log_path: _sha256_file(log_path)}
    _write_manifest(args.out + ".manifest.json", manifest)
    last_heldout = [r for r in history if r.split == "heldout"]
    if last_heldout:
        _info(f"heldout accuracy {last_heldout[-1].accuracy:.4f}")
    return EXIT_OK


def _load_params(path: str):
    vocab = build_vocabulary()
    blob = _read_file(path)
    try:
        params, _ = load_checkpoint(blob, expect_vocab_hash=vocab.sha256())
    except (CheckpointError, CompatibilityError) as e:
        raise DataError(f"{path}: {e}") from None
    return params, vocab


def cmd_classify(args) -> int:
    started = time.time()
    _check_threads_env()
    params, vocab = _load_params(args.checkpoint)
    meta, records = _read_capture(args.pcap)
    _info(f"classifying {len(records)} records ...")
    packets = [decode_frame(r.frame, r.timestamp_us) for r in records]
    seqs = tokenize_stream(packets, vocab)
    ids, mask = to_arrays(seqs)
    lines = []
    batch = 256
    for i in range(0, len(seqs), batch):
        verdicts = predict_batch(params, ids[i : i + batch], mask[i : i + batch])
        for j, v in enumerate(verdicts):
            idx = i + j
            row = {
                "index": idx,
                "ts_us": records[idx].timestamp_us,
                "class": v.class_name,
                "probs": {name: v.probs[c] for c, name in enumerate(CLASS_NAMES)},
                "threat_level": v.threat_level,
            }
            if args.explain:
                row["sentence"] = render_sentence(seqs[idx], vocab)
            lines.append(json.dumps(row, separators=(",", ":")))
    _atomic_write(args.out, "\n".join(lines) + ("\n" if lines else ""))
    manifest = _manifest_base(
        "classify",
        {"checkpoint": args.checkpoint, "pcap": args.pcap, "out": args.out,
         "explain": args.explain},
        started,
    )
    manifest["inputs"] = {
        args.checkpoint: _sha256_file(args.checkpoint),
        args.pcap: _sha256_file(args.pcap),
    }
    manifest["outputs"] = {args.out: _sha256_file(args.out)}
    _write_manifest(args.out + ".manifest.json", manifest)
    _info(f"wrote {len(lines)} verdicts")
    return EXIT_OK


def cmd_eval(args) -> int:
    started = time.time()
    _check_threads_env()
    params, vocab = _load_params(args.checkpoint)
    dataset = _load_dataset(args.dataset)
    if not dataset.labeled:
        raise DataError(f"{args.dataset}: evaluation needs a labeled dataset")
    _require_vocab_match(dataset.vocab_hash, vocab.sha256(), args.dataset)
    _info(f"evaluating {len(dataset)} sequences ...")
    try:
        m = metrics_mod.evaluate(params, dataset.to_seqs(), dataset.labels)
    except metrics_mod.EmptySet as e:
        raise DataError(str(e)) from None
    report = metrics_mod.render_metrics_text(m)
    sys.stdout.write(report)
    ckpt_hash = _sha256_file(args.checkpoint)
    data_hash = _sha256_file(args.dataset)
    run_id = args.run_id or hashlib.sha256((ckpt_hash + data_hash).encode()).hexdigest()[:12]
    os.makedirs(args.out, exist_ok=True)
    _atomic_write(os.path.join(args.out, "metrics.json"), metrics_mod.metrics_to_json(m))
    _atomic_write(os.path.join(args.out, "report.txt"), report)
    manifest = _manifest_base(
        "eval", {"checkpoint": args.checkpoint, "dataset": args.dataset, "out": args.out}, started
    )
    manifest.update(
        {
            "run_id": run_id,
            "checkpoint_sha256": ckpt_hash,
            "dataset_sha256": data_hash,
            "metrics": metrics_mod.metrics_to_dict(m),
        }
    )
    manifest["outputs"] = {
        "metrics.json": _sha256_file(os.path.join(args.out, "metrics.json")),
        "report.txt": _sha256_file(os.path.join(args.out, "report.txt")),
    }
    _write_manifest(os.path.join(args.out, "run_manifest.json"), manifest)
    return EXIT_OK


def cmd_compare(args) -> int:
    runs = []
    for path in args.manifests:
        doc = _load_json(path)
        try:
            runs.append(
                metrics_mod.RunRecord(
                    run_id=doc["run_id"],
                    config_digest=doc["checkpoint_sha256"],
                    dataset_hash=doc["dataset_sha256"],
                    metrics=metrics_mod.metrics_from_dict(doc["metrics"]),
                    wall_seconds=doc["wall_seconds"],
                )
            )
        except (KeyError, TypeError) as e:
            raise DataError(f"{path}: not an eval run manifest ({e})") from None
    comp = metrics_mod.compare_runs(runs)
    sys.stdout.write(metrics_mod.render_comparison_text(comp))
    if args.out:
        _atomic_write(args.out, json.dumps(metrics_mod.comparison_to_dict(comp), indent=2) + "\n")
    return EXIT_OK


# --------------------------------------------------------------------- main


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sentinel",
        description="Forge labeled traffic, tokenize packets, train and judge threat levels.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("forge", help="synthesize a labeled capture from a scenario config")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_forge)

    p = sub.add_parser("tokenize", help="pcap -> token dataset")
    p.add_argument("--pcap", required=True)
    p.add_argument("--labels")
    p.add_argument("--out", required=True)
    p.add_argument("--format", choices=("binary", "jsonl"), default="binary")
    p.add_argument("--vocab-out")
    p.set_defaults(func=cmd_tokenize)

    p = sub.add_parser("pretrain", help="masked-token pretraining")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--log")
    p.add_argument("--deterministic", action="store_true")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", help="supervised fine-tuning of the class head")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--init", help="checkpoint to start from (default: fresh init)")
    p.add_argument("--eval-dataset")
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--log")
    p.add_argument("--deterministic", action="store_true")
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("classify", help="per-record threat verdicts for a capture")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--pcap", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--explain", action="store_true")
    p.set_defaults(func=cmd_classify)

    p = sub.add_parser("eval", help="metrics for a checkpoint on a labeled dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--run-id")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("compare", help="rank eval runs by macro-F1")
    p.add_argument("manifests", nargs="+")
    p.add_argument("--out")
    p.set_defaults(func=cmd_compare)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (BadMagic, TruncatedRecord, RecordTooLong, ds_mod.DatasetError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA
    except Exception as e:  # internal invariant violation
        import traceback

        traceback.print_exc()
        print(f"internal error: {e}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
