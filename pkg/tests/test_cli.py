import hashlib
import json
import os

import numpy as np
import pytest

from sentinel.cli import main
from sentinel.forge import config_to_dict
from sentinel.lang import build_vocabulary

from test_forge import small_scenario, syn_attack
from sentinel.forge import AttackSpec
from sentinel.packets import parse_ip


def sha(path):
    return hashlib.sha256(open(path, "rb").read()).hexdigest()


def write_scenario(path, **kw):
    config = small_scenario(
        attacks=[
            syn_attack(rate=150),
            AttackSpec(kind="udp_flood", rate=150, target_addr=parse_ip("10.0.0.2"), target_port=53),
            AttackSpec(kind="malformed", rate=150, target_addr=parse_ip("10.0.0.2")),
        ],
        **kw,
    )
    path.write_text(json.dumps(config_to_dict(config)))
    return config


TRAIN_CONFIG = {
    "model": {"d_model": 8, "n_layers": 1, "n_heads": 2, "d_ff": 16},
    "schedule": {"epochs": 1, "batch_size": 64, "lr": 0.003},
}


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """Forged capture + tokenized dataset + tiny fine-tuned checkpoint."""
    root = tmp_path_factory.mktemp("pipeline")
    scenario = root / "scenario.json"
    write_scenario(scenario)
    out = root / "forge"
    assert main(["forge", "--config", str(scenario), "--out", str(out)]) == 0

    dataset = root / "dataset.bin"
    assert main([
        "tokenize", "--pcap", str(out / "capture.pcap"),
        "--labels", str(out / "labels.jsonl"), "--out", str(dataset),
    ]) == 0

    train_cfg = root / "train.json"
    train_cfg.write_text(json.dumps(TRAIN_CONFIG))
    ckpt = root / "model.sntl"
    assert main([
        "finetune", "--dataset", str(dataset), "--out", str(ckpt),
        "--config", str(train_cfg), "--seed", "3",
    ]) == 0
    return {"root": root, "scenario": scenario, "forge": out, "dataset": dataset,
            "train_cfg": train_cfg, "ckpt": ckpt}


class TestForgeCommand:
    def test_writes_three_files(self, tmp_path):
        scenario = tmp_path / "s.json"
        write_scenario(scenario)
        out = tmp_path / "out"
        assert main(["forge", "--config", str(scenario), "--out", str(out)]) == 0
        assert (out / "capture.pcap").exists()
        assert (out / "labels.jsonl").exists()
        assert (out / "manifest.json").exists()
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["pcap_sha256"] == sha(out / "capture.pcap")
        assert sum(manifest["class_counts"].values()) == manifest["record_count"]

    def test_invalid_json_exits_2(self, tmp_path, capsys):
        bad = tmp_path / "bad.json"
        bad.write_text("{not json")
        assert main(["forge", "--config", str(bad), "--out", str(tmp_path / "o")]) == 2
        assert "error" in capsys.readouterr().err

    def test_unknown_key_exits_2_with_field_path(self, tmp_path, capsys):
        scenario = tmp_path / "s.json"
        doc = json.loads(write_scenario(scenario) and scenario.read_text())
        doc["attacks"][0]["bogus_knob"] = 1
        scenario.write_text(json.dumps(doc))
        assert main(["forge", "--config", str(scenario), "--out", str(tmp_path / "o")]) == 2
        assert "attacks[0].bogus_knob" in capsys.readouterr().err

    def test_rerun_same_config_identical_hashes(self, tmp_path):
        scenario = tmp_path / "s.json"
        write_scenario(scenario)
        hashes = []
        for sub in ("a", "b"):
            out = tmp_path / sub
            assert main(["forge", "--config", str(scenario), "--out", str(out)]) == 0
            manifest = json.loads((out / "manifest.json").read_text())
            hashes.append((manifest["pcap_sha256"], manifest["outputs"]["labels.jsonl"]))
        assert hashes[0] == hashes[1]

    def test_seed_flag_overrides_config(self, tmp_path):
        scenario = tmp_path / "s.json"
        write_scenario(scenario)
        out1, out2 = tmp_path / "o1", tmp_path / "o2"
        assert main(["forge", "--config", str(scenario), "--out", str(out1), "--seed", "77"]) == 0
        assert main(["forge", "--config", str(scenario), "--out", str(out2)]) == 0
        m1 = json.loads((out1 / "manifest.json").read_text())
        m2 = json.loads((out2 / "manifest.json").read_text())
        assert m1["config"]["seed"] == 77
        assert m1["pcap_sha256"] != m2["pcap_sha256"]


class TestTokenizeCommand:
    def test_counts_and_determinism(self, pipeline, tmp_path):
        from sentinel.pcap import read_pcap

        _, records = read_pcap(open(pipeline["forge"] / "capture.pcap", "rb").read())
        manifest = json.loads((pipeline["dataset"].parent / "dataset.bin.manifest.json").read_text())
        assert manifest["record_count"] == len(records)

        out2 = tmp_path / "again.bin"
        assert main([
            "tokenize", "--pcap", str(pipeline["forge"] / "capture.pcap"),
            "--labels", str(pipeline["forge"] / "labels.jsonl"), "--out", str(out2),
        ]) == 0
        assert sha(pipeline["dataset"]) == sha(out2)

    def test_zero_oov_and_label_count(self, pipeline):
        from sentinel.dataset import read_binary

        ds = read_binary(open(pipeline["dataset"], "rb").read())
        vocab = build_vocabulary()
        assert ds.ids.max() < len(vocab)
        assert ds.ids.min() >= 0
        assert ds.labeled and len(ds.labels) == len(ds)

    def test_jsonl_format(self, pipeline, tmp_path):
        out = tmp_path / "ds.jsonl"
        assert main([
            "tokenize", "--pcap", str(pipeline["forge"] / "capture.pcap"),
            "--out", str(out), "--format", "jsonl",
        ]) == 0
        lines = out.read_text().splitlines()
        header = json.loads(lines[0])
        assert header["vocab_sha256"] == build_vocabulary().sha256().hex()
        row = json.loads(lines[1])
        assert len(row["ids"]) == 32 and row["label"] is None

    def test_vocab_export(self, pipeline, tmp_path):
        out = tmp_path / "ds.bin"
        vocab_txt = tmp_path / "vocab.txt"
        assert main([
            "tokenize", "--pcap", str(pipeline["forge"] / "capture.pcap"),
            "--out", str(out), "--vocab-out", str(vocab_txt),
        ]) == 0
        lines = vocab_txt.read_text().splitlines()
        vocab = build_vocabulary()
        assert len(lines) == len(vocab)
        assert lines[0] == "[PAD]"

    def test_missing_pcap_exits_2(self, tmp_path):
        assert main(["tokenize", "--pcap", str(tmp_path / "none.pcap"),
                     "--out", str(tmp_path / "o.bin")]) == 2

    def test_label_count_mismatch_exits_3(self, pipeline, tmp_path):
        labels = (pipeline["forge"] / "labels.jsonl").read_text().splitlines()
        short = tmp_path / "short.jsonl"
        short.write_text("\n".join(labels[:5]) + "\n")
        code = main([
            "tokenize", "--pcap", str(pipeline["forge"] / "capture.pcap"),
            "--labels", str(short), "--out", str(tmp_path / "o.bin"),
        ])
        assert code == 3


class TestTrainCommands:
    def test_missing_dataset_exits_2(self, tmp_path):
        assert main(["pretrain", "--dataset", str(tmp_path / "none.bin"),
                     "--out", str(tmp_path / "c.sntl")]) == 2
        assert main(["finetune", "--dataset", str(tmp_path / "none.bin"),
                     "--out", str(tmp_path / "c.sntl")]) == 2

    def test_same_seed_identical_checkpoint(self, pipeline, tmp_path):
        outs = []
        for name in ("a.sntl", "b.sntl"):
            out = tmp_path / name
            assert main([
                "finetune", "--dataset", str(pipeline["dataset"]), "--out", str(out),
                "--config", str(pipeline["train_cfg"]), "--seed", "3", "--deterministic",
            ]) == 0
            outs.append(sha(out))
        assert outs[0] == outs[1]
        assert outs[0] == sha(pipeline["ckpt"])  # flag combination matches fixture run

    def test_finetune_refuses_vocab_mismatch(self, pipeline, tmp_path):
        # corrupt the dataset's recorded vocab hash
        blob = bytearray(open(pipeline["dataset"], "rb").read())
        blob[8] ^= 0xFF
        bad = tmp_path / "bad.bin"
        bad.write_bytes(bytes(blob))
        code = main([
            "finetune", "--dataset", str(bad), "--out", str(tmp_path / "c.sntl"),
            "--config", str(pipeline["train_cfg"]),
        ])
        assert code == 3

    def test_finetune_init_mismatched_checkpoint_exits_3(self, pipeline, tmp_path):
        blob = bytearray(open(pipeline["ckpt"], "rb").read())
        # vocab hash lives after magic(4)+version(2)+config(7*4+8)
        off = 4 + 2 + 36
        blob[off] ^= 0xFF
        bad = tmp_path / "bad.sntl"
        bad.write_bytes(bytes(blob))
        code = main([
            "finetune", "--dataset", str(pipeline["dataset"]), "--out", str(tmp_path / "c.sntl"),
            "--config", str(pipeline["train_cfg"]), "--init", str(bad),
        ])
        assert code == 3

    def test_pretrain_writes_log_and_manifest(self, pipeline, tmp_path):
        out = tmp_path / "pre.sntl"
        assert main([
            "pretrain", "--dataset", str(pipeline["dataset"]), "--out", str(out),
            "--config", str(pipeline["train_cfg"]), "--seed", "5",
        ]) == 0
        assert out.exists()
        log = (tmp_path / "pre.sntl.log.csv").read_text().splitlines()
        assert log[0] == "epoch,split,loss,accuracy"
        assert len(log) >= 3  # fresh-init probe + 1 epoch
        manifest = json.loads((tmp_path / "pre.sntl.manifest.json").read_text())
        assert manifest["subcommand"] == "pretrain"
        assert str(out) in manifest["outputs"]

    def test_invalid_threads_env_exits_2(self, pipeline, tmp_path, monkeypatch):
        monkeypatch.setenv("SENTINEL_THREADS", "zero")
        code = main([
            "pretrain", "--dataset", str(pipeline["dataset"]),
            "--out", str(tmp_path / "c.sntl"), "--config", str(pipeline["train_cfg"]),
        ])
        assert code == 2


class TestClassifyCommand:
    def test_verdict_count_and_probs(self, pipeline, tmp_path):
        out = tmp_path / "verdicts.jsonl"
        assert main([
            "classify", "--checkpoint", str(pipeline["ckpt"]),
            "--pcap", str(pipeline["forge"] / "capture.pcap"), "--out", str(out),
        ]) == 0
        lines = out.read_text().splitlines()
        manifest = json.loads((pipeline["dataset"].parent / "dataset.bin.manifest.json").read_text())
        assert len(lines) == manifest["record_count"]
        row = json.loads(lines[0])
        assert set(row) == {"index", "ts_us", "class", "probs", "threat_level"}
        assert abs(sum(row["probs"].values()) - 1.0) < 1e-12
        assert row["threat_level"] == pytest.approx(1.0 - row["probs"]["benign"], abs=1e-12)

    def test_explain_includes_sentence(self, pipeline, tmp_path):
        out = tmp_path / "verdicts.jsonl"
        assert main([
            "classify", "--checkpoint", str(pipeline["ckpt"]),
            "--pcap", str(pipeline["forge"] / "capture.pcap"), "--out", str(out), "--explain",
        ]) == 0
        row = json.loads(out.read_text().splitlines()[0])
        assert row["sentence"].startswith("[CLS]")
        assert row["sentence"].endswith("[SEP]")


class TestEvalCompareCommands:
    def test_eval_outputs(self, pipeline, tmp_path, capsys):
        out = tmp_path / "eval"
        assert main([
            "eval", "--checkpoint", str(pipeline["ckpt"]),
            "--dataset", str(pipeline["dataset"]), "--out", str(out), "--run-id", "tiny",
        ]) == 0
        stdout = capsys.readouterr().out
        assert "macro-F1" in stdout
        assert (out / "metrics.json").exists()
        assert (out / "report.txt").read_text() == stdout
        manifest = json.loads((out / "run_manifest.json").read_text())
        assert manifest["run_id"] == "tiny"
        assert manifest["metrics"]["n_samples"] > 0

    def test_eval_nonexistent_path_exits_2(self, pipeline, tmp_path):
        assert main(["eval", "--checkpoint", str(tmp_path / "no.sntl"),
                     "--dataset", str(pipeline["dataset"]), "--out", str(tmp_path / "e")]) == 2

    def test_compare_single_run(self, pipeline, tmp_path, capsys):
        out = tmp_path / "eval"
        main(["eval", "--checkpoint", str(pipeline["ckpt"]), "--dataset", str(pipeline["dataset"]),
              "--out", str(out), "--run-id", "solo"])
        capsys.readouterr()
        assert main(["compare", str(out / "run_manifest.json")]) == 0
        stdout = capsys.readouterr().out
        assert "solo" in stdout and stdout.splitlines()[1].strip().startswith("1")

    def test_compare_two_runs_ranked(self, pipeline, tmp_path, capsys):
        out1, out2 = tmp_path / "e1", tmp_path / "e2"
        main(["eval", "--checkpoint", str(pipeline["ckpt"]), "--dataset", str(pipeline["dataset"]),
              "--out", str(out1), "--run-id", "first"])
        main(["eval", "--checkpoint", str(pipeline["ckpt"]), "--dataset", str(pipeline["dataset"]),
              "--out", str(out2), "--run-id", "second"])
        capsys.readouterr()
        table = tmp_path / "cmp.json"
        assert main(["compare", str(out1 / "run_manifest.json"), str(out2 / "run_manifest.json"),
                     "--out", str(table)]) == 0
        doc = json.loads(table.read_text())
        assert [r["run_id"] for r in doc["ranking"]] == ["first", "second"]  # tie -> id order
        assert main(["compare", str(tmp_path / "missing.json")]) == 2
