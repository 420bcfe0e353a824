#!/usr/bin/env python3
"""End-to-end experiment: forge the default scenario, tokenize, pretrain,
fine-tune from the pretrained checkpoint and from scratch, evaluate both, and
print the ranked comparison.

Everything runs through the installed CLI so the artifacts (capture, dataset,
checkpoints, manifests) land in --workdir exactly as an operator would produce
them. Expect roughly 5-10 minutes on a laptop CPU with the default sizes;
--quick switches to a small scenario and model for a fast smoke run.
"""

import argparse
import json
import os
import subprocess
import sys

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))


def run(args):
    print("+ sentinel " + " ".join(args), file=sys.stderr)
    proc = subprocess.run([sys.executable, "-m", "sentinel.cli", *args])
    if proc.returncode != 0:
        sys.exit(proc.returncode)


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--workdir", default="pipeline_out")
    ap.add_argument("--seed", type=int, default=42)
    ap.add_argument("--quick", action="store_true", help="small scenario + tiny model")
    args = ap.parse_args()

    os.makedirs(args.workdir, exist_ok=True)
    scenario = os.path.join(ROOT, "configs", "default_scenario.json")
    train_cfg = os.path.join(args.workdir, "train.json")

    if args.quick:
        doc = json.load(open(scenario))
        doc["duration_s"] = 4.0
        for attack in doc["attacks"]:
            attack["rate"] = attack["rate"] / 2
        scenario = os.path.join(args.workdir, "scenario.json")
        json.dump(doc, open(scenario, "w"), indent=2)
        config = {
            "model": {"d_model": 16, "n_layers": 1, "n_heads": 2, "d_ff": 32},
            "schedule": {"epochs": 2, "batch_size": 128, "lr": 0.003},
            "holdout_frac": 0.2,
            "freeze": [],  # same plan for both runs so the comparison is fair
        }
    else:
        config = json.load(open(os.path.join(ROOT, "configs", "train_default.json")))
        config.pop("stop_macro_recall", None)  # run all epochs so the comparison is per-epoch fair
    json.dump(config, open(train_cfg, "w"), indent=2)

    forge_dir = os.path.join(args.workdir, "forge")
    dataset = os.path.join(args.workdir, "dataset.bin")
    pretrained = os.path.join(args.workdir, "pretrained.sntl")
    tuned = os.path.join(args.workdir, "finetuned.sntl")
    scratch = os.path.join(args.workdir, "scratch.sntl")

    run(["forge", "--config", scenario, "--out", forge_dir, "--seed", str(args.seed)])
    run(["tokenize", "--pcap", os.path.join(forge_dir, "capture.pcap"),
         "--labels", os.path.join(forge_dir, "labels.jsonl"), "--out", dataset])
    run(["pretrain", "--dataset", dataset, "--out", pretrained,
         "--config", train_cfg, "--seed", str(args.seed), "--deterministic"])
    run(["finetune", "--dataset", dataset, "--out", tuned, "--init", pretrained,
         "--config", train_cfg, "--seed", str(args.seed), "--deterministic"])
    run(["finetune", "--dataset", dataset, "--out", scratch,
         "--config", train_cfg, "--seed", str(args.seed), "--deterministic"])

    eval_tuned = os.path.join(args.workdir, "eval_pretrained_init")
    eval_scratch = os.path.join(args.workdir, "eval_scratch_init")
    run(["eval", "--checkpoint", tuned, "--dataset", dataset,
         "--out", eval_tuned, "--run-id", "pretrained-init"])
    run(["eval", "--checkpoint", scratch, "--dataset", dataset,
         "--out", eval_scratch, "--run-id", "scratch-init"])
    run(["compare", os.path.join(eval_tuned, "run_manifest.json"),
         os.path.join(eval_scratch, "run_manifest.json"),
         "--out", os.path.join(args.workdir, "comparison.json")])

    verdicts = os.path.join(args.workdir, "verdicts.jsonl")
    run(["classify", "--checkpoint", tuned, "--pcap", os.path.join(forge_dir, "capture.pcap"),
         "--out", verdicts, "--explain"])
    print(f"\nartifacts in {args.workdir}/", file=sys.stderr)


if __name__ == "__main__":
    main()
