import math

import numpy as np
import pytest

from sentinel.lang import build_vocabulary, tokenize_stream
from sentinel.model import EmptyCorpus, ModelConfig, ParamBundle, UnknownFreezeTarget
from sentinel.packets import decode_frame
from sentinel.rng import SplitMix64
from sentinel.train import (
    LogRow,
    TrainSchedule,
    eval_cls,
    finetune,
    make_mask_plan,
    pretrain,
    to_arrays,
    write_log_csv,
)

from test_forge import small_scenario, syn_attack
from sentinel.forge import AttackSpec, forge
from sentinel.packets import parse_ip


VOCAB = build_vocabulary()


def tiny_corpus(n_limit=600):
    """Small labeled corpus from a forged scenario with all four classes."""
    config = small_scenario(
        seed=5,
        attacks=[
            syn_attack(rate=120),
            AttackSpec(kind="udp_flood", rate=120, target_addr=parse_ip("10.0.0.2"), target_port=53),
            AttackSpec(kind="malformed", rate=120, target_addr=parse_ip("10.0.0.2")),
        ],
    )
    cap = forge(config)
    packets = [decode_frame(r.frame, r.timestamp_us) for r in cap.records]
    seqs = tokenize_stream(packets, VOCAB)
    return seqs[:n_limit], cap.labels[:n_limit]


def small_model_config():
    return ModelConfig(vocab_size=len(VOCAB), d_model=16, n_layers=1, n_heads=2,
                       d_ff=32, max_len=32)


class TestMaskPlan:
    def test_deterministic_given_rng_state(self):
        seqs, _ = tiny_corpus(64)
        ids, mask = to_arrays(seqs)
        sched = TrainSchedule()
        a = make_mask_plan(SplitMix64(9), ids, mask, len(VOCAB), 8, VOCAB.mask_id, sched)
        b = make_mask_plan(SplitMix64(9), ids, mask, len(VOCAB), 8, VOCAB.mask_id, sched)
        assert np.array_equal(a.inputs, b.inputs)
        assert np.array_equal(a.selected, b.selected)

    def test_selection_rate_and_targets(self):
        seqs, _ = tiny_corpus(128)
        ids, mask = to_arrays(seqs)
        sched = TrainSchedule()
        plan = make_mask_plan(SplitMix64(3), ids, mask, len(VOCAB), 8, VOCAB.mask_id, sched)
        assert np.array_equal(plan.targets, ids)
        maskable = (ids >= 8) & mask
        assert not plan.selected[~maskable].any()
        # every sequence with maskable positions selects at least one
        assert (plan.selected.sum(1)[maskable.sum(1) > 0] >= 1).all()
        frac = plan.selected.sum() / maskable.sum()
        assert 0.05 <= frac <= 0.25

    def test_corruption_mix(self):
        seqs, _ = tiny_corpus(400)
        ids, mask = to_arrays(seqs)
        sched = TrainSchedule()
        plan = make_mask_plan(SplitMix64(4), ids, mask, len(VOCAB), 8, VOCAB.mask_id, sched)
        sel = plan.selected
        n = sel.sum()
        masked = (plan.inputs[sel] == VOCAB.mask_id).sum()
        kept = (plan.inputs[sel] == plan.targets[sel]).sum()
        assert masked / n > 0.6  # nominal 0.8
        assert 0 < kept / n < 0.35  # nominal 0.1 kept + random hits


class TestPretrain:
    def test_empty_corpus_rejected(self):
        with pytest.raises(EmptyCorpus):
            pretrain([], small_model_config(), TrainSchedule(), 1, VOCAB)

    def test_fresh_init_loss_near_log_vocab_and_decreases(self):
        seqs, _ = tiny_corpus(384)
        sched = TrainSchedule(epochs=2, batch_size=64, lr=3e-3)
        params, history = pretrain(seqs, small_model_config(), sched, 11, VOCAB)
        fresh = history[0]
        assert fresh.epoch == 0
        assert abs(fresh.loss - math.log(len(VOCAB))) / math.log(len(VOCAB)) < 0.05
        assert history[1].loss < fresh.loss
        assert history[2].loss < history[1].loss

    def test_same_seed_identical_params(self):
        seqs, _ = tiny_corpus(128)
        sched = TrainSchedule(epochs=1, batch_size=64)
        p1, h1 = pretrain(seqs, small_model_config(), sched, 21, VOCAB)
        p2, h2 = pretrain(seqs, small_model_config(), sched, 21, VOCAB)
        assert h1 == h2
        for name in p1.arrays:
            assert np.array_equal(p1[name], p2[name])

    def test_different_seed_differs(self):
        seqs, _ = tiny_corpus(128)
        sched = TrainSchedule(epochs=1, batch_size=64)
        p1, _ = pretrain(seqs, small_model_config(), sched, 21, VOCAB)
        p2, _ = pretrain(seqs, small_model_config(), sched, 22, VOCAB)
        assert any(not np.array_equal(p1[name], p2[name]) for name in p1.arrays)


class TestFinetune:
    def test_freeze_all_returns_input_params(self):
        seqs, labels = tiny_corpus(128)
        base = ParamBundle.initialize(small_model_config(), 31)
        plan = list(base.arrays.keys())
        tuned, _ = finetune(base, seqs, labels, plan, TrainSchedule(epochs=1), 1)
        for name in base.arrays:
            assert np.array_equal(tuned[name], base[name])

    def test_default_freeze_plan_preserves_arrays(self):
        seqs, labels = tiny_corpus(192)
        base = ParamBundle.initialize(small_model_config(), 32)
        tuned, _ = finetune(
            base, seqs, labels, ["tok_emb", "pos_emb", "layers.0"], TrainSchedule(epochs=1), 2
        )
        for name in ("tok_emb", "pos_emb", "layers.0.attn.wq", "layers.0.ffn.w2"):
            assert np.array_equal(tuned[name], base[name])
        assert not np.array_equal(tuned["cls_head.w"], base["cls_head.w"])

    def test_input_bundle_not_mutated(self):
        seqs, labels = tiny_corpus(96)
        base = ParamBundle.initialize(small_model_config(), 33)
        snapshot = {k: v.copy() for k, v in base.arrays.items()}
        finetune(base, seqs, labels, [], TrainSchedule(epochs=1), 3)
        for name in snapshot:
            assert np.array_equal(base[name], snapshot[name])

    def test_unknown_freeze_target(self):
        seqs, labels = tiny_corpus(64)
        base = ParamBundle.initialize(small_model_config(), 34)
        with pytest.raises(UnknownFreezeTarget):
            finetune(base, seqs, labels, ["nonexistent"], TrainSchedule(epochs=1), 4)

    def test_learns_separable_classes(self):
        seqs, labels = tiny_corpus(600)
        base = ParamBundle.initialize(small_model_config(), 35)
        tuned, history = finetune(
            base, seqs, labels, [], TrainSchedule(epochs=4, batch_size=64, lr=3e-3), 5,
            eval_seqs=seqs, eval_labels=labels,
        )
        heldout = [r for r in history if r.split == "heldout"]
        assert heldout[-1].accuracy > 0.9

    def test_early_stop_on_macro_recall(self):
        seqs, labels = tiny_corpus(600)
        base = ParamBundle.initialize(small_model_config(), 36)
        _, history = finetune(
            base, seqs, labels, [], TrainSchedule(epochs=10, batch_size=64, lr=3e-3), 6,
            eval_seqs=seqs, eval_labels=labels, stop_macro_recall=0.9,
        )
        assert history[-1].epoch < 10  # stopped before exhausting the budget


class TestLogCsv:
    def test_csv_schema(self, tmp_path):
        rows = [LogRow(0, "train", 7.4, 0.01), LogRow(1, "heldout", 1.2, 0.5, macro_f1=0.4)]
        path = tmp_path / "log.csv"
        write_log_csv(rows, str(path))
        text = path.read_text().splitlines()
        assert text[0] == "epoch,split,loss,accuracy"
        assert text[1] == "0,train,7.400000,0.010000"
        assert len(text) == 3
