"""Masked-token pretraining and supervised fine-tuning loops.

Deterministic single-threaded reference semantics: batch shuffling and mask
plans are drawn from splitmix64 streams derived from the run seed (stream 1 for
shuffling, stream 2 for mask plans, stream 3 for parameter init), so the same
seed reproduces the same parameter trajectory bit for bit on one platform.

Mask plans follow the usual 15% recipe: per sequence, 15% of the non-special
positions are selected (at least one when any exists); a selected position is
replaced by [MASK] with probability 0.8, by a uniformly random vocabulary token
with probability 0.1, and kept as-is otherwise. The loss sees only selected
positions.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .model import (
    EmptyCorpus,
    MaskPlan,
    ModelConfig,
    OptState,
    ParamBundle,
    _encode,
    adam_step,
    backward,
    resolve_freeze,
)
from .rng import SplitMix64, derive_stream_seed

SHUFFLE_STREAM = 1
MASK_STREAM = 2
INIT_STREAM = 3


@dataclass(frozen=True)
class TrainSchedule:
    epochs: int = 3
    batch_size: int = 64
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    mask_frac: float = 0.15
    mask_token_prob: float = 0.8
    random_token_prob: float = 0.1


@dataclass(frozen=True)
class LogRow:
    epoch: int
    split: str  # "train" or "heldout"
    loss: float
    accuracy: float
    macro_f1: float | None = None
    macro_recall: float | None = None  # balanced accuracy


def write_log_csv(rows: list[LogRow], path: str) -> None:
    """Training log, CSV columns epoch,split,loss,accuracy."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "split", "loss", "accuracy"])
        for r in rows:
            w.writerow([r.epoch, r.split, f"{r.loss:.6f}", f"{r.accuracy:.6f}"])


def make_mask_plan(
    rng: SplitMix64,
    ids: np.ndarray,
    mask: np.ndarray,
    vocab_size: int,
    n_specials: int,
    mask_id: int,
    schedule: TrainSchedule,
) -> MaskPlan:
    """Corruption plan for one batch; draws consume rng in row-major order."""
    inputs = ids.copy()
    selected = np.zeros(ids.shape, dtype=bool)
    p_mask = int(schedule.mask_token_prob * 100)
    p_rand = p_mask + int(schedule.random_token_prob * 100)
    for b in range(ids.shape[0]):
        maskable = [j for j in range(ids.shape[1]) if mask[b, j] and ids[b, j] >= n_specials]
        if not maskable:
            continue
        k = max(1, int(len(maskable) * schedule.mask_frac))
        # partial Fisher-Yates: first k entries are the selection
        for i in range(k):
            j = i + rng.randrange(len(maskable) - i)
            maskable[i], maskable[j] = maskable[j], maskable[i]
        for pos in maskable[:k]:
            selected[b, pos] = True
            r = rng.randrange(100)
            if r < p_mask:
                inputs[b, pos] = mask_id
            elif r < p_rand:
                inputs[b, pos] = rng.randrange(vocab_size)
            # else keep the original token
    return MaskPlan(inputs=inputs, selected=selected, targets=ids)


def _batches(n: int, batch_size: int, rng: SplitMix64):
    order = list(range(n))
    rng.shuffle(order)
    for i in range(0, n, batch_size):
        yield np.array(order[i : i + batch_size])


def _probe_mlm(params, ids, mask, schedule, vocab_size, n_specials, mask_id, seed, limit=2048):
    """Loss/accuracy of the current params on a fixed deterministic probe plan."""
    take = min(limit, ids.shape[0])
    rng = SplitMix64(derive_stream_seed(seed, MASK_STREAM + 1000))
    plan = make_mask_plan(rng, ids[:take], mask[:take], vocab_size, n_specials, mask_id, schedule)
    total_loss, correct, count = 0.0, 0, 0
    for i in range(0, take, 256):
        sl = slice(i, min(i + 256, take))
        sub = MaskPlan(plan.inputs[sl], plan.selected[sl], plan.targets[sl])
        h, _ = _encode(params, sub.inputs, mask[sl])
        sel = sub.selected & mask[sl]
        rows = h[sel]
        if rows.shape[0] == 0:
            continue
        logits = rows @ params["mlm_head.w"]
        targets = sub.targets[sel]
        z = logits - logits.max(-1, keepdims=True)
        lse = np.log(np.exp(z).sum(-1))
        total_loss += float((lse - z[np.arange(len(targets)), targets]).sum())
        correct += int((logits.argmax(-1) == targets).sum())
        count += len(targets)
    return total_loss / max(1, count), correct / max(1, count)


def pretrain(
    seqs,
    config: ModelConfig,
    schedule: TrainSchedule,
    seed: int,
    vocab,
) -> tuple[ParamBundle, list[LogRow]]:
    """Masked-token pretraining from fresh init; returns params + loss log.

    The log's epoch-0 row is a probe of the untrained model (fresh-init loss);
    later rows are epoch averages over training batches.
    """
    if len(seqs) == 0:
        raise EmptyCorpus("pretraining corpus is empty")
    ids, mask = to_arrays(seqs)
    params = ParamBundle.initialize(config, derive_stream_seed(seed, INIT_STREAM))
    opt = OptState.for_params(params, lr=schedule.lr, beta1=schedule.beta1,
                              beta2=schedule.beta2, eps=schedule.eps)
    shuffle_rng = SplitMix64(derive_stream_seed(seed, SHUFFLE_STREAM))
    mask_rng = SplitMix64(derive_stream_seed(seed, MASK_STREAM))

    probe_loss, probe_acc = _probe_mlm(
        params, ids, mask, schedule, config.vocab_size, vocab.n_specials, vocab.mask_id, seed
    )
    history = [LogRow(epoch=0, split="train", loss=probe_loss, accuracy=probe_acc)]

    for epoch in range(1, schedule.epochs + 1):
        total_loss, total_correct, total_sel, n_batches = 0.0, 0, 0, 0
        for batch_idx in _batches(len(seqs), schedule.batch_size, shuffle_rng):
            bids, bmask = ids[batch_idx], mask[batch_idx]
            plan = make_mask_plan(
                mask_rng, bids, bmask, config.vocab_size, vocab.n_specials, vocab.mask_id, schedule
            )
            loss, grads, aux = backward(params, plan, bmask, "mlm", want_aux=True)
            adam_step(params, grads, opt)
            total_loss += loss
            total_correct += int((aux["pred"] == aux["targets"]).sum())
            total_sel += len(aux["targets"])
            n_batches += 1
        history.append(
            LogRow(
                epoch=epoch,
                split="train",
                loss=total_loss / max(1, n_batches),
                accuracy=total_correct / max(1, total_sel),
            )
        )
    return params, history


def finetune(
    params: ParamBundle,
    seqs,
    labels,
    freeze_plan,
    schedule: TrainSchedule,
    seed: int,
    eval_seqs=None,
    eval_labels=None,
    stop_macro_recall: float | None = None,
) -> tuple[ParamBundle, list[LogRow]]:
    """Supervised fine-tuning of the [CLS] head objective.

    Frozen arrays (names or dotted prefixes) stay bit-identical to the input
    bundle. With an eval set, each epoch appends a heldout row (loss is not
    re-derived for it; accuracy and macro-F1 are). ``stop_macro_recall`` stops
    early once heldout macro recall reaches the threshold.
    """
    if len(seqs) == 0:
        raise EmptyCorpus("fine-tuning set is empty")
    from .metrics import metrics_from_pairs  # local import avoids a cycle at module load

    params = params.copy()
    frozen = resolve_freeze(params, freeze_plan)
    ids, mask = to_arrays(seqs)
    labels = np.asarray(labels, dtype=np.int64)
    opt = OptState.for_params(params, lr=schedule.lr, beta1=schedule.beta1,
                              beta2=schedule.beta2, eps=schedule.eps)
    shuffle_rng = SplitMix64(derive_stream_seed(seed, SHUFFLE_STREAM))
    history: list[LogRow] = []

    eval_arrays = None
    if eval_seqs is not None:
        eids, emask = to_arrays(eval_seqs)
        eval_arrays = (eids, emask, np.asarray(eval_labels, dtype=np.int64))

    for epoch in range(1, schedule.epochs + 1):
        total_loss, correct, n_batches = 0.0, 0, 0
        for batch_idx in _batches(len(seqs), schedule.batch_size, shuffle_rng):
            loss, grads, aux = backward(
                params, ids[batch_idx], mask[batch_idx], "cls",
                labels=labels[batch_idx], freeze=frozen, want_aux=True,
            )
            adam_step(params, grads, opt)
            total_loss += loss
            correct += int((aux["pred"] == aux["targets"]).sum())
            n_batches += 1
        history.append(
            LogRow(epoch=epoch, split="train", loss=total_loss / max(1, n_batches),
                   accuracy=correct / len(seqs))
        )
        if eval_arrays is not None:
            eids, emask, elabels = eval_arrays
            eloss, pred = eval_cls(params, eids, emask, elabels)
            m = metrics_from_pairs(elabels.tolist(), pred.tolist())
            macro_recall = float(np.mean(m.recall))
            history.append(
                LogRow(epoch=epoch, split="heldout", loss=eloss, accuracy=m.accuracy,
                       macro_f1=m.macro_f1, macro_recall=macro_recall)
            )
            if stop_macro_recall is not None and macro_recall >= stop_macro_recall:
                break
    return params, history


def eval_cls(params: ParamBundle, ids: np.ndarray, mask: np.ndarray,
             labels: np.ndarray | None = None, batch_size: int = 256):
    """Batched [CLS]-head evaluation: (mean loss, argmax class per sequence)."""
    pred = np.zeros(ids.shape[0], dtype=np.int64)
    total = 0.0
    for i in range(0, ids.shape[0], batch_size):
        sl = slice(i, min(i + batch_size, ids.shape[0]))
        h, _ = _encode(params, ids[sl], mask[sl])
        logits = h[:, 0, :] @ params["cls_head.w"]
        pred[sl] = logits.argmax(-1)
        if labels is not None:
            z = logits - logits.max(-1, keepdims=True)
            lse = np.log(np.exp(z).sum(-1))
            total += float((lse - z[np.arange(len(pred[sl])), labels[sl]]).sum())
    loss = total / ids.shape[0] if labels is not None else 0.0
    return loss, pred


def classify_ids(params: ParamBundle, ids: np.ndarray, mask: np.ndarray, batch_size: int = 256):
    """Argmax class per sequence, batched."""
    return eval_cls(params, ids, mask, None, batch_size)[1]


def to_arrays(seqs) -> tuple[np.ndarray, np.ndarray]:
    """Stack TokenSeqs into (ids, attention_mask) int64/bool arrays."""
    ids = np.array([s.ids for s in seqs], dtype=np.int64)
    mask = np.array([s.attention_mask for s in seqs], dtype=bool)
    return ids, mask
