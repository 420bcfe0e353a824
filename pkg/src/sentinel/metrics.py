"""Confusion matrices, per-class precision/recall/F1, and multi-run comparison.

Macro-F1 (unweighted mean of per-class F1) is the headline ranking metric;
classes are imbalanced in flood captures, so accuracy alone is misleading. The
zero-division convention is explicit: precision, recall, and F1 are 0 whenever
their denominator is 0. Text reports render numbers to 4 decimal places with
round-half-even; JSON reports carry the full-precision values (float round-trip
exact).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from decimal import ROUND_HALF_EVEN, Decimal

import numpy as np

from . import CLASS_NAMES

N_CLASSES = len(CLASS_NAMES)


class EmptySet(ValueError):
    """Evaluation requested on an empty sample set."""


@dataclass(frozen=True)
class Metrics:
    confusion: tuple[tuple[int, ...], ...]  # rows = truth, cols = predicted
    precision: tuple[float, ...]
    recall: tuple[float, ...]
    f1: tuple[float, ...]
    accuracy: float
    macro_f1: float
    n_samples: int

    @property
    def macro_recall(self) -> float:
        return float(np.mean(self.recall))


def metrics_from_pairs(truth, pred) -> Metrics:
    """Metrics from parallel (truth, prediction) class-id sequences."""
    truth = list(truth)
    pred = list(pred)
    if not truth:
        raise EmptySet("no samples")
    if len(truth) != len(pred):
        raise ValueError("truth and prediction lengths differ")
    cm = np.zeros((N_CLASSES, N_CLASSES), dtype=np.int64)
    for t, p in zip(truth, pred):
        cm[t][p] += 1
    precision, recall, f1 = [], [], []
    for c in range(N_CLASSES):
        tp = int(cm[c, c])
        col = int(cm[:, c].sum())
        row = int(cm[c, :].sum())
        p = tp / col if col else 0.0
        r = tp / row if row else 0.0
        f = 2 * p * r / (p + r) if (p + r) else 0.0
        precision.append(p)
        recall.append(r)
        f1.append(f)
    n = len(truth)
    return Metrics(
        confusion=tuple(tuple(int(x) for x in row) for row in cm),
        precision=tuple(precision),
        recall=tuple(recall),
        f1=tuple(f1),
        accuracy=float(np.trace(cm)) / n,
        macro_f1=float(np.mean(f1)),
        n_samples=n,
    )


def evaluate(params, seqs, labels) -> Metrics:
    """Run the classifier over labeled sequences and tabulate."""
    from .train import classify_ids, to_arrays

    if len(seqs) == 0:
        raise EmptySet("no samples")
    ids, mask = to_arrays(seqs)
    pred = classify_ids(params, ids, mask)
    return metrics_from_pairs(list(labels), pred.tolist())


@dataclass(frozen=True)
class RunRecord:
    run_id: str
    config_digest: str
    dataset_hash: str
    metrics: Metrics
    wall_seconds: float

    def __post_init__(self):
        if not self.config_digest or not self.dataset_hash:
            raise ValueError("run record requires non-empty digests")


@dataclass(frozen=True)
class Comparison:
    """Runs ranked best-first, with per-class F1 deltas against the best run."""

    ranked: tuple[RunRecord, ...]
    f1_deltas: tuple[tuple[float, ...], ...]  # per run, per class, vs best


def compare_runs(runs) -> Comparison:
    """Rank by macro-F1 desc, ties by accuracy desc then run id asc."""
    runs = list(runs)
    if not runs:
        raise EmptySet("no runs to compare")
    ranked = sorted(runs, key=lambda r: (-r.metrics.macro_f1, -r.metrics.accuracy, r.run_id))
    best = ranked[0]
    deltas = tuple(
        tuple(r.metrics.f1[c] - best.metrics.f1[c] for c in range(N_CLASSES)) for r in ranked
    )
    return Comparison(ranked=tuple(ranked), f1_deltas=deltas)


def format_fixed(x: float) -> str:
    """4 decimal places, round-half-even on the exact binary value."""
    return str(Decimal(x).quantize(Decimal("0.0001"), rounding=ROUND_HALF_EVEN))


def render_metrics_text(m: Metrics) -> str:
    """Aligned text table; numbers at 4 decimals, round-half-even."""
    lines = []
    lines.append(f"samples   {m.n_samples}")
    lines.append(f"accuracy  {format_fixed(m.accuracy)}")
    lines.append(f"macro-F1  {format_fixed(m.macro_f1)}")
    lines.append("")
    name_w = max(len(n) for n in CLASS_NAMES)
    lines.append(f"{'class':<{name_w}}  {'precision':>9}  {'recall':>9}  {'f1':>9}  {'support':>7}")
    for c, name in enumerate(CLASS_NAMES):
        support = sum(m.confusion[c])
        lines.append(
            f"{name:<{name_w}}  {format_fixed(m.precision[c]):>9}  "
            f"{format_fixed(m.recall[c]):>9}  {format_fixed(m.f1[c]):>9}  {support:>7}"
        )
    lines.append("")
    lines.append("confusion (rows = truth, cols = predicted)")
    header = " ".join(f"{n[:6]:>7}" for n in CLASS_NAMES)
    lines.append(f"{'':<{name_w}} {header}")
    for c, name in enumerate(CLASS_NAMES):
        cells = " ".join(f"{v:>7}" for v in m.confusion[c])
        lines.append(f"{name:<{name_w}} {cells}")
    return "\n".join(lines) + "\n"


def metrics_to_dict(m: Metrics) -> dict:
    return {
        "n_samples": m.n_samples,
        "accuracy": m.accuracy,
        "macro_f1": m.macro_f1,
        "classes": [
            {
                "name": name,
                "precision": m.precision[c],
                "recall": m.recall[c],
                "f1": m.f1[c],
                "support": int(sum(m.confusion[c])),
            }
            for c, name in enumerate(CLASS_NAMES)
        ],
        "confusion": [list(row) for row in m.confusion],
    }


def metrics_from_dict(doc: dict) -> Metrics:
    classes = doc["classes"]
    return Metrics(
        confusion=tuple(tuple(int(x) for x in row) for row in doc["confusion"]),
        precision=tuple(c["precision"] for c in classes),
        recall=tuple(c["recall"] for c in classes),
        f1=tuple(c["f1"] for c in classes),
        accuracy=doc["accuracy"],
        macro_f1=doc["macro_f1"],
        n_samples=doc["n_samples"],
    )


def metrics_to_json(m: Metrics) -> str:
    return json.dumps(metrics_to_dict(m), indent=2, sort_keys=True) + "\n"


def render_comparison_text(comp: Comparison) -> str:
    lines = []
    lines.append(
        f"{'rank':>4}  {'run':<20}  {'macro_f1':>8}  {'accuracy':>8}  "
        + "  ".join(f"d_{n[:4]:>6}" for n in CLASS_NAMES)
    )
    for i, (run, deltas) in enumerate(zip(comp.ranked, comp.f1_deltas), start=1):
        cells = "  ".join(f"{format_fixed(d):>8}" for d in deltas)
        lines.append(
            f"{i:>4}  {run.run_id[:20]:<20}  {format_fixed(run.metrics.macro_f1):>8}  "
            f"{format_fixed(run.metrics.accuracy):>8}  {cells}"
        )
    return "\n".join(lines) + "\n"


def comparison_to_dict(comp: Comparison) -> dict:
    return {
        "ranking": [
            {
                "rank": i + 1,
                "run_id": run.run_id,
                "config_digest": run.config_digest,
                "dataset_hash": run.dataset_hash,
                "macro_f1": run.metrics.macro_f1,
                "accuracy": run.metrics.accuracy,
                "f1_delta_vs_best": list(comp.f1_deltas[i]),
                "wall_seconds": run.wall_seconds,
            }
            for i, run in enumerate(comp.ranked)
        ]
    }
