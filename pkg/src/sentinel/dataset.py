"""Token dataset container and its two on-disk encodings.

Binary (default, magic ``SNTK``): little-endian header
``magic(4) version(u16) flags(u8, bit0 = labeled) seq_len(u8) vocab_sha256(32)
count(u64)`` followed by one record per sequence: ``seq_len`` u16 token ids, a
u32 attention bitmask (bit k = position k is non-pad), and a u8 label (0xFF
when unlabeled). JSONL: one object per line,
``{"ids": [...], "mask": [0/1...], "label": int|null}``.

Both encodings are deterministic functions of the dataset, so re-tokenizing
the same capture yields byte-identical files.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import json

import numpy as np

from .lang import SEQ_LEN, TokenSeq, Vocab
from .rng import SplitMix64, derive_stream_seed

DATASET_MAGIC = b"SNTK"
DATASET_VERSION = 1
SPLIT_STREAM = 17


class DatasetError(ValueError):
    """Dataset stream is malformed or incompatible."""


@dataclass
class TokenDataset:
    ids: np.ndarray  # [N, SEQ_LEN] int64
    mask: np.ndarray  # [N, SEQ_LEN] bool
    labels: np.ndarray | None  # [N] int64 class ids, or None
    vocab_hash: bytes

    def __len__(self) -> int:
        return self.ids.shape[0]

    @property
    def labeled(self) -> bool:
        return self.labels is not None

    def to_seqs(self) -> list[TokenSeq]:
        return [
            TokenSeq(ids=tuple(int(x) for x in row), attention_mask=tuple(bool(b) for b in m))
            for row, m in zip(self.ids, self.mask)
        ]

    def subset(self, indices) -> "TokenDataset":
        idx = np.asarray(indices)
        return TokenDataset(
            ids=self.ids[idx],
            mask=self.mask[idx],
            labels=None if self.labels is None else self.labels[idx],
            vocab_hash=self.vocab_hash,
        )


def from_seqs(seqs, vocab: Vocab, labels=None) -> TokenDataset:
    ids = np.array([s.ids for s in seqs], dtype=np.int64)
    mask = np.array([s.attention_mask for s in seqs], dtype=bool)
    lab = None if labels is None else np.asarray(labels, dtype=np.int64)
    if lab is not None and lab.shape[0] != ids.shape[0]:
        raise DatasetError("labels length differs from sequence count")
    return TokenDataset(ids=ids, mask=mask, labels=lab, vocab_hash=vocab.sha256())


_RECORD_DTYPE = np.dtype(
    {"names": ["ids", "mask", "label"], "formats": [("<u2", (SEQ_LEN,)), "<u4", "u1"]}
)  # packed: 2*SEQ_LEN + 4 + 1 bytes per record


def write_binary(ds: TokenDataset) -> bytes:
    if ds.ids.shape[1] != SEQ_LEN:
        raise DatasetError(f"sequence length must be {SEQ_LEN}")
    header = DATASET_MAGIC + struct.pack("<HBB", DATASET_VERSION, 1 if ds.labeled else 0, SEQ_LEN)
    header += ds.vocab_hash
    header += struct.pack("<Q", len(ds))
    records = np.zeros(len(ds), dtype=_RECORD_DTYPE)
    records["ids"] = ds.ids.astype(np.uint16)
    shifts = np.arange(SEQ_LEN, dtype=np.uint64)
    records["mask"] = (ds.mask.astype(np.uint64) << shifts).sum(1).astype(np.uint32)
    records["label"] = ds.labels.astype(np.uint8) if ds.labeled else 0xFF
    return header + records.tobytes()


def read_binary(data: bytes) -> TokenDataset:
    if data[:4] != DATASET_MAGIC:
        raise DatasetError("bad dataset magic")
    version, flags, seq_len = struct.unpack_from("<HBB", data, 4)
    if version != DATASET_VERSION:
        raise DatasetError(f"unsupported dataset version {version}")
    if seq_len != SEQ_LEN:
        raise DatasetError(f"unsupported sequence length {seq_len}")
    vocab_hash = data[8:40]
    (count,) = struct.unpack_from("<Q", data, 40)
    expected = 48 + count * _RECORD_DTYPE.itemsize
    if len(data) != expected:
        raise DatasetError(f"dataset length {len(data)}, expected {expected}")
    records = np.frombuffer(data, dtype=_RECORD_DTYPE, count=count, offset=48)
    labeled = bool(flags & 1)
    shifts = np.arange(SEQ_LEN, dtype=np.uint32)
    mask = (records["mask"][:, None] >> shifts) & 1
    return TokenDataset(
        ids=records["ids"].astype(np.int64),
        mask=mask.astype(bool),
        labels=records["label"].astype(np.int64) if labeled else None,
        vocab_hash=vocab_hash,
    )


def write_jsonl(ds: TokenDataset) -> str:
    lines = [json.dumps({"vocab_sha256": ds.vocab_hash.hex()}, separators=(",", ":"))]
    for i in range(len(ds)):
        row = {
            "ids": [int(x) for x in ds.ids[i]],
            "mask": [int(b) for b in ds.mask[i]],
            "label": int(ds.labels[i]) if ds.labeled else None,
        }
        lines.append(json.dumps(row, separators=(",", ":")))
    return "\n".join(lines) + "\n"


def read_jsonl(text: str) -> TokenDataset:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise DatasetError("empty jsonl dataset")
    try:
        header = json.loads(lines[0])
        vocab_hash = bytes.fromhex(header["vocab_sha256"])
    except (json.JSONDecodeError, KeyError, ValueError) as e:
        raise DatasetError(f"bad jsonl header: {e}") from None
    ids, mask, labels = [], [], []
    any_labels = False
    for ln in lines[1:]:
        row = json.loads(ln)
        ids.append(row["ids"])
        mask.append(row["mask"])
        if row.get("label") is not None:
            any_labels = True
            labels.append(row["label"])
        else:
            labels.append(-1)
    ids_arr = np.array(ids, dtype=np.int64)
    if ids_arr.ndim != 2 or ids_arr.shape[1] != SEQ_LEN:
        raise DatasetError("jsonl rows must carry exactly SEQ_LEN ids")
    return TokenDataset(
        ids=ids_arr,
        mask=np.array(mask, dtype=bool),
        labels=np.array(labels, dtype=np.int64) if any_labels else None,
        vocab_hash=vocab_hash,
    )


def split_dataset(ds: TokenDataset, n_train: int, n_eval: int, seed: int):
    """Deterministic shuffled split into (train, heldout)."""
    n = len(ds)
    if n_train + n_eval > n:
        raise DatasetError(f"split {n_train}+{n_eval} exceeds dataset size {n}")
    order = list(range(n))
    SplitMix64(derive_stream_seed(seed, SPLIT_STREAM)).shuffle(order)
    return ds.subset(order[:n_train]), ds.subset(order[n_train : n_train + n_eval])
