"""Small transformer encoder over 64-bit reals with hand-written reverse-mode
gradients: masked-token pretraining plus a 4-class head, sized so every
gradient is checkable against finite differences.

Architecture (pre-norm residual blocks, stabler at tiny scale):

    x = tok_emb[ids] + pos_emb[:L]
    per layer:  x = x + MHA(LN1(x));  x = x + FFN(LN2(x))
    h = LN_f(x)
    cls logits  = h[:, 0, :] @ cls_head.w          (position 0 is [CLS])
    mlm logits  = h @ mlm_head.w

FFN is w2 @ gelu(w1 x + b1) + b2 with exact (erf) GELU; the smooth activation
keeps finite-difference gradient checks tight. Attention masking is additive:
pad keys get -1e30 before softmax, which underflows to exactly zero weight, so
appending pad positions never changes non-pad outputs. Initialization scheme:
embeddings and all projection matrices uniform in [-1/sqrt(d_model),
+1/sqrt(d_model)] from the seeded splitmix64 stream (one derived stream per
array, in canonical order), biases and layer-norm shifts 0, layer-norm scales
1. Layer-norm epsilon is 1e-12, inside the square root.

Adam (bias-corrected, the update applied by ``adam_step``):

    m <- b1 m + (1-b1) g           mhat = m / (1 - b1^t)
    v <- b2 v + (1-b2) g^2         vhat = v / (1 - b2^t)
    p <- p - lr * mhat / (sqrt(vhat) + eps)
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from scipy.special import erf

from . import CLASS_NAMES
from .rng import derive_stream_seed, uniform_array

LN_EPS = 1e-12
MASK_NEG = -1e30
_SQRT_2PI = 2.5066282746310002  # sqrt(2*pi)


class IdOutOfRange(ValueError):
    """Token id outside [0, vocab_size)."""


class ShapeMismatch(ValueError):
    """Batch arrays inconsistent with the model configuration."""


class EmptyCorpus(ValueError):
    """Training requested on an empty corpus."""


class UnknownFreezeTarget(ValueError):
    """Freeze plan names a parameter array that does not exist."""


class CheckpointError(ValueError):
    """Checkpoint stream is not a valid SNTL file."""


class CompatibilityError(ValueError):
    """Checkpoint was built against a different vocabulary."""


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 128
    max_len: int = 32
    n_classes: int = 4
    dropout: float = 0.0

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ShapeMismatch("d_model must be divisible by n_heads")
        if self.dropout != 0.0:
            raise ValueError("deterministic build: dropout must be 0.0")


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Canonical parameter enumeration; iteration order defines init streams."""
    d, f = config.d_model, config.d_ff
    shapes: dict[str, tuple[int, ...]] = {
        "tok_emb": (config.vocab_size, d),
        "pos_emb": (config.max_len, d),
    }
    for i in range(config.n_layers):
        p = f"layers.{i}."
        shapes[p + "ln1.g"] = (d,)
        shapes[p + "ln1.b"] = (d,)
        shapes[p + "attn.wq"] = (d, d)
        shapes[p + "attn.wk"] = (d, d)
        shapes[p + "attn.wv"] = (d, d)
        shapes[p + "attn.wo"] = (d, d)
        shapes[p + "ln2.g"] = (d,)
        shapes[p + "ln2.b"] = (d,)
        shapes[p + "ffn.w1"] = (d, f)
        shapes[p + "ffn.b1"] = (f,)
        shapes[p + "ffn.w2"] = (f, d)
        shapes[p + "ffn.b2"] = (d,)
    shapes["ln_f.g"] = (d,)
    shapes["ln_f.b"] = (d,)
    shapes["mlm_head.w"] = (d, config.vocab_size)
    shapes["cls_head.w"] = (d, config.n_classes)
    return shapes


class ParamBundle:
    """Named float64 parameter arrays matching a ModelConfig."""

    def __init__(self, config: ModelConfig, arrays: dict[str, np.ndarray]):
        expected = param_shapes(config)
        if set(arrays) != set(expected):
            raise ShapeMismatch("parameter names do not match the configuration")
        for name, shape in expected.items():
            if arrays[name].shape != shape:
                raise ShapeMismatch(f"{name}: expected {shape}, got {arrays[name].shape}")
        self.config = config
        self.arrays = arrays

    @classmethod
    def initialize(cls, config: ModelConfig, seed: int) -> "ParamBundle":
        scale = 1.0 / np.sqrt(config.d_model)
        arrays = {}
        for idx, (name, shape) in enumerate(param_shapes(config).items()):
            if name.endswith(".g"):
                arrays[name] = np.ones(shape, dtype=np.float64)
            elif name.endswith((".b", ".b1", ".b2")):
                arrays[name] = np.zeros(shape, dtype=np.float64)
            else:
                n = int(np.prod(shape))
                arrays[name] = uniform_array(
                    derive_stream_seed(seed, idx), n, -scale, scale
                ).reshape(shape)
        return cls(config, arrays)

    def copy(self) -> "ParamBundle":
        return ParamBundle(self.config, {k: v.copy() for k, v in self.arrays.items()})

    def __getitem__(self, name: str) -> np.ndarray:
        return self.arrays[name]

    def zeros_like(self) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(v) for k, v in self.arrays.items()}

    def allfinite(self) -> bool:
        return all(np.isfinite(v).all() for v in self.arrays.values())


def resolve_freeze(params: ParamBundle, plan) -> set[str]:
    """Expand freeze-plan entries (array names or dotted prefixes) to array names."""
    frozen: set[str] = set()
    for target in plan:
        prefix = target.rstrip(".") + "."
        matched = [n for n in params.arrays if n == target or n.startswith(prefix)]
        if not matched:
            raise UnknownFreezeTarget(target)
        frozen.update(matched)
    return frozen


# -------------------------------------------------------------- primitive ops


def _gelu(z: np.ndarray) -> np.ndarray:
    return z * 0.5 * (1.0 + erf(z / np.sqrt(2.0)))


def _gelu_grad(z: np.ndarray) -> np.ndarray:
    phi = np.exp(-0.5 * z * z) / _SQRT_2PI
    return 0.5 * (1.0 + erf(z / np.sqrt(2.0))) + z * phi


def _layer_norm(x: np.ndarray, g: np.ndarray, b: np.ndarray):
    mu = x.mean(-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * inv
    return xhat * g + b, (xhat, inv)

def _layer_norm_backward(dy: np.ndarray, g: np.ndarray, cache):
    xhat, inv = cache
    axes = tuple(range(dy.ndim - 1))
    dg = (dy * xhat).sum(axis=axes)
    db = dy.sum(axis=axes)
    dxhat = dy * g
    m1 = dxhat.mean(-1, keepdims=True)
    m2 = (dxhat * xhat).mean(-1, keepdims=True)
    dx = inv * (dxhat - m1 - xhat * m2)
    return dx, dg, db


def _softmax_last(z: np.ndarray) -> np.ndarray:
    z = z - z.max(-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(-1, keepdims=True)


def _validate_batch(config: ModelConfig, ids: np.ndarray, mask: np.ndarray):
    if ids.ndim != 2 or ids.shape[1] > config.max_len:
        raise ShapeMismatch(f"ids shape {ids.shape} incompatible with max_len {config.max_len}")
    if mask.shape != ids.shape:
        raise ShapeMismatch("attention mask shape differs from ids")
    if ids.size and (ids.min() < 0 or ids.max() >= config.vocab_size):
        raise IdOutOfRange(f"ids must lie in [0, {config.vocab_size})")


def _encode(params: ParamBundle, ids: np.ndarray, mask: np.ndarray):
    """Forward pass through the encoder; returns final hidden states + cache."""
    config = params.config
    _validate_batch(config, ids, mask)
    a = params.arrays
    B, L = ids.shape
    H = config.n_heads
    d = config.d_model
    dk = d // H

    x = a["tok_emb"][ids] + a["pos_emb"][:L]
    key_bias = np.where(mask, 0.0, MASK_NEG)  # [B, L]

    cache = {"ids": ids, "mask": mask, "x0": x, "layers": []}
    for i in range(config.n_layers):
        p = f"layers.{i}."
        ln1_out, ln1_cache = _layer_norm(x, a[p + "ln1.g"], a[p + "ln1.b"])
        x2 = ln1_out.reshape(B * L, d)
        q = (x2 @ a[p + "attn.wq"]).reshape(B, L, H, dk).transpose(0, 2, 1, 3)
        k = (x2 @ a[p + "attn.wk"]).reshape(B, L, H, dk).transpose(0, 2, 1, 3)
        v = (x2 @ a[p + "attn.wv"]).reshape(B, L, H, dk).transpose(0, 2, 1, 3)
        scores = q @ k.transpose(0, 1, 3, 2) / np.sqrt(dk)
        scores = scores + key_bias[:, None, None, :]
        attn = _softmax_last(scores)  # [B, H, L, L]
        ctx = (attn @ v).transpose(0, 2, 1, 3).reshape(B * L, d)
        attn_out = (ctx @ a[p + "attn.wo"]).reshape(B, L, d)
        x = x + attn_out

        ln2_out, ln2_cache = _layer_norm(x, a[p + "ln2.g"], a[p + "ln2.b"])
        h2 = ln2_out.reshape(B * L, d)
        z1 = h2 @ a[p + "ffn.w1"] + a[p + "ffn.b1"]
        g1 = _gelu(z1)
        ffn_out = (g1 @ a[p + "ffn.w2"] + a[p + "ffn.b2"]).reshape(B, L, d)
        x = x + ffn_out

        cache["layers"].append(
            dict(ln1_out=ln1_out, ln1=ln1_cache, q=q, k=k, v=v, attn=attn, ctx=ctx,
                 ln2_out=ln2_out, ln2=ln2_cache, h2=h2, z1=z1, g1=g1)
        )

    h, lnf_cache = _layer_norm(x, a["ln_f.g"], a["ln_f.b"])
    cache["lnf"] = lnf_cache
    cache["h"] = h
    return h, cache


def _decode_backward(params: ParamBundle, cache, dh: np.ndarray, grads: dict):
    """Backprop dh (gradient at final hidden states) down to all parameters."""
    config = params.config
    a = params.arrays
    ids, mask = cache["ids"], cache["mask"]
    B, L = ids.shape
    H = config.n_heads
    d = config.d_model
    dk = d // H

    dx, dg, db = _layer_norm_backward(dh, a["ln_f.g"], cache["lnf"])
    grads["ln_f.g"] += dg
    grads["ln_f.b"] += db

    for i in reversed(range(config.n_layers)):
        p = f"layers.{i}."
        c = cache["layers"][i]

        # FFN block: x_out = x_mid + W2 gelu(W1 ln2(x_mid) + b1) + b2
        dffn = dx.reshape(B * L, d)
        grads[p + "ffn.b2"] += dffn.sum(0)
        grads[p + "ffn.w2"] += c["g1"].T @ dffn
        dg1 = dffn @ a[p + "ffn.w2"].T
        dz1 = dg1 * _gelu_grad(c["z1"])
        grads[p + "ffn.b1"] += dz1.sum(0)
        grads[p + "ffn.w1"] += c["h2"].T @ dz1
        dln2 = (dz1 @ a[p + "ffn.w1"].T).reshape(B, L, d)
        dmid, dg, db = _layer_norm_backward(dln2, a[p + "ln2.g"], c["ln2"])
        grads[p + "ln2.g"] += dg
        grads[p + "ln2.b"] += db
        dx = dx + dmid

        # attention block: x_mid = x_in + (attn(ln1(x_in)) @ wo)
        dattn_out = dx.reshape(B * L, d)
        grads[p + "attn.wo"] += c["ctx"].T @ dattn_out
        dctx = (dattn_out @ a[p + "attn.wo"].T).reshape(B, L, H, dk).transpose(0, 2, 1, 3)
        dattn = dctx @ c["v"].transpose(0, 1, 3, 2)
        dv = c["attn"].transpose(0, 1, 3, 2) @ dctx
        dscores = c["attn"] * (dattn - (dattn * c["attn"]).sum(-1, keepdims=True))
        dscores /= np.sqrt(dk)
        dq = dscores @ c["k"]
        dk_ = dscores.transpose(0, 1, 3, 2) @ c["q"]
        x2 = c["ln1_out"].reshape(B * L, d)

        def merge(t):
            return t.transpose(0, 2, 1, 3).reshape(B * L, d)

        dq2, dk2, dv2 = merge(dq), merge(dk_), merge(dv)
        grads[p + "attn.wq"] += x2.T @ dq2
        grads[p + "attn.wk"] += x2.T @ dk2
        grads[p + "attn.wv"] += x2.T @ dv2
        dln1 = (dq2 @ a[p + "attn.wq"].T + dk2 @ a[p + "attn.wk"].T + dv2 @ a[p + "attn.wv"].T)
        dln1 = dln1.reshape(B, L, d)
        din, dg, db = _layer_norm_backward(dln1, a[p + "ln1.g"], c["ln1"])
        grads[p + "ln1.g"] += dg
        grads[p + "ln1.b"] += db
        dx = dx + din

    # embeddings
    np.add.at(grads["tok_emb"], ids.reshape(-1), dx.reshape(B * L, d))
    grads["pos_emb"][:L] += dx.sum(0)


def forward(params: ParamBundle, ids, mask: np.ndarray | None = None):
    """Full forward: (hidden states, [CLS] class logits, per-position vocab logits).

    ``ids`` is an [B, L] integer array, or a batch (list) of TokenSeq, in which
    case the attention masks come from the sequences themselves.
    """
    if isinstance(ids, (list, tuple)) and ids and hasattr(ids[0], "attention_mask"):
        mask = np.array([s.attention_mask for s in ids], dtype=bool)
        ids = np.array([s.ids for s in ids], dtype=np.int64)
    ids = np.asarray(ids)
    if mask is None:
        mask = ids != 0
    mask = np.asarray(mask, dtype=bool)
    h, _ = _encode(params, ids, mask)
    cls_logits = h[:, 0, :] @ params["cls_head.w"]
    mlm_logits = h @ params["mlm_head.w"]
    return h, cls_logits, mlm_logits


@dataclass(frozen=True)
class MaskPlan:
    """Masked-token corruption plan: model inputs, selected positions, originals."""

    inputs: np.ndarray  # [B, L] corrupted ids fed to the model
    selected: np.ndarray  # [B, L] bool, positions contributing to the loss
    targets: np.ndarray  # [B, L] original ids


def _cross_entropy(logits: np.ndarray, targets: np.ndarray):
    """Mean CE over rows; returns (loss, dlogits, argmax predictions)."""
    n = logits.shape[0]
    z = logits - logits.max(-1, keepdims=True)
    lse = np.log(np.exp(z).sum(-1))
    loss = float((lse - z[np.arange(n), targets]).mean())
    probs = np.exp(z - lse[:, None])
    pred = probs.argmax(-1)
    probs[np.arange(n), targets] -= 1.0
    return loss, probs / n, pred


def _mlm_forward(params: ParamBundle, mask: np.ndarray, plan: MaskPlan):
    h, cache = _encode(params, plan.inputs, mask)
    sel = plan.selected & mask
    rows = h[sel]  # [n_sel, d]
    targets = plan.targets[sel]
    if rows.shape[0] == 0:
        return 0.0, None, cache, sel
    logits = rows @ params["mlm_head.w"]
    loss, dlogits, pred = _cross_entropy(logits, targets)
    return loss, (rows, dlogits, pred, targets), cache, sel


def mlm_loss(params: ParamBundle, mask: np.ndarray, plan: MaskPlan) -> float:
    """Mean cross-entropy over the plan's selected positions only."""
    loss, _, _, _ = _mlm_forward(params, np.asarray(mask, dtype=bool), plan)
    return loss


def _cls_forward(params: ParamBundle, ids: np.ndarray, mask: np.ndarray, labels: np.ndarray):
    h, cache = _encode(params, ids, mask)
    logits = h[:, 0, :] @ params["cls_head.w"]
    loss, dlogits, pred = _cross_entropy(logits, labels)
    return loss, (h, dlogits, pred), cache


def cls_loss(params: ParamBundle, ids: np.ndarray, mask: np.ndarray, labels: np.ndarray) -> float:
    """Mean cross-entropy of the [CLS] class logits against labels."""
    loss, _, _ = _cls_forward(params, np.asarray(ids), np.asarray(mask, dtype=bool), np.asarray(labels))
    return loss


def backward(
    params: ParamBundle,
    ids_or_plan,
    mask: np.ndarray,
    kind: str,
    labels: np.ndarray | None = None,
    freeze: set[str] | frozenset[str] = frozenset(),
    want_aux: bool = False,
):
    """Loss + gradient for every parameter array.

    ``kind`` is "mlm" (ids_or_plan is a MaskPlan) or "cls" (ids_or_plan is the
    id array, ``labels`` the class ids). Frozen arrays get exactly-zero grads.
    With ``want_aux`` a third return carries argmax predictions and targets
    (training-loop bookkeeping only).
    """
    mask = np.asarray(mask, dtype=bool)
    grads = params.zeros_like()
    aux: dict = {}
    if kind == "mlm":
        plan = ids_or_plan
        loss, head, cache, sel = _mlm_forward(params, mask, plan)
        if head is not None:
            rows, dlogits, pred, targets = head
            grads["mlm_head.w"] += rows.T @ dlogits
            dh = np.zeros_like(cache["h"])
            dh[sel] = dlogits @ params["mlm_head.w"].T
            _decode_backward(params, cache, dh, grads)
            aux = {"pred": pred, "targets": targets}
        else:
            aux = {"pred": np.zeros(0, dtype=np.int64), "targets": np.zeros(0, dtype=np.int64)}
    elif kind == "cls":
        ids = np.asarray(ids_or_plan)
        labels = np.asarray(labels)
        loss, (h, dlogits, pred), cache = _cls_forward(params, ids, mask, labels)
        grads["cls_head.w"] += h[:, 0, :].T @ dlogits
        dh = np.zeros_like(h)
        dh[:, 0, :] = dlogits @ params["cls_head.w"].T
        _decode_backward(params, cache, dh, grads)
        aux = {"pred": pred, "targets": labels}
    else:
        raise ValueError(f"unknown loss kind {kind!r}")
    for name in freeze:
        grads[name][...] = 0.0
    if want_aux:
        return loss, grads, aux
    return loss, grads


# ------------------------------------------------------------------ optimizer


@dataclass
class OptState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: ParamBundle, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        return cls(m=params.zeros_like(), v=params.zeros_like(), t=0,
                   lr=lr, beta1=beta1, beta2=beta2, eps=eps)


def adam_step(params: ParamBundle, grads: dict[str, np.ndarray], state: OptState):
    """One bias-corrected Adam update (formula in the module docstring); in place."""
    state.t += 1
    bc1 = 1.0 - state.beta1**state.t
    bc2 = 1.0 - state.beta2**state.t
    for name, p in params.arrays.items():
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return params, state


# ------------------------------------------------------------------ inference


@dataclass(frozen=True)
class ThreatVerdict:
    class_name: str
    probs: tuple[float, ...]
    threat_level: float  # 1 - P(benign)

    @property
    def class_id(self) -> int:
        return CLASS_NAMES.index(self.class_name)


def predict_batch(params: ParamBundle, ids: np.ndarray, mask: np.ndarray | None = None):
    ids = np.asarray(ids)
    if mask is None:
        mask = ids != 0
    h, cache = _encode(params, ids, np.asarray(mask, dtype=bool))
    logits = h[:, 0, :] @ params["cls_head.w"]
    probs = _softmax_last(logits)
    verdicts = []
    for row in probs:
        cls = int(row.argmax())
        verdicts.append(
            ThreatVerdict(
                class_name=CLASS_NAMES[cls],
                probs=tuple(float(x) for x in row),
                threat_level=float(1.0 - row[0]),
            )
        )
    return verdicts


def predict(params: ParamBundle, seq) -> ThreatVerdict:
    """Verdict for one TokenSeq."""
    ids = np.array([seq.ids], dtype=np.int64)
    mask = np.array([seq.attention_mask], dtype=bool)
    return predict_batch(params, ids, mask)[0]


# ---------------------------------------------------------------- checkpoints

CHECKPOINT_MAGIC = b"SNTL"
CHECKPOINT_VERSION = 1


def save_checkpoint(params: ParamBundle, vocab_hash: bytes) -> bytes:
    """SNTL container: magic, version, config, vocab SHA-256, named f64 arrays."""
    if len(vocab_hash) != 32:
        raise ValueError("vocab_hash must be a 32-byte SHA-256 digest")
    c = params.config
    out = bytearray()
    out += CHECKPOINT_MAGIC
    out += struct.pack("<H", CHECKPOINT_VERSION)
    out += struct.pack(
        "<IIIIIIId", c.vocab_size, c.d_model, c.n_layers, c.n_heads, c.d_ff,
        c.max_len, c.n_classes, c.dropout,
    )
    out += vocab_hash
    names = sorted(params.arrays)
    out += struct.pack("<I", len(names))
    for name in names:
        arr = np.ascontiguousarray(params.arrays[name], dtype=np.float64)
        enc = name.encode("utf-8")
        out += struct.pack("<H", len(enc))
        out += enc
        out += struct.pack("<B", arr.ndim)
        for dim in arr.shape:
            out += struct.pack("<I", dim)
        out += arr.astype("<f8").tobytes()
    return bytes(out)


def load_checkpoint(data: bytes, expect_vocab_hash: bytes | None = None):
    """Returns (ParamBundle, vocab_hash). Bit-exact inverse of save_checkpoint."""
    if data[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError("bad magic")
    off = 4
    (version,) = struct.unpack_from("<H", data, off)
    off += 2
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported version {version}")
    vocab_size, d_model, n_layers, n_heads, d_ff, max_len, n_classes, dropout = (
        struct.unpack_from("<IIIIIIId", data, off)
    )
    off += struct.calcsize("<IIIIIIId")
    vocab_hash = data[off : off + 32]
    off += 32
    if expect_vocab_hash is not None and vocab_hash != expect_vocab_hash:
        raise CompatibilityError("checkpoint was built against a different vocabulary")
    config = ModelConfig(
        vocab_size=vocab_size, d_model=d_model, n_layers=n_layers, n_heads=n_heads,
        d_ff=d_ff, max_len=max_len, n_classes=n_classes, dropout=dropout,
    )
    (n_arrays,) = struct.unpack_from("<I", data, off)
    off += 4
    arrays = {}
    for _ in range(n_arrays):
        (name_len,) = struct.unpack_from("<H", data, off)
        off += 2
        name = data[off : off + name_len].decode("utf-8")
        off += name_len
        (rank,) = struct.unpack_from("<B", data, off)
        off += 1
        dims = struct.unpack_from(f"<{rank}I", data, off)
        off += 4 * rank
        count = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(data, dtype="<f8", count=count, offset=off).reshape(dims)
        off += 8 * count
        arrays[name] = arr.astype(np.float64)
    if off != len(data):
        raise CheckpointError("trailing bytes after last array")
    return ParamBundle(config, arrays), vocab_hash
