"""Encoder-decoder sequence model over per-entity activity steps.

Each step is concat(position scalar, z-scored numerics, categorical
embeddings) projected into the hidden size. The encoder is a stack of
{self-attention, FFN} blocks, the decoder {causal self-attention, causal
cross-attention over the encoder output, FFN}; every sublayer is wrapped in
residual + post layer norm. Reconstruction heads emit one scalar per
numeric column and vocab+1 logits per categorical column at each position.
The embedding head mean-pools encoder output over non-pad positions,
concatenates the static attributes and applies two dense layers.

Padding sits on the oldest side; pad (and masked) positions enter the model
as all-zero step vectors and are excluded from attention keys, loss and
pooling. Position scalars are anchored at the recent end, so the latest
real step always carries scalar 1.0 regardless of pad length.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, NumericError, SchemaMismatch

NEG_INF = -1e9


@dataclass
class ModelConfig:
    hidden: int = 16
    ff_dim: int = 32
    layers: int = 6
    heads: int = 8
    dropout: float = 0.1
    t: int = 15
    mask_p: float = 0.3
    emb_out: int = 16
    precision: str = "f32"
    pooling: str = "mean"   # mean | last | max over non-pad positions

    def __post_init__(self):
        if self.hidden % self.heads != 0:
            raise ConfigError(f"hidden ({self.hidden}) must be divisible by heads ({self.heads})")
        if not 0.0 <= self.mask_p <= 1.0:
            raise ConfigError(f"mask_p must be in [0, 1], got {self.mask_p}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.pooling not in ("mean", "last", "max"):
            raise ConfigError(f"unknown pooling {self.pooling!r}")

    @property
    def d_k(self):
        return self.hidden // self.heads

    def to_json(self):
        return asdict(self)

    @classmethod
    def from_json(cls, obj):
        return cls(**obj)


@dataclass
class EmbeddingRecord:
    entity: str
    vector: np.ndarray


@dataclass
class Batch:
    """Model-ready arrays for a list of EntitySequences (fixed length t)."""

    entities: list[str]
    pos: np.ndarray       # (B, t) position scalar per slot, 0 at pad
    nums: np.ndarray      # (B, t, n_num) z-scored values, 0 at pad
    cats: np.ndarray      # (B, t, n_cat) int codes, 0 at pad
    real: np.ndarray      # (B, t) bool, True where a real step sits
    keep: np.ndarray      # (B, t) float, 1 where the model may see the step
    statics: np.ndarray   # (B, s)

    @property
    def size(self):
        return len(self.entities)

    def with_keep(self, keep):
        return Batch(self.entities, self.pos, self.nums, self.cats, self.real, keep, self.statics)


def prepare_batch(sequences, fitted, cfg):
    """Materialize sequences into slot-aligned arrays of length cfg.t.

    Real steps occupy the trailing slots; slot i (1-based) carries position
    scalar i/t, so the most recent step is always at scalar 1.0.
    """
    t = cfg.t
    dtype = ad.resolve_dtype(cfg.precision)
    b = len(sequences)
    n_num = len(fitted.seq_numeric_cols)
    n_cat = len(fitted.seq_categorical_cols)
    pos = np.zeros((b, t), dtype=dtype)
    nums = np.zeros((b, t, n_num), dtype=dtype)
    cats = np.zeros((b, t, n_cat), dtype=np.int64)
    real = np.zeros((b, t), dtype=bool)
    statics = np.zeros((b, fitted.statics_width), dtype=dtype)
    for bi, seq in enumerate(sequences):
        k = len(seq.steps)
        if k > t:
            raise SchemaMismatch(f"sequence for {seq.entity!r} has {k} steps, exceeds t={t}")
        for j, step in enumerate(seq.steps):
            slot = t - k + j
            pos[bi, slot] = (slot + 1) / t
            if len(step.nums) != n_num or len(step.cats) != n_cat:
                raise SchemaMismatch(f"row arity mismatch for entity {seq.entity!r}")
            nums[bi, slot] = step.nums
            cats[bi, slot] = step.cats
            real[bi, slot] = True
        if len(seq.statics) != fitted.statics_width:
            raise SchemaMismatch(f"statics width mismatch for entity {seq.entity!r}")
        statics[bi] = seq.statics
    keep = real.astype(dtype)
    return Batch(
        entities=[s.entity for s in sequences],
        pos=pos,
        nums=nums,
        cats=cats,
        real=real,
        keep=keep,
        statics=statics,
    )


def _xavier(rng, fan_in, fan_out, shape, dtype):
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class ModelWeights:
    """Named parameter store; iteration order is fixed at construction."""

    def __init__(self, cfg, fitted):
        self.cfg = cfg
        self.fitted = fitted
        self.params: dict[str, Tensor] = {}

    def _add(self, name, data):
        self.params[name] = Tensor(data, requires_grad=True)

    def __getitem__(self, name):
        return self.params[name]

    def names(self):
        return list(self.params)

    def items(self):
        return self.params.items()

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def clone_arrays(self):
        return {name: p.data.copy() for name, p in self.params.items()}

    def load_arrays(self, arrays):
        for name, p in self.params.items():
            if name not in arrays:
                raise SchemaMismatch(f"missing weight tensor {name!r}")
            if arrays[name].shape != p.data.shape:
                raise SchemaMismatch(f"weight {name!r}: shape {arrays[name].shape} != {p.data.shape}")
            p.data = arrays[name].astype(p.data.dtype, copy=True)


def build_weights(cfg, fitted, rng):
    """Initialize all learnable tensors (Xavier linear, +-0.05 embeddings).

    Linear biases get the same small uniform noise as embeddings: a fully
    masked (all-zero) sequence then produces rows with nonzero per-row
    variance, keeping every layer norm away from its zero-variance point
    where backward gradients blow up as 1/sqrt(eps) per norm.
    """
    dtype = ad.resolve_dtype(cfg.precision)
    w = ModelWeights(cfg, fitted)
    h = cfg.hidden

    def bias(n):
        return rng.uniform(-0.05, 0.05, size=n).astype(dtype)

    for col in fitted.seq_categorical_cols:
        rows = len(fitted.vocab[col]) + 1
        dim = fitted.embed_dims[col]
        table = rng.uniform(-0.05, 0.05, size=(rows, dim)).astype(dtype)
        table[0] = 0.0  # padding/OOV row starts at zero, stays trainable
        w._add(f"emb/{col}", table)

    width = fitted.step_width
    w._add("in_proj/w", _xavier(rng, width, h, (width, h), dtype))
    w._add("in_proj/b", bias(h))

    def attn_block(prefix):
        for name in ("wq", "wk", "wv", "wo"):
            w._add(f"{prefix}/{name}", _xavier(rng, h, h, (h, h), dtype))

    def ffn_block(prefix):
        w._add(f"{prefix}/w1", _xavier(rng, h, cfg.ff_dim, (h, cfg.ff_dim), dtype))
        w._add(f"{prefix}/b1", bias(cfg.ff_dim))
        w._add(f"{prefix}/w2", _xavier(rng, cfg.ff_dim, h, (cfg.ff_dim, h), dtype))
        w._add(f"{prefix}/b2", bias(h))

    def norm_block(prefix):
        w._add(f"{prefix}/g", np.ones(h, dtype=dtype))
        w._add(f"{prefix}/b", np.zeros(h, dtype=dtype))

    for i in range(cfg.layers):
        attn_block(f"enc{i}/attn")
        norm_block(f"enc{i}/ln1")
        ffn_block(f"enc{i}/ffn")
        norm_block(f"enc{i}/ln2")
    for i in range(cfg.layers):
        attn_block(f"dec{i}/self")
        norm_block(f"dec{i}/ln1")
        attn_block(f"dec{i}/cross")
        norm_block(f"dec{i}/ln2")
        ffn_block(f"dec{i}/ffn")
        norm_block(f"dec{i}/ln3")

    for col in fitted.seq_numeric_cols:
        w._add(f"head/num/{col}/w", _xavier(rng, h, 1, (h, 1), dtype))
        w._add(f"head/num/{col}/b", bias(1))
    for col in fitted.seq_categorical_cols:
        n_out = len(fitted.vocab[col]) + 1
        w._add(f"head/cat/{col}/w", _xavier(rng, h, n_out, (h, n_out), dtype))
        w._add(f"head/cat/{col}/b", bias(n_out))

    s = fitted.statics_width
    w._add("emb_head/w1", _xavier(rng, h + s, cfg.emb_out, (h + s, cfg.emb_out), dtype))
    w._add("emb_head/b1", bias(cfg.emb_out))
    w._add("emb_head/w2", _xavier(rng, cfg.emb_out, cfg.emb_out, (cfg.emb_out, cfg.emb_out), dtype))
    w._add("emb_head/b2", bias(cfg.emb_out))
    return w


def _as_batch(batch, weights):
    if isinstance(batch, Batch):
        return batch
    return prepare_batch(batch, weights.fitted, weights.cfg)


def project_inputs(batch, weights):
    """Assemble step vectors and project them into the hidden size."""
    batch = _as_batch(batch, weights)
    fitted, cfg = weights.fitted, weights.cfg
    if batch.nums.shape[2] != len(fitted.seq_numeric_cols) or batch.cats.shape[2] != len(fitted.seq_categorical_cols):
        raise SchemaMismatch(
            f"batch has {batch.nums.shape[2]} numeric / {batch.cats.shape[2]} categorical columns, "
            f"weights expect {len(fitted.seq_numeric_cols)} / {len(fitted.seq_categorical_cols)}"
        )
    parts = [Tensor(batch.pos[..., None]), Tensor(batch.nums)]
    for ci, col in enumerate(fitted.seq_categorical_cols):
        parts.append(ad.embedding(weights[f"emb/{col}"], batch.cats[..., ci]))
    x = ad.concat(parts, axis=2) if len(parts) > 1 else parts[0]
    # zero out pad and masked slots in one stroke, killing their gradients too
    keep = np.broadcast_to(batch.keep[..., None], x.shape).astype(x.dtype)
    x = ad.mul(x, Tensor(keep))
    return ad.add(ad.matmul(x, weights["in_proj/w"]), weights["in_proj/b"])


def scaled_dot_attention(q, k, v, mask=None):
    """softmax(QK^T / sqrt(d_k)) V with an additive mask (NEG_INF = blocked)."""
    d_k = q.shape[-1]
    scores = ad.mul(ad.matmul(q, ad.transpose(k)), 1.0 / np.sqrt(d_k))
    if mask is not None:
        m = mask.data if isinstance(mask, Tensor) else np.asarray(mask)
        if (m <= NEG_INF).all(axis=-1).any():
            raise NumericError("attention row with no attendable position")
        scores = ad.add(scores, Tensor(m.astype(scores.dtype)))
    weights = ad.softmax(scores, axis=-1)
    return ad.matmul(weights, v)


def _split_heads(x, heads):
    b, t, h = x.shape
    return ad.reshape(ad.transpose(ad.reshape(x, (b, t, heads, h // heads)), (0, 2, 1, 3)), (b * heads, t, h // heads))


def _merge_heads(x, heads, b):
    bh, t, dk = x.shape
    return ad.reshape(ad.transpose(ad.reshape(x, (b, heads, t, dk)), (0, 2, 1, 3)), (b, t, heads * dk))


def multi_head(h, context, mask, layer, heads):
    """Per-head Q/K/V projections, scaled-dot attention, concat, W^O."""
    b = h.shape[0]
    q = _split_heads(ad.matmul(h, layer["wq"]), heads)
    k = _split_heads(ad.matmul(context, layer["wk"]), heads)
    v = _split_heads(ad.matmul(context, layer["wv"]), heads)
    m = None
    if mask is not None:
        m = np.repeat(mask, heads, axis=0)
    out = scaled_dot_attention(q, k, v, m)
    return ad.matmul(_merge_heads(out, heads, b), layer["wo"])


def _layer_weights(weights, prefix):
    return {name: weights[f"{prefix}/{name}"] for name in ("wq", "wk", "wv", "wo")}


def _dropout(x, p, train, rng):
    if not train or p <= 0.0:
        return x
    if rng is None:
        raise ConfigError("dropout requires an rng in training mode")
    mask = (rng.random(x.shape) >= p).astype(x.data.dtype) / (1.0 - p)
    return ad.mul(x, Tensor(mask))


def _sublayer(x, out, weights, ln_prefix, p, train, rng):
    """Residual add + post layer norm around a sublayer output."""
    out = _dropout(out, p, train, rng)
    return ad.layer_norm(ad.add(x, out), weights[f"{ln_prefix}/g"], weights[f"{ln_prefix}/b"])


def _ffn(x, weights, prefix):
    inner = ad.relu(ad.add(ad.matmul(x, weights[f"{prefix}/w1"]), weights[f"{prefix}/b1"]))
    return ad.add(ad.matmul(inner, weights[f"{prefix}/w2"]), weights[f"{prefix}/b2"])


def encoder_mask(real):
    """(B, t, t) additive mask: pad keys blocked, pad queries left open."""
    b, t = real.shape
    allowed = np.broadcast_to(real[:, None, :], (b, t, t)) | ~real[:, :, None]
    return np.where(allowed, 0.0, NEG_INF)


def causal_mask(real):
    """Pad-key mask intersected with the lower-triangular allow pattern."""
    b, t = real.shape
    tri = np.tril(np.ones((t, t), dtype=bool))
    allowed = (np.broadcast_to(real[:, None, :], (b, t, t)) & tri[None, :, :]) | ~real[:, :, None]
    return np.where(allowed, 0.0, NEG_INF)


def encoder_forward(batch, weights, train=False, rng=None):
    """Stack of {self-attention, FFN} blocks over the projected input."""
    batch = _as_batch(batch, weights)
    cfg = weights.cfg
    h = project_inputs(batch, weights)
    mask = encoder_mask(batch.real)
    for i in range(cfg.layers):
        attn = multi_head(h, h, mask, _layer_weights(weights, f"enc{i}/attn"), cfg.heads)
        h = _sublayer(h, attn, weights, f"enc{i}/ln1", cfg.dropout, train, rng)
        h = _sublayer(h, _ffn(h, weights, f"enc{i}/ffn"), weights, f"enc{i}/ln2", cfg.dropout, train, rng)
    return h


def decoder_forward(batch, encoder_out, weights, train=False, rng=None):
    """Causal self-attention, causal cross-attention over encoder output, FFN."""
    batch = _as_batch(batch, weights)
    cfg = weights.cfg
    h = project_inputs(batch, weights)
    mask = causal_mask(batch.real)
    for i in range(cfg.layers):
        self_attn = multi_head(h, h, mask, _layer_weights(weights, f"dec{i}/self"), cfg.heads)
        h = _sublayer(h, self_attn, weights, f"dec{i}/ln1", cfg.dropout, train, rng)
        cross = multi_head(h, encoder_out, mask, _layer_weights(weights, f"dec{i}/cross"), cfg.heads)
        h = _sublayer(h, cross, weights, f"dec{i}/ln2", cfg.dropout, train, rng)
        h = _sublayer(h, _ffn(h, weights, f"dec{i}/ffn"), weights, f"dec{i}/ln3", cfg.dropout, train, rng)
    return h


def reconstruction_heads(decoder_out, weights):
    """Per-column predictions: scalars for numerics, logits for categoricals."""
    fitted = weights.fitted
    preds = {}
    for col in fitted.seq_numeric_cols:
        preds[col] = ad.add(ad.matmul(decoder_out, weights[f"head/num/{col}/w"]), weights[f"head/num/{col}/b"])
    for col in fitted.seq_categorical_cols:
        preds[col] = ad.add(ad.matmul(decoder_out, weights[f"head/cat/{col}/w"]), weights[f"head/cat/{col}/b"])
    return preds


def _pool(enc, batch, mode):
    data = enc.data
    real = batch.real
    counts = real.sum(axis=1)
    pooled = np.zeros((data.shape[0], data.shape[2]), dtype=data.dtype)
    for bi in range(data.shape[0]):
        if counts[bi] == 0:
            continue  # all-pad entity pools to zero
        rows = data[bi][real[bi]]
        if mode == "mean":
            pooled[bi] = rows.mean(axis=0)
        elif mode == "last":
            pooled[bi] = rows[-1]
        else:
            pooled[bi] = rows.max(axis=0)
    return pooled


def embed(batch, weights):
    """Inference-mode entity vectors: pool encoder output, join statics, 2 dense layers."""
    batch = _as_batch(batch, weights)
    enc = encoder_forward(batch, weights, train=False)
    pooled = _pool(enc, batch, weights.cfg.pooling)
    joined = Tensor(np.concatenate([pooled, batch.statics.astype(pooled.dtype)], axis=1))
    hidden = ad.relu(ad.add(ad.matmul(joined, weights["emb_head/w1"]), weights["emb_head/b1"]))
    out = ad.add(ad.matmul(hidden, weights["emb_head/w2"]), weights["emb_head/b2"])
    if not np.isfinite(out.data).all():
        raise NumericError("embedding head produced non-finite values")
    return [EmbeddingRecord(entity=e, vector=out.data[i].copy()) for i, e in enumerate(batch.entities)]
