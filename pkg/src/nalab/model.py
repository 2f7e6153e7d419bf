"""Tiny pre-norm transformers: an encoder for masked-LM work and an
encoder-decoder for sequence-to-sequence work, both built on the
interchangeable QKV projection kinds.

Every sublayer normalizes its input before transforming it and adds the
result back onto the residual stream; with zero layers the encoder output is
exactly embedding + positional encoding.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .attention import PRESETS, AttentionConfig, MultiHeadAttention, fan_in_std, parameter_count
from .data import BOS_ID, EOS_ID, PAD_ID, Batch
from .rng import Rng, derive_seed
from .tensor import (
    Tensor,
    add,
    add_const,
    cross_entropy,
    dropout,
    embedding,
    init_trunc_normal,
    layer_norm,
    matmul,
    permute,
    relu,
    reshape,
    take_rows,
    zeros,
    ones,
)


# embeddings carry token identity at a visible but PE-subordinate scale;
# the small head keeps initial logits near zero (init loss close to ln V)
EMBED_STD = 0.1
HEAD_STD = 0.02


@dataclass
class ModelConfig:
    vocab_size: int
    d_model: int = 64
    num_layers: int = 2
    num_heads: int = 4
    d_ff: int = 256
    dropout_p: float = 0.1
    max_seq_len: int = 64
    projection: str = "standard"  # preset: standard | dlp | neural | neural-qkv
    expansion: int = 2
    architecture: str = "encoder-decoder"  # or "encoder"
    use_positional: bool = True
    use_bias: bool = True
    tie_embeddings: bool = False
    dtype: str = "f32"

    def __post_init__(self):
        if self.d_model % self.num_heads != 0:
            raise ValueError(f"num_heads {self.num_heads} must divide d_model {self.d_model}")
        if self.projection not in PRESETS:
            raise ValueError(f"unknown projection preset {self.projection!r}")
        if self.architecture not in ("encoder", "encoder-decoder"):
            raise ValueError(f"unknown architecture {self.architecture!r}")
        if self.dtype not in ("f32", "f64"):
            raise ValueError(f"dtype must be 'f32' or 'f64', got {self.dtype!r}")

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "f32" else np.float64

    def attention_config(self, causal: bool = False) -> AttentionConfig:
        return AttentionConfig.from_preset(
            self.projection,
            d_model=self.d_model,
            num_heads=self.num_heads,
            dropout_p=self.dropout_p,
            causal=causal,
            expansion=self.expansion,
            use_bias=self.use_bias,
        )


def sinusoidal_encoding(max_len: int, d_model: int, dtype=np.float32) -> np.ndarray:
    """Fixed sin/cos position table, one row per position."""
    pe = np.zeros((max_len, d_model), dtype=np.float64)
    position = np.arange(max_len)[:, None].astype(np.float64)
    div = np.exp(np.arange(0, d_model, 2) * (-np.log(10000.0) / d_model))
    pe[:, 0::2] = np.sin(position * div)
    pe[:, 1::2] = np.cos(position * div[: d_model // 2])
    return pe.astype(dtype)


class LayerNormParams:
    def __init__(self, h: int, dtype):
        self.gamma = ones((h,), dtype=dtype, requires_grad=True)
        self.beta = zeros((h,), dtype=dtype, requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gamma, self.beta)

    def named_parameters(self, prefix: str):
        yield f"{prefix}.gamma", self.gamma
        yield f"{prefix}.beta", self.beta


class FeedForward:
    """Position-wise two-layer ReLU network."""

    def __init__(self, d_model: int, d_ff: int, rng: Rng, dtype):
        self.W1 = init_trunc_normal((d_model, d_ff), rng, std=fan_in_std(d_model), dtype=dtype)
        self.b1 = zeros((d_ff,), dtype=dtype, requires_grad=True)
        self.W2 = init_trunc_normal((d_ff, d_model), rng, std=fan_in_std(d_ff), dtype=dtype)
        self.b2 = zeros((d_model,), dtype=dtype, requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        batch, length, d = x.shape
        flat = reshape(x, (batch * length, d))
        hidden = relu(add(matmul(flat, self.W1), self.b1))
        out = add(matmul(hidden, self.W2), self.b2)
        return reshape(out, (batch, length, d))

    def named_parameters(self, prefix: str):
        for name in ("W1", "b1", "W2", "b2"):
            yield f"{prefix}.{name}", getattr(self, name)


class EncoderLayer:
    def __init__(self, cfg: ModelConfig, rng: Rng):
        dtype = cfg.np_dtype
        self.ln1 = LayerNormParams(cfg.d_model, dtype)
        self.attn = MultiHeadAttention(cfg.attention_config(), _child(rng, "attn"), dtype=dtype)
        self.ln2 = LayerNormParams(cfg.d_model, dtype)
        self.ff = FeedForward(cfg.d_model, cfg.d_ff, _child(rng, "ff"), dtype)
        self.dropout_p = cfg.dropout_p

    def __call__(self, x, mask, training, rng):
        h = self.ln1(x)
        a = self.attn(h, h, mask=mask, training=training, rng=rng)
        x = add(x, dropout(a, self.dropout_p, rng, training))
        f = self.ff(self.ln2(x))
        return add(x, dropout(f, self.dropout_p, rng, training))

    def named_parameters(self, prefix: str):
        yield from self.ln1.named_parameters(f"{prefix}.ln1")
        yield from self.attn.named_parameters(f"{prefix}.attn")
        yield from self.ln2.named_parameters(f"{prefix}.ln2")
        yield from self.ff.named_parameters(f"{prefix}.ff")


class DecoderLayer:
    def __init__(self, cfg: ModelConfig, rng: Rng):
        dtype = cfg.np_dtype
        self.ln1 = LayerNormParams(cfg.d_model, dtype)
        self.self_attn = MultiHeadAttention(
            cfg.attention_config(causal=True), _child(rng, "self_attn"), dtype=dtype
        )
        self.ln2 = LayerNormParams(cfg.d_model, dtype)
        self.cross_attn = MultiHeadAttention(
            cfg.attention_config(), _child(rng, "cross_attn"), dtype=dtype
        )
        self.ln3 = LayerNormParams(cfg.d_model, dtype)
        self.ff = FeedForward(cfg.d_model, cfg.d_ff, _child(rng, "ff"), dtype)
        self.dropout_p = cfg.dropout_p

    def __call__(self, x, memory, self_mask, cross_mask, training, rng):
        h = self.ln1(x)
        a = self.self_attn(h, h, mask=self_mask, training=training, rng=rng)
        x = add(x, dropout(a, self.dropout_p, rng, training))
        h = self.ln2(x)
        c = self.cross_attn(h, memory, mask=cross_mask, training=training, rng=rng)
        x = add(x, dropout(c, self.dropout_p, rng, training))
        f = self.ff(self.ln3(x))
        return add(x, dropout(f, self.dropout_p, rng, training))

    def named_parameters(self, prefix: str):
        yield from self.ln1.named_parameters(f"{prefix}.ln1")
        yield from self.self_attn.named_parameters(f"{prefix}.self_attn")
        yield from self.ln2.named_parameters(f"{prefix}.ln2")
        yield from self.cross_attn.named_parameters(f"{prefix}.cross_attn")
        yield from self.ln3.named_parameters(f"{prefix}.ln3")
        yield from self.ff.named_parameters(f"{prefix}.ff")


class _ModelBase:
    cfg: ModelConfig

    def named_parameters(self):
        raise NotImplementedError

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def _embed(self, batch: Batch) -> Tensor:
        cfg = self.cfg
        length = batch.ids.shape[1]
        if length > cfg.max_seq_len:
            raise ValueError(
                f"sequence length {length} exceeds max_seq_len {cfg.max_seq_len}"
            )
        x = embedding(self.embedding_table, batch.ids)
        if cfg.use_positional:
            x = add_const(x, self.positional[:length])
        return x

    def _init_head(self, seed: int, dtype) -> None:
        cfg = self.cfg
        if cfg.tie_embeddings:
            self.head_W = None  # logits read the embedding table transposed
        else:
            self.head_W = init_trunc_normal(
                (cfg.d_model, cfg.vocab_size), Rng(derive_seed(seed, "head")),
                std=HEAD_STD, dtype=dtype,
            )
        self.head_b = zeros((cfg.vocab_size,), dtype=dtype, requires_grad=True)

    def project_to_vocab(self, flat: Tensor) -> Tensor:
        """Map [n, d_model] states to [n, vocab] logits through the head."""
        if self.head_W is None:
            return add(matmul(flat, permute(self.embedding_table, (1, 0))), self.head_b)
        return add(matmul(flat, self.head_W), self.head_b)

    def vocab_projection_matrix(self) -> np.ndarray:
        """The effective head weight matrix [d_model, vocab], as a plain array."""
        if self.head_W is None:
            return self.embedding_table.data.T
        return self.head_W.data

    def _named_head_parameters(self):
        if self.head_W is not None:
            yield "head.W", self.head_W
        yield "head.b", self.head_b


class TransformerEncoder(_ModelBase):
    """Encoder stack plus a vocabulary head for masked-token prediction."""

    def __init__(self, cfg: ModelConfig, seed: int):
        if cfg.architecture != "encoder":
            raise ValueError("TransformerEncoder requires architecture='encoder'")
        self.cfg = cfg
        dtype = cfg.np_dtype
        self.embedding_table = init_trunc_normal(
            (cfg.vocab_size, cfg.d_model), Rng(derive_seed(seed, "embedding")),
            std=EMBED_STD, dtype=dtype,
        )
        self.positional = sinusoidal_encoding(cfg.max_seq_len, cfg.d_model, dtype)
        self.layers = [
            EncoderLayer(cfg, Rng(derive_seed(seed, "enc", i))) for i in range(cfg.num_layers)
        ]
        self._init_head(seed, dtype)

    def forward_hidden(self, batch: Batch, training: bool = False, rng: Rng | None = None) -> Tensor:
        x = self._embed(batch)
        mask = batch.key_allow[:, None, :]  # pad positions masked out as keys
        for layer in self.layers:
            x = layer(x, mask, training, rng)
        return x

    def named_parameters(self):
        yield "embedding.table", self.embedding_table
        for i, layer in enumerate(self.layers):
            yield from layer.named_parameters(f"enc.{i}")
        yield from self._named_head_parameters()


class TransformerEncoderDecoder(_ModelBase):
    """Encoder-decoder with shared token embeddings and a vocabulary head."""

    def __init__(self, cfg: ModelConfig, seed: int):
        if cfg.architecture != "encoder-decoder":
            raise ValueError("TransformerEncoderDecoder requires architecture='encoder-decoder'")
        self.cfg = cfg
        dtype = cfg.np_dtype
        self.embedding_table = init_trunc_normal(
            (cfg.vocab_size, cfg.d_model), Rng(derive_seed(seed, "embedding")),
            std=EMBED_STD, dtype=dtype,
        )
        self.positional = sinusoidal_encoding(cfg.max_seq_len, cfg.d_model, dtype)
        self.enc_layers = [
            EncoderLayer(cfg, Rng(derive_seed(seed, "enc", i))) for i in range(cfg.num_layers)
        ]
        self.dec_layers = [
            DecoderLayer(cfg, Rng(derive_seed(seed, "dec", i))) for i in range(cfg.num_layers)
        ]
        self._init_head(seed, dtype)

    def encode(self, src: Batch, training: bool = False, rng: Rng | None = None) -> Tensor:
        x = self._embed(src)
        mask = src.key_allow[:, None, :]
        for layer in self.enc_layers:
            x = layer(x, mask, training, rng)
        return x

    def decode(
        self,
        memory: Tensor,
        src: Batch,
        tgt_in: Batch,
        training: bool = False,
        rng: Rng | None = None,
    ) -> Tensor:
        x = self._embed(tgt_in)
        self_mask = tgt_in.key_allow[:, None, :]  # causal part applied inside the block
        cross_mask = src.key_allow[:, None, :]
        for layer in self.dec_layers:
            x = layer(x, memory, self_mask, cross_mask, training, rng)
        batch, length, d = x.shape
        logits = self.project_to_vocab(reshape(x, (batch * length, d)))
        return reshape(logits, (batch, length, self.cfg.vocab_size))

    def named_parameters(self):
        yield "embedding.table", self.embedding_table
        for i, layer in enumerate(self.enc_layers):
            yield from layer.named_parameters(f"enc.{i}")
        for i, layer in enumerate(self.dec_layers):
            yield from layer.named_parameters(f"dec.{i}")
        yield from self._named_head_parameters()


def build_model(cfg: ModelConfig, seed: int):
    if cfg.architecture == "encoder":
        return TransformerEncoder(cfg, seed)
    return TransformerEncoderDecoder(cfg, seed)


def encoder_forward(model, batch: Batch, training: bool = False, rng: Rng | None = None) -> Tensor:
    """Contextual representations [batch, len, d_model] from an encoder(-decoder)."""
    if isinstance(model, TransformerEncoder):
        return model.forward_hidden(batch, training, rng)
    return model.encode(batch, training, rng)


def mlm_forward_loss(
    model: TransformerEncoder,
    batch: Batch,
    masked_positions: np.ndarray,
    original_ids: np.ndarray,
    training: bool = False,
    rng: Rng | None = None,
):
    """Cross-entropy restricted to masked positions.

    masked_positions: [n, 2] array of (row, col) indices into batch.ids;
    original_ids: [n] gold token ids at those positions.
    Returns (loss, correct_count, position_count).
    """
    masked_positions = np.asarray(masked_positions)
    if masked_positions.size == 0:
        raise ValueError("mlm_forward_loss: no masked positions")
    hidden = model.forward_hidden(batch, training, rng)
    b, length, d = hidden.shape
    flat_idx = masked_positions[:, 0] * length + masked_positions[:, 1]
    picked = take_rows(reshape(hidden, (b * length, d)), flat_idx)
    logits = model.project_to_vocab(picked)
    loss, count = cross_entropy(logits, np.asarray(original_ids), ignore_id=-1)
    correct = int((logits.data.argmax(axis=-1) == original_ids).sum())
    return loss, correct, count


def _validate_target_contract(tgt: Batch) -> None:
    if (tgt.ids[:, 0] != BOS_ID).any():
        raise ValueError("target sequences must begin with BOS")
    last = tgt.ids[np.arange(len(tgt.lengths)), tgt.lengths - 1]
    if (last != EOS_ID).any():
        raise ValueError("target sequences must end with EOS")


def seq2seq_forward_loss(
    model: TransformerEncoderDecoder,
    src: Batch,
    tgt: Batch,
    training: bool = False,
    rng: Rng | None = None,
):
    """Teacher-forced loss: predict tgt shifted left, averaged over non-PAD.

    Returns (loss, correct_count, position_count).
    """
    _validate_target_contract(tgt)
    in_ids = tgt.ids[:, :-1].copy()
    in_lengths = np.maximum(tgt.lengths - 1, 1)
    in_ids[np.arange(in_ids.shape[1])[None, :] >= in_lengths[:, None]] = PAD_ID
    tgt_in = Batch(in_ids, in_lengths)
    labels = tgt.ids[:, 1:]
    memory = model.encode(src, training, rng)
    logits = model.decode(memory, src, tgt_in, training, rng)
    b, length, vocab = logits.shape
    flat_logits = reshape(logits, (b * length, vocab))
    flat_labels = labels.reshape(-1)
    loss, count = cross_entropy(flat_logits, flat_labels, ignore_id=PAD_ID)
    preds = flat_logits.data.argmax(axis=-1)
    relevant = flat_labels != PAD_ID
    correct = int(((preds == flat_labels) & relevant).sum())
    return loss, correct, count


def greedy_decode(model: TransformerEncoderDecoder, src: Batch, max_len: int) -> list[list[int]]:
    """Iterative argmax decoding from BOS until EOS or max_len (exclusive of
    the specials); deterministic, naive full recomputation each step."""
    batch = src.ids.shape[0]
    memory = model.encode(src, training=False)
    ys = np.full((batch, 1), BOS_ID, dtype=np.int64)
    finished = np.zeros(batch, dtype=bool)
    for _ in range(max_len):
        tgt_in = Batch(ys, np.full(batch, ys.shape[1], dtype=np.int64))
        logits = model.decode(memory, src, tgt_in, training=False)
        nxt = logits.data[:, -1, :].argmax(axis=-1)
        ys = np.concatenate([ys, nxt[:, None]], axis=1)
        finished |= nxt == EOS_ID
        if finished.all():
            break
    out = []
    for row in ys[:, 1:]:
        hits = np.nonzero(row == EOS_ID)[0]
        out.append([int(v) for v in (row[: hits[0]] if hits.size else row)])
    return out


def model_parameter_count(cfg: ModelConfig) -> int:
    """Closed-form total parameter count for a model built from cfg."""
    d, v = cfg.d_model, cfg.vocab_size
    ln = 2 * d
    ff = d * cfg.d_ff + cfg.d_ff + cfg.d_ff * d + d
    attn = parameter_count(cfg.attention_config())
    enc_layer = ln + attn + ln + ff
    head = v if cfg.tie_embeddings else d * v + v
    total = v * d + cfg.num_layers * enc_layer + head
    if cfg.architecture == "encoder-decoder":
        dec_layer = 3 * ln + 2 * attn + ff
        total += cfg.num_layers * dec_layer
    return total


def _child(rng: Rng, label: str) -> Rng:
    return Rng(derive_seed(rng.seed, label))
