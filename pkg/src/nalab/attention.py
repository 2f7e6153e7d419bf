"""QKV projection variants and multi-head scaled dot-product attention.

Three interchangeable projection kinds compute queries, keys, and values:

  standard   y = W x + b                                (single linear map)
  dlp        y = W2 LayerNorm(W1 x + b1) + b2           (dual linear projection)
  neural     y = W2 ReLU(LayerNorm(W1 x + b1)) + b2     (MLP projection)

All three project at full model width; heads are formed afterwards by
splitting the output into num_heads slices of width d_k.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .rng import Rng, derive_seed
from .tensor import (
    DEFAULT_DTYPE,
    ShapeError,
    Tensor,
    add,
    add_const,
    bmm,
    dropout,
    init_trunc_normal,
    layer_norm,
    matmul,
    permute,
    relu,
    reshape,
    scale,
    softmax_rows,
    zeros,
    ones,
)

KINDS = ("standard", "dlp", "neural")

# role assignments (q, k, v) per named preset; the ablation presets keep the
# query linear and swap only keys/values
PRESETS = {
    "standard": ("standard", "standard", "standard"),
    "dlp": ("standard", "dlp", "dlp"),
    "neural": ("standard", "neural", "neural"),
    "neural-qkv": ("neural", "neural", "neural"),
}

MASK_FILL = -1e9  # additive pre-softmax penalty for forbidden positions


class MaskError(ValueError):
    """A mask row forbids every key position."""


@dataclass
class AttentionConfig:
    d_model: int
    num_heads: int
    dropout_p: float = 0.0
    causal: bool = False
    q_kind: str = "standard"
    k_kind: str = "standard"
    v_kind: str = "standard"
    expansion: int = 2
    use_bias: bool = True  # biases on the standard linear projections

    def __post_init__(self):
        if self.d_model % self.num_heads != 0:
            raise ValueError(
                f"num_heads {self.num_heads} must divide d_model {self.d_model}"
            )
        for kind in (self.q_kind, self.k_kind, self.v_kind):
            if kind not in KINDS:
                raise ValueError(f"unknown projection kind {kind!r}; expected one of {KINDS}")

    @property
    def d_k(self) -> int:
        return self.d_model // self.num_heads

    @classmethod
    def from_preset(cls, preset: str, d_model: int, num_heads: int, **kw) -> "AttentionConfig":
        if preset not in PRESETS:
            raise ValueError(f"unknown preset {preset!r}; expected one of {sorted(PRESETS)}")
        q, k, v = PRESETS[preset]
        return cls(d_model=d_model, num_heads=num_heads, q_kind=q, k_kind=k, v_kind=v, **kw)


def fan_in_std(fan_in: int) -> float:
    """Weight init scale sqrt(1/fan_in): keeps activations O(1) at desk
    widths, where a flat 0.02 leaves attention scores too cold to train."""
    return float(np.sqrt(1.0 / fan_in))


class LinearProjection:
    """y = W x (+ b); the conventional QKV map."""

    kind = "standard"

    def __init__(self, d_model: int, rng: Rng, use_bias: bool = True, dtype=None):
        dtype = dtype or DEFAULT_DTYPE
        self.W = init_trunc_normal((d_model, d_model), rng, std=fan_in_std(d_model), dtype=dtype)
        self.b = zeros((d_model,), dtype=dtype, requires_grad=True) if use_bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = matmul(x, self.W)
        return add(y, self.b) if self.b is not None else y

    def named_parameters(self, prefix: str):
        yield f"{prefix}.W", self.W
        if self.b is not None:
            yield f"{prefix}.b", self.b


class MlpProjection:
    """Two-layer map with LayerNorm after the expansion; ReLU distinguishes
    the neural kind from the purely linear dlp kind."""

    def __init__(self, d_model: int, rng: Rng, use_relu: bool, expansion: int = 2, dtype=None):
        dtype = dtype or DEFAULT_DTYPE
        h = expansion * d_model
        self.use_relu = use_relu
        self.kind = "neural" if use_relu else "dlp"
        self.W1 = init_trunc_normal((d_model, h), rng, std=fan_in_std(d_model), dtype=dtype)
        self.b1 = zeros((h,), dtype=dtype, requires_grad=True)
        self.ln_gamma = ones((h,), dtype=dtype, requires_grad=True)
        self.ln_beta = zeros((h,), dtype=dtype, requires_grad=True)
        self.W2 = init_trunc_normal((h, d_model), rng, std=fan_in_std(h), dtype=dtype)
        self.b2 = zeros((d_model,), dtype=dtype, requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        hidden = layer_norm(add(matmul(x, self.W1), self.b1), self.ln_gamma, self.ln_beta)
        if self.use_relu:
            hidden = relu(hidden)
        return add(matmul(hidden, self.W2), self.b2)

    def named_parameters(self, prefix: str):
        yield f"{prefix}.W1", self.W1
        yield f"{prefix}.b1", self.b1
        yield f"{prefix}.ln_gamma", self.ln_gamma
        yield f"{prefix}.ln_beta", self.ln_beta
        yield f"{prefix}.W2", self.W2
        yield f"{prefix}.b2", self.b2


def make_projection(kind: str, d_model: int, rng: Rng, cfg: AttentionConfig, dtype=None):
    if kind == "standard":
        return LinearProjection(d_model, rng, use_bias=cfg.use_bias, dtype=dtype)
    if kind == "dlp":
        return MlpProjection(d_model, rng, use_relu=False, expansion=cfg.expansion, dtype=dtype)
    if kind == "neural":
        return MlpProjection(d_model, rng, use_relu=True, expansion=cfg.expansion, dtype=dtype)
    raise ValueError(f"unknown projection kind {kind!r}")


def project(proj, x: Tensor) -> Tensor:
    """Apply a projection to rows of x [n, d_model] (or any [..., d_model])."""
    return proj(x)


def _validate_mask(allow: np.ndarray) -> None:
    if not allow.any(axis=-1).all():
        raise MaskError("attention mask forbids every key position for some query row")


def _mask_penalty(allow: np.ndarray, dtype) -> np.ndarray:
    return np.where(allow, dtype.type(0.0), dtype.type(MASK_FILL))


def scaled_dot_product_attention(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    mask: np.ndarray | None = None,
    dropout_p: float = 0.0,
    rng: Rng | None = None,
    training: bool = False,
) -> Tensor:
    """softmax(q kᵀ / sqrt(d_k)) v over the last two axes.

    Accepts single sequences ([n,d] x [m,d]) or stacked batches
    ([s,n,d] x [s,m,d]). `mask` is a boolean allow-matrix broadcastable to
    the score shape; forbidden positions get an additive -1e9.
    """
    single = q.data.ndim == 2
    if single:
        q, k, v = (reshape(t, (1,) + t.shape) for t in (q, k, v))
    if q.data.ndim != 3 or k.data.ndim != 3 or v.data.ndim != 3:
        raise ShapeError("attention inputs must be 2-D or stacked 3-D")
    if q.shape[2] != k.shape[2] or k.shape[1] != v.shape[1]:
        raise ShapeError(
            f"attention shape mismatch: q{q.shape} k{k.shape} v{v.shape}"
        )
    d_k = q.shape[2]
    scores = scale(bmm(q, permute(k, (0, 2, 1))), 1.0 / np.sqrt(d_k))
    if mask is not None:
        allow = np.broadcast_to(np.asarray(mask, dtype=bool), scores.shape)
        _validate_mask(allow)
        scores = add_const(scores, _mask_penalty(allow, scores.data.dtype))
    attn = softmax_rows(scores)
    if training and dropout_p > 0.0:
        attn = dropout(attn, dropout_p, rng, training=True)
    out = bmm(attn, v)
    return reshape(out, out.shape[1:]) if single else out


class MultiHeadAttention:
    """Per-role projections, head split, per-head attention, output merge."""

    def __init__(self, cfg: AttentionConfig, rng: Rng, dtype=None):
        dtype = dtype or DEFAULT_DTYPE
        self.cfg = cfg
        d = cfg.d_model
        self.q_proj = make_projection(cfg.q_kind, d, _child(rng, "q"), cfg, dtype)
        self.k_proj = make_projection(cfg.k_kind, d, _child(rng, "k"), cfg, dtype)
        self.v_proj = make_projection(cfg.v_kind, d, _child(rng, "v"), cfg, dtype)
        self.W_o = init_trunc_normal((d, d), _child(rng, "o"), std=fan_in_std(d), dtype=dtype)
        self.b_o = zeros((d,), dtype=dtype, requires_grad=True)

    def __call__(
        self,
        x_q: Tensor,
        x_kv: Tensor,
        mask: np.ndarray | None = None,
        training: bool = False,
        rng: Rng | None = None,
    ) -> Tensor:
        cfg = self.cfg
        single = x_q.data.ndim == 2
        if single:
            x_q = reshape(x_q, (1,) + x_q.shape)
            x_kv = reshape(x_kv, (1,) + x_kv.shape)
        batch, n, d = x_q.shape
        m = x_kv.shape[1]
        heads, d_k = cfg.num_heads, cfg.d_k

        q = self.q_proj(reshape(x_q, (batch * n, d)))
        k = self.k_proj(reshape(x_kv, (batch * m, d)))
        v = self.v_proj(reshape(x_kv, (batch * m, d)))

        def split(t, length):
            t = reshape(t, (batch, length, heads, d_k))
            return reshape(permute(t, (0, 2, 1, 3)), (batch * heads, length, d_k))

        allow = self._combined_mask(batch, n, m, mask)
        ctx = scaled_dot_product_attention(
            split(q, n), split(k, m), split(v, m),
            mask=allow, dropout_p=cfg.dropout_p, rng=rng, training=training,
        )
        ctx = reshape(permute(reshape(ctx, (batch, heads, n, d_k)), (0, 2, 1, 3)), (batch * n, d))
        out = add(matmul(ctx, self.W_o), self.b_o)
        out = reshape(out, (batch, n, d))
        return reshape(out, (n, d)) if single else out

    def _combined_mask(self, batch: int, n: int, m: int, mask: np.ndarray | None):
        allow = None
        if mask is not None:
            allow = np.asarray(mask, dtype=bool)
            if allow.ndim == 2:
                allow = np.broadcast_to(allow, (batch, n, m))
        if self.cfg.causal:
            causal = np.tril(np.ones((n, m), dtype=bool))
            allow = np.broadcast_to(causal, (batch, n, m)) if allow is None else allow & causal
        if allow is None:
            return None
        # replicate per head: [batch, n, m] -> [batch*heads, n, m]
        allow = np.broadcast_to(allow[:, None], (batch, self.cfg.num_heads, n, m))
        return allow.reshape(batch * self.cfg.num_heads, n, m)

    def named_parameters(self, prefix: str):
        yield from self.q_proj.named_parameters(f"{prefix}.q")
        yield from self.k_proj.named_parameters(f"{prefix}.k")
        yield from self.v_proj.named_parameters(f"{prefix}.v")
        yield f"{prefix}.W_o", self.W_o
        yield f"{prefix}.b_o", self.b_o


def multi_head_forward(mha: MultiHeadAttention, x_q, x_kv, mask=None, training=False, rng=None):
    return mha(x_q, x_kv, mask=mask, training=training, rng=rng)


def _role_param_count(kind: str, d: int, expansion: int, use_bias: bool) -> int:
    if kind == "standard":
        return d * d + (d if use_bias else 0)
    h = expansion * d
    return d * h + h + 2 * h + h * d + d


def parameter_count(cfg: AttentionConfig) -> int:
    """Exact scalar parameter count of a MultiHeadAttention built from cfg."""
    total = sum(
        _role_param_count(kind, cfg.d_model, cfg.expansion, cfg.use_bias)
        for kind in (cfg.q_kind, cfg.k_kind, cfg.v_kind)
    )
    return total + cfg.d_model * cfg.d_model + cfg.d_model  # output projection


def _child(rng: Rng, label: str) -> Rng:
    return Rng(derive_seed(rng.seed, label))
