"""Mini BERT-style encoder: embeddings, post-norm layers, pooler, pooling variants."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import NamedTuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import Batch
from .errors import ConfigError, DataError

MASK_BIAS = -1e9


@dataclass(frozen=True)
class EncoderConfig:
    n_layers: int = 4
    d: int = 64
    n_heads: int = 4
    d_ffn: int = 256
    vocab_size: int = 2048
    max_seq_len: int = 32
    dropout_p: float = 0.1
    init_std: float = 0.02
    ln_eps: float = 1e-12

    def __post_init__(self):
        if self.n_layers < 1 or self.d < 1 or self.d_ffn < 1:
            raise ConfigError("n_layers, d and d_ffn must be positive")
        if self.n_heads < 1 or self.d % self.n_heads:
            raise ConfigError(f"n_heads={self.n_heads} must divide d={self.d}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigError(f"dropout_p must be in [0, 1), got {self.dropout_p}")
        if self.vocab_size < 5 or self.max_seq_len < 3:
            raise ConfigError("vocab_size must be >= 5 and max_seq_len >= 3")

    @property
    def d_head(self) -> int:
        return self.d // self.n_heads

    def to_dict(self) -> dict:
        return asdict(self)


_LAYER_SHAPES = {
    "q.w": ("d", "d"), "q.b": ("d",),
    "k.w": ("d", "d"), "k.b": ("d",),
    "v.w": ("d", "d"), "v.b": ("d",),
    "o.w": ("d", "d"), "o.b": ("d",),
    "ffn_in.w": ("d", "d_ffn"), "ffn_in.b": ("d_ffn",),
    "ffn_out.w": ("d_ffn", "d"), "ffn_out.b": ("d",),
    "ln1.g": ("d",), "ln1.b": ("d",),
    "ln2.g": ("d",), "ln2.b": ("d",),
}


def param_shapes(cfg: EncoderConfig) -> dict[str, tuple[int, ...]]:
    dims = {"d": cfg.d, "d_ffn": cfg.d_ffn}
    shapes = {"tok_emb": (cfg.vocab_size, cfg.d), "pos_emb": (cfg.max_seq_len, cfg.d)}
    for i in range(1, cfg.n_layers + 1):
        for name, dims_ in _LAYER_SHAPES.items():
            shapes[f"layers.{i}.{name}"] = tuple(dims[x] for x in dims_)
    shapes["pooler.w"] = (cfg.d, cfg.d)
    shapes["pooler.b"] = (cfg.d,)
    return shapes


class Layer(NamedTuple):
    """Handles to one encoder layer's parameters."""

    q_w: Tensor
    q_b: Tensor
    k_w: Tensor
    k_b: Tensor
    v_w: Tensor
    v_b: Tensor
    o_w: Tensor
    o_b: Tensor
    ffn_in_w: Tensor
    ffn_in_b: Tensor
    ffn_out_w: Tensor
    ffn_out_b: Tensor
    ln1_g: Tensor
    ln1_b: Tensor
    ln2_g: Tensor
    ln2_b: Tensor


@dataclass
class EncoderWeights:
    config: EncoderConfig
    params: dict[str, Tensor] = field(repr=False)

    def __post_init__(self):
        expected = param_shapes(self.config)
        if set(expected) != set(self.params):
            raise ConfigError("parameter names do not match the config")
        for name, shape in expected.items():
            if self.params[name].shape != shape:
                raise ConfigError(f"{name}: expected shape {shape}, got {self.params[name].shape}")

    def layer(self, i: int) -> Layer:
        p = self.params
        return Layer(*(p[f"layers.{i}.{name}"] for name in _LAYER_SHAPES))

    def copy(self) -> "EncoderWeights":
        return EncoderWeights(
            self.config, {k: Tensor(v.data.copy(), requires_grad=True) for k, v in self.params.items()}
        )

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}


def _truncated_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


def init_weights(cfg: EncoderConfig, seed: int) -> EncoderWeights:
    """Truncated-normal matrices, unit layer-norm gains, zero biases."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith(".g"):
            arr = np.ones(shape)
        elif name.endswith(".b"):
            arr = np.zeros(shape)
        else:
            arr = _truncated_normal(rng, shape, cfg.init_std)
        params[name] = Tensor(arr, requires_grad=True)
    return EncoderWeights(cfg, params)


# ---------------------------------------------------------------- layers

class Attention(NamedTuple):
    sa: Tensor  # [B, h, n, n] attention probabilities (before dropout)
    ct: Tensor  # [B, n, d] output-projected context tensor
    values: Tensor  # [B, h, n, d_head] value projections, reused by the cross branch
    sa_used: Tensor  # probabilities after attention dropout


def split_heads(x: Tensor, n_heads: int) -> Tensor:
    b, n, d = x.shape
    return ad.transpose(ad.reshape(x, (b, n, n_heads, d // n_heads)), (0, 2, 1, 3))


def merge_heads(x: Tensor) -> Tensor:
    b, h, n, dh = x.shape
    return ad.reshape(ad.transpose(x, (0, 2, 1, 3)), (b, n, h * dh))


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return ad.add_bias(ad.matmul(x, w), b)


def mask_bias(mask: np.ndarray) -> np.ndarray:
    """[B, n] {0,1} mask -> [B, 1, 1, n] additive bias on pad keys."""
    return ((1.0 - mask) * MASK_BIAS)[:, None, None, :]


def project_context(context: Tensor, layer: Layer) -> Tensor:
    return linear(merge_heads(context), layer.o_w, layer.o_b)


def self_attention(
    layer: Layer, hd_prev: Tensor, mask: np.ndarray, n_heads: int, rng=None, p: float = 0.0
) -> Attention:
    q = split_heads(linear(hd_prev, layer.q_w, layer.q_b), n_heads)
    k = split_heads(linear(hd_prev, layer.k_w, layer.k_b), n_heads)
    v = split_heads(linear(hd_prev, layer.v_w, layer.v_b), n_heads)
    scores = ad.scale(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(q.shape[-1]))
    sa = ad.softmax_rows(ad.add_const(scores, mask_bias(mask)))
    sa_used = ad.dropout(sa, p, rng)
    ct = project_context(ad.matmul(sa_used, v), layer)
    return Attention(sa, ct, v, sa_used)


def post_attention(layer: Layer, hd_prev: Tensor, ct: Tensor, eps: float, rng=None, p: float = 0.0) -> Tensor:
    """Residual + LN1, GELU FFN, residual + LN2 (post-norm order)."""
    x = ad.layer_norm(ad.add(hd_prev, ad.dropout(ct, p, rng)), layer.ln1_g, layer.ln1_b, eps)
    ffn = linear(ad.gelu(linear(x, layer.ffn_in_w, layer.ffn_in_b)), layer.ffn_out_w, layer.ffn_out_b)
    return ad.layer_norm(ad.add(x, ad.dropout(ffn, p, rng)), layer.ln2_g, layer.ln2_b, eps)


def encoder_layer(
    layer: Layer, hd_prev: Tensor, mask: np.ndarray, cfg: EncoderConfig, rng=None
) -> tuple[Tensor, Attention]:
    p = cfg.dropout_p if rng is not None else 0.0
    att = self_attention(layer, hd_prev, mask, cfg.n_heads, rng, p)
    return post_attention(layer, hd_prev, att.ct, cfg.ln_eps, rng, p), att


# ---------------------------------------------------------------- forward

@dataclass
class EmbeddingOutputs:
    last_hidden: Tensor  # [B, n, d]
    cls_pool: Tensor  # [B, d]
    pooler_out: Tensor  # [B, d]
    hidden_states: list[Tensor]  # index 0 is the embedding output, i is layer i
    attentions: list[Attention]  # index i-1 is layer i


def dropout_rng(seed: int, stream: int, dropout_on: bool):
    return np.random.default_rng([seed, stream]) if dropout_on else None


def forward(
    weights: EncoderWeights, batch: Batch, seed: int = 0, dropout_on: bool = False, stream: int = 0
) -> EmbeddingOutputs:
    """Full encoder pass. Dropout masks come from the (seed, stream) generator."""
    cfg = weights.config
    ids = batch.token_ids
    if ids.min() < 0 or ids.max() >= cfg.vocab_size:
        raise DataError(f"token id out of range [0, {cfg.vocab_size})")
    if batch.seq_len > cfg.max_seq_len:
        raise DataError(f"sequence length {batch.seq_len} exceeds max_seq_len {cfg.max_seq_len}")
    rng = dropout_rng(seed, stream, dropout_on)
    p = cfg.dropout_p if rng is not None else 0.0
    positions = np.broadcast_to(np.arange(batch.seq_len), ids.shape)
    tok = ad.embedding(weights.params["tok_emb"], ids)
    hd = ad.dropout(ad.add(tok, ad.embedding(weights.params["pos_emb"], positions)), p, rng)
    hidden, attentions = [hd], []
    for i in range(1, cfg.n_layers + 1):
        hd, att = encoder_layer(weights.layer(i), hd, batch.attention_mask, cfg, rng)
        hidden.append(hd)
        attentions.append(att)
    cls = ad.getitem(hd, (slice(None), 0))
    pooled = ad.tanh(linear(cls, weights.params["pooler.w"], weights.params["pooler.b"]))
    return EmbeddingOutputs(hd, cls, pooled, hidden, attentions)


# ---------------------------------------------------------------- pooling

def masked_mean(h: Tensor, mask: np.ndarray) -> Tensor:
    weights = mask / mask.sum(axis=1, keepdims=True)
    return ad.sum(ad.mul_const(h, weights[:, :, None]), axis=1)


def pooling_variants(outputs: EmbeddingOutputs, batch: Batch) -> dict[str, Tensor]:
    mask = batch.attention_mask
    first = masked_mean(outputs.hidden_states[1], mask)
    last = masked_mean(outputs.last_hidden, mask)
    return {
        "cls": outputs.cls_pool,
        "avg": last,
        "avg_first_last": ad.scale(ad.add(first, last), 0.5),
        "pooler": outputs.pooler_out,
    }
