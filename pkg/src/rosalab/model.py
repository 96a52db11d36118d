"""Decoder-only Pre-LN transformer with rotary position embeddings.

Attention runs head by head: per-head Q/K/V are cut out of the flat
projections with last-dim slices, which keeps the engine's primitive set
minimal (no axis permutation needed). Grouped-query configs reuse each K/V
head across h_q/h_k query heads.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from typing import Iterator, Optional

import numpy as np

from . import tensor as T
from .errors import ConfigError, InputError
from .tensor import Tensor

MASK_FILL = -1e30  # finite stand-in for -inf; underflows to exactly 0 in softmax


@dataclass(frozen=True)
class ModelConfig:
    d: int
    n_layers: int
    h_q: int
    h_k: int
    d_h: int
    vocab: int
    max_seq: int
    rope_base: float = 10000.0
    ffn_mult: int = 4

    def __post_init__(self):
        for name in ("d", "n_layers", "h_q", "h_k", "d_h", "vocab", "max_seq", "ffn_mult"):
            if getattr(self, name) < 1:
                raise ConfigError(f"ModelConfig.{name} must be >= 1")
        if self.d_h % 2 != 0:
            raise ConfigError(f"d_h must be even for rotary pairs, got {self.d_h}")
        if self.h_q % self.h_k != 0:
            raise ConfigError(f"h_q ({self.h_q}) must be a multiple of h_k ({self.h_k})")
        if self.d != self.h_q * self.d_h:
            raise ConfigError(f"d ({self.d}) must equal h_q*d_h ({self.h_q * self.d_h})")


# -- rotary position embedding -------------------------------------------------


def rope_rotate(z: np.ndarray, t: int, rope_base: float) -> np.ndarray:
    """Rotate one head vector to position t.

    Half-split layout: pair i is (z[i], z[i + d_h/2]) with angle
    t * rope_base^(-2i/d_h), so the slowest-rotating pairs sit at the highest
    indices within each half.
    """
    z = np.asarray(z)
    d_h = z.shape[-1]
    if d_h % 2 != 0:
        raise ConfigError(f"rope_rotate: head dim must be even, got {d_h}")
    half = d_h // 2
    idx = np.arange(half, dtype=z.dtype if z.dtype.kind == "f" else np.float64)
    theta = t * np.power(rope_base, -2.0 * idx / d_h)
    cos, sin = np.cos(theta), np.sin(theta)
    re, im = z[..., :half], z[..., half:]
    return np.concatenate([re * cos - im * sin, re * sin + im * cos], axis=-1)


@lru_cache(maxsize=32)
def _rope_tables(seq_len: int, d_h: int, rope_base: float, dtype_name: str):
    half = d_h // 2
    idx = np.arange(half, dtype=np.float64)
    freqs = np.power(rope_base, -2.0 * idx / d_h)
    theta = np.arange(seq_len, dtype=np.float64)[:, None] * freqs[None, :]
    dt = np.dtype(dtype_name)
    return (
        np.cos(theta).astype(dt),
        np.sin(theta).astype(dt),
        (-np.sin(theta)).astype(dt),
    )


def apply_rope(x: Tensor, rope_base: float) -> Tensor:
    """Position-wise rotation of [..., l, d_h] head states (positions 0..l-1)."""
    l, d_h = x.shape[-2], x.shape[-1]
    half = d_h // 2
    cos, sin, neg_sin = _rope_tables(l, d_h, float(rope_base), x.dtype.name)
    cos_t = Tensor(cos, dtype=x.dtype.type)
    sin_t = Tensor(sin, dtype=x.dtype.type)
    neg_sin_t = Tensor(neg_sin, dtype=x.dtype.type)
    re = T.slice_last_dim(x, 0, half)
    im = T.slice_last_dim(x, half, d_h)
    return T.concat_last_dim([
        T.add(T.mul(re, cos_t), T.mul(im, neg_sin_t)),
        T.add(T.mul(re, sin_t), T.mul(im, cos_t)),
    ])


@lru_cache(maxsize=32)
def _causal_mask(seq_len: int) -> np.ndarray:
    return np.triu(np.ones((seq_len, seq_len), dtype=bool), k=1)


# -- layers ---------------------------------------------------------------------


class DecoderLayer:
    """One Pre-LN block: gains, attention projections, FFN pair, optional adapter."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        d, m = cfg.d, cfg.ffn_mult * cfg.d

        def w(shape):
            t = Tensor(rng.normal(0.0, 0.02, size=shape), requires_grad=True)
            t.trainable = True
            return t

        self.attn_gain = Tensor(np.ones(d), requires_grad=True)
        self.ffn_gain = Tensor(np.ones(d), requires_grad=True)
        self.attn_gain.trainable = True
        self.ffn_gain.trainable = True
        self.w_q = w((d, cfg.h_q * cfg.d_h))
        self.w_k = w((d, cfg.h_k * cfg.d_h))
        self.w_v = w((d, cfg.h_k * cfg.d_h))
        self.w_o = w((cfg.h_q * cfg.d_h, d))
        self.w_ffn1 = w((d, m))
        self.w_ffn2 = w((m, d))
        self.adapter = None

    def base_parameters(self) -> list[tuple[str, Tensor]]:
        return [
            ("attn_gain", self.attn_gain),
            ("ffn_gain", self.ffn_gain),
            ("w_q", self.w_q),
            ("w_k", self.w_k),
            ("w_v", self.w_v),
            ("w_o", self.w_o),
            ("w_ffn1", self.w_ffn1),
            ("w_ffn2", self.w_ffn2),
        ]

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        params = self.base_parameters()
        if self.adapter is not None:
            params += [(f"{self.adapter.prefix}.{n}", p) for n, p in self.adapter.named_parameters()]
        return params


@dataclass
class StateCapture:
    """Request to record Q or K head states during a forward pass."""

    which: str = "q"  # "q" | "k"
    stage: str = "pre_rope"  # "pre_rope" | "post_rope"
    states: list = field(default_factory=list)  # one [h, b, l, d_h] array per layer

    def grab(self, heads: list[Tensor]) -> None:
        self.states.append(np.stack([h.numpy() for h in heads]))


def attention_forward(
    hidden: Tensor,
    layer: DecoderLayer,
    cfg: ModelConfig,
    raw_hidden: Optional[Tensor] = None,
    capture: Optional[StateCapture] = None,
) -> Tensor:
    """Causal multi-head attention over normalized hidden states [b, l, d].

    When a low-frequency adapter is attached, its modulation runs on the
    per-head Q/K states (before rotation by default); a LoRA baseline adapter
    instead adds its low-rank delta to the flat Q/K projections.
    """
    b, l, _ = hidden.shape
    if l > cfg.max_seq:
        raise ConfigError(f"sequence length {l} exceeds max_seq {cfg.max_seq}")
    d_h, group = cfg.d_h, cfg.h_q // cfg.h_k

    q_flat = T.matmul(hidden, layer.w_q)
    k_flat = T.matmul(hidden, layer.w_k)
    v_flat = T.matmul(hidden, layer.w_v)

    adapter = layer.adapter
    if adapter is not None and adapter.prefix == "lora":
        q_flat = T.add(q_flat, adapter.delta_q(hidden))
        k_flat = T.add(k_flat, adapter.delta_k(hidden))

    q_heads = [T.slice_last_dim(q_flat, j * d_h, (j + 1) * d_h) for j in range(cfg.h_q)]
    k_heads = [T.slice_last_dim(k_flat, i * d_h, (i + 1) * d_h) for i in range(cfg.h_k)]
    v_heads = [T.slice_last_dim(v_flat, i * d_h, (i + 1) * d_h) for i in range(cfg.h_k)]

    roae = adapter if adapter is not None and adapter.prefix == "roae" else None
    if roae is not None and roae.cfg.stage == "pre_rope":
        signal_input = raw_hidden if roae.cfg.signal_source == "residual" and raw_hidden is not None else hidden
        q_heads, k_heads = roae.modulate_heads(q_heads, k_heads, signal_input)

    if capture is not None and capture.stage == "pre_rope":
        capture.grab(q_heads if capture.which == "q" else k_heads)

    q_heads = [apply_rope(q, cfg.rope_base) for q in q_heads]
    k_heads = [apply_rope(k, cfg.rope_base) for k in k_heads]

    if roae is not None and roae.cfg.stage == "post_rope":
        signal_input = raw_hidden if roae.cfg.signal_source == "residual" and raw_hidden is not None else hidden
        q_heads, k_heads = roae.modulate_heads(q_heads, k_heads, signal_input)

    if capture is not None and capture.stage == "post_rope":
        capture.grab(q_heads if capture.which == "q" else k_heads)

    mask = _causal_mask(l)
    inv_scale = 1.0 / np.sqrt(d_h)
    outs = []
    for j in range(cfg.h_q):
        kv = j // group
        scores = T.scale(T.matmul(q_heads[j], T.transpose_last_two(k_heads[kv])), inv_scale)
        attn = T.softmax_last_dim(T.masked_fill(scores, mask, MASK_FILL))
        outs.append(T.matmul(attn, v_heads[kv]))
    return T.matmul(T.concat_last_dim(outs), layer.w_o)


def decoder_block_forward(
    hidden: Tensor,
    layer: DecoderLayer,
    cfg: ModelConfig,
    capture: Optional[StateCapture] = None,
) -> Tensor:
    normed = T.rms_normalize(hidden, layer.attn_gain)
    h1 = T.add(hidden, attention_forward(normed, layer, cfg, raw_hidden=hidden, capture=capture))
    normed2 = T.rms_normalize(h1, layer.ffn_gain)
    ffn = T.matmul(T.silu(T.matmul(normed2, layer.w_ffn1)), layer.w_ffn2)
    return T.add(h1, ffn)


class TransformerLM:
    """Embedding -> n_layers decoder blocks -> final norm -> output projection."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.embed = Tensor(rng.normal(0.0, 0.02, size=(cfg.vocab, cfg.d)), requires_grad=True)
        self.embed.trainable = True
        self.layers = [DecoderLayer(cfg, rng) for _ in range(cfg.n_layers)]
        self.final_gain = Tensor(np.ones(cfg.d), requires_grad=True)
        self.final_gain.trainable = True
        self.out_proj = Tensor(rng.normal(0.0, 0.02, size=(cfg.d, cfg.vocab)), requires_grad=True)
        self.out_proj.trainable = True

    def lm_forward(self, tokens: np.ndarray, capture: Optional[StateCapture] = None) -> Tensor:
        tokens = np.asarray(tokens)
        if tokens.ndim != 2:
            raise InputError(f"tokens must be [batch, seq], got shape {tokens.shape}")
        if tokens.size and (tokens.min() < 0 or tokens.max() >= self.cfg.vocab):
            raise InputError(f"token id out of range [0, {self.cfg.vocab})")
        h = T.embedding_lookup(self.embed, tokens)
        for layer in self.layers:
            h = decoder_block_forward(h, layer, self.cfg, capture=capture)
        h = T.rms_normalize(h, self.final_gain)
        return T.matmul(h, self.out_proj)

    __call__ = lm_forward

    # -- parameter bookkeeping -------------------------------------------------

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        yield "embed", self.embed
        for i, layer in enumerate(self.layers):
            for name, p in layer.named_parameters():
                yield f"layers.{i}.{name}", p
        yield "final_gain", self.final_gain
        yield "out_proj", self.out_proj

    def layer_trainable_parameters(self, i: int) -> list[Tensor]:
        return [p for _, p in self.layers[i].named_parameters() if p.trainable]

    def zero_grad(self) -> None:
        for _, p in self.named_parameters():
            p.grad = None

    def freeze_base(self) -> None:
        """Freeze every base weight; norm gains keep their gradients for layer
        scoring but stop being trainable."""
        for _, p in self.named_parameters():
            p.trainable = False
            if p.ndim >= 2:  # matrices drop grad computation entirely
                p.requires_grad = False

    def gain_gradients(self, i: int) -> tuple[np.ndarray | None, np.ndarray | None]:
        layer = self.layers[i]
        return (
            None if layer.attn_gain.grad is None else layer.attn_gain.grad,
            None if layer.ffn_gain.grad is None else layer.ffn_gain.grad,
        )


def count_parameters(model: TransformerLM, trainable_only: bool = False) -> int:
    return sum(
        p.numpy().size
        for _, p in model.named_parameters()
        if not trainable_only or p.trainable
    )
