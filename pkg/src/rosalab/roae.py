"""Low-frequency Q/K adapter: extraction, signal generation, GQA alignment,
multiplicative modulation, and reinsertion.

The adapter targets the slowest-rotating dimensions of each attention head,
the last `(d_h*r_low)/2` indices within each rotary half. Its context-aware
signal comes from a zero-initialized low-rank projection, so a freshly
attached adapter reproduces the base model bitwise.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError
from .model import ModelConfig, TransformerLM
from .tensor import Tensor


@dataclass(frozen=True)
class RoAEConfig:
    r_low: float = 0.25
    alpha: float = 0.1
    rank: int = 128
    share_qk: bool = True
    stage: str = "pre_rope"  # "pre_rope" | "post_rope"
    signal_source: str = "normed"  # "normed" | "residual"

    def __post_init__(self):
        if not (0.0 < self.r_low < 1.0):
            raise ConfigError(f"r_low must lie in (0, 1), got {self.r_low}")
        if self.alpha <= 0.0:
            raise ConfigError(f"alpha must be positive, got {self.alpha}")
        if self.rank < 1:
            raise ConfigError(f"rank must be >= 1, got {self.rank}")
        if self.stage not in ("pre_rope", "post_rope"):
            raise ConfigError(f"stage must be pre_rope or post_rope, got {self.stage!r}")
        if self.signal_source not in ("normed", "residual"):
            raise ConfigError(f"signal_source must be normed or residual, got {self.signal_source!r}")


def low_freq_width(d_h: int, r_low: float) -> int:
    """Per-half slice width (d_h*r_low)/2; rejects fractional widths rather
    than silently rounding, since rounding would change the parameter budget."""
    w = d_h * r_low / 2.0
    if w != int(w) or int(w) < 1:
        raise ConfigError(
            f"(d_h * r_low) / 2 must be a positive integer; got {w} from d_h={d_h}, r_low={r_low}"
        )
    return int(w)


@dataclass(frozen=True)
class LowFreqIndexMap:
    """Which last-dim indices of a head the adapter touches."""

    d_h: int
    width: int

    @property
    def indices(self) -> tuple[int, ...]:
        half = self.d_h // 2
        first = range(half - self.width, half)
        second = range(self.d_h - self.width, self.d_h)
        return tuple(first) + tuple(second)


def extract_low_freq(head_states: Tensor, r_low: float) -> tuple[Tensor, LowFreqIndexMap]:
    """Take the last (d_h*r_low)/2 indices of each rotary half and concatenate.

    Works on any leading layout ([b, h, l, d_h] or per-head [b, l, d_h]);
    only the last dim matters.
    """
    d_h = head_states.shape[-1]
    w = low_freq_width(d_h, r_low)
    half = d_h // 2
    z = T.concat_last_dim([
        T.slice_last_dim(head_states, half - w, half),
        T.slice_last_dim(head_states, d_h - w, d_h),
    ])
    return z, LowFreqIndexMap(d_h=d_h, width=w)


def reinsert(full_states: Tensor, z_star: Tensor, index_map: LowFreqIndexMap) -> Tensor:
    """Write modulated low-frequency values back; every other index is untouched."""
    d_h, w = index_map.d_h, index_map.width
    half = d_h // 2
    if z_star.shape[-1] != 2 * w or full_states.shape[-1] != d_h:
        raise ContractError(
            f"reinsert: got z_star width {z_star.shape[-1]} and states width "
            f"{full_states.shape[-1]}, expected {2 * w} and {d_h}"
        )
    return T.concat_last_dim([
        T.slice_last_dim(full_states, 0, half - w),
        T.slice_last_dim(z_star, 0, w),
        T.slice_last_dim(full_states, half, d_h - w),
        T.slice_last_dim(z_star, w, 2 * w),
    ])


def modulate(z: Tensor, s: Tensor, alpha: float) -> Tensor:
    """z + z * (alpha * s), elementwise."""
    if z.shape != s.shape:
        raise ContractError(f"modulate: shapes {z.shape} and {s.shape} must match")
    return T.add(z, T.mul(z, T.scale(s, alpha)))


class RoAEAdapter:
    """Per-layer trainable state: low-rank factors of the signal projection
    plus the optional query-to-key alignment matrix for grouped-query models."""

    prefix = "roae"

    def __init__(self, model_cfg: ModelConfig, cfg: RoAEConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.h_q, self.h_k, self.d = model_cfg.h_q, model_cfg.h_k, model_cfg.d
        self.d_low = 2 * low_freq_width(model_cfg.d_h, cfg.r_low)

        def trainable(arr):
            t = Tensor(arr, requires_grad=True)
            t.trainable = True
            return t

        bound = 1.0 / np.sqrt(model_cfg.d)
        self.a = trainable(rng.uniform(-bound, bound, size=(cfg.rank, model_cfg.d)))
        self.b = trainable(np.zeros((self.h_q * self.d_low, cfg.rank)))
        self.w_gqa = None
        self.a_k = None
        self.b_k = None
        if cfg.share_qk:
            if self.h_q != self.h_k:
                gb = 1.0 / np.sqrt(self.h_q * self.d_low)
                self.w_gqa = trainable(
                    rng.uniform(-gb, gb, size=(self.h_q * self.d_low, self.h_k * self.d_low))
                )
        else:
            self.a_k = trainable(rng.uniform(-bound, bound, size=(cfg.rank, model_cfg.d)))
            self.b_k = trainable(np.zeros((self.h_k * self.d_low, cfg.rank)))

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        params = [("a", self.a), ("b", self.b)]
        if self.w_gqa is not None:
            params.append(("w_gqa", self.w_gqa))
        if self.a_k is not None:
            params += [("a_k", self.a_k), ("b_k", self.b_k)]
        return params

    def modulate_heads(
        self, q_heads: list[Tensor], k_heads: list[Tensor], signal_input: Tensor
    ) -> tuple[list[Tensor], list[Tensor]]:
        """Apply extract -> signal -> modulate -> reinsert to every Q/K head."""
        s_q = generate_signal(signal_input, self)
        if self.cfg.share_qk:
            s_k = align_gqa(s_q, self)
        else:
            s_k = T.silu(T.matmul(T.matmul(signal_input, T.transpose_last_two(self.a_k)),
                                  T.transpose_last_two(self.b_k)))
        alpha, w = self.cfg.alpha, self.d_low
        q_out, k_out = [], []
        for j, q in enumerate(q_heads):
            z, imap = extract_low_freq(q, self.cfg.r_low)
            s = T.slice_last_dim(s_q, j * w, (j + 1) * w)
            q_out.append(reinsert(q, modulate(z, s, alpha), imap))
        for i, k in enumerate(k_heads):
            z, imap = extract_low_freq(k, self.cfg.r_low)
            s = T.slice_last_dim(s_k, i * w, (i + 1) * w)
            k_out.append(reinsert(k, modulate(z, s, alpha), imap))
        return q_out, k_out


def generate_signal(hidden: Tensor, adapter: RoAEAdapter) -> Tensor:
    """silu(hidden @ A^T @ B^T), shape [b, l, h_q*d_low].

    Applying A^T first keeps the cost at O(d*rank) per position. With B at its
    zero initialization the signal is exactly zero everywhere.
    """
    if hidden.shape[-1] != adapter.d:
        raise ConfigError(
            f"generate_signal: hidden width {hidden.shape[-1]} != model width {adapter.d}"
        )
    low = T.matmul(hidden, T.transpose_last_two(adapter.a))
    return T.silu(T.matmul(low, T.transpose_last_two(adapter.b)))


def align_gqa(s_q: Tensor, adapter: RoAEAdapter) -> Tensor:
    """Map the flat query signal [b, l, h_q*d_low] onto key heads.

    Identity when h_q == h_k; otherwise a single learned projection down to
    [b, l, h_k*d_low].
    """
    if adapter.h_q == adapter.h_k:
        return s_q
    if adapter.w_gqa is None:
        raise ConfigError(
            f"align_gqa: grouped-query config (h_q={adapter.h_q}, h_k={adapter.h_k}) "
            "needs the alignment matrix"
        )
    return T.matmul(s_q, adapter.w_gqa)


def roae_param_count(model_cfg: ModelConfig, cfg: RoAEConfig) -> int:
    """Closed-form trainable-parameter count for adapters on every layer."""
    d_low = 2 * low_freq_width(model_cfg.d_h, cfg.r_low)
    per_layer = cfg.rank * model_cfg.d + cfg.rank * model_cfg.h_q * d_low
    if cfg.share_qk:
        if model_cfg.h_q != model_cfg.h_k:
            per_layer += (model_cfg.h_q * d_low) * (model_cfg.h_k * d_low)
    else:
        per_layer += cfg.rank * model_cfg.d + cfg.rank * model_cfg.h_k * d_low
    return per_layer * model_cfg.n_layers


def attach_roae(model: TransformerLM, cfg: RoAEConfig, rng: np.random.Generator) -> TransformerLM:
    """Attach a fresh adapter to every layer. Exclusive with other adapters."""
    low_freq_width(model.cfg.d_h, cfg.r_low)  # validate before touching the model
    for i, layer in enumerate(model.layers):
        if layer.adapter is not None:
            raise ConfigError(f"layer {i} already has a {layer.adapter.prefix} adapter")
        layer.adapter = RoAEAdapter(model.cfg, cfg, rng)
    return model


# -- LoRA-on-Q/K ablation baseline ----------------------------------------------


class LoraQKAdapter:
    """Additive low-rank deltas on the Q and K projections (zero-initialized)."""

    prefix = "lora"

    def __init__(self, model_cfg: ModelConfig, rank: int, rng: np.random.Generator):
        if rank < 1:
            raise ConfigError(f"lora rank must be >= 1, got {rank}")
        self.rank = rank

        def trainable(arr):
            t = Tensor(arr, requires_grad=True)
            t.trainable = True
            return t

        bound = 1.0 / np.sqrt(model_cfg.d)
        self.a_q = trainable(rng.uniform(-bound, bound, size=(model_cfg.d, rank)))
        self.b_q = trainable(np.zeros((rank, model_cfg.h_q * model_cfg.d_h)))
        self.a_k = trainable(rng.uniform(-bound, bound, size=(model_cfg.d, rank)))
        self.b_k = trainable(np.zeros((rank, model_cfg.h_k * model_cfg.d_h)))

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return [("a_q", self.a_q), ("b_q", self.b_q), ("a_k", self.a_k), ("b_k", self.b_k)]

    def delta_q(self, hidden: Tensor) -> Tensor:
        return T.matmul(T.matmul(hidden, self.a_q), self.b_q)

    def delta_k(self, hidden: Tensor) -> Tensor:
        return T.matmul(T.matmul(hidden, self.a_k), self.b_k)


def lora_param_count(model_cfg: ModelConfig, rank: int) -> int:
    per_layer = rank * (model_cfg.d + model_cfg.h_q * model_cfg.d_h) + rank * (
        model_cfg.d + model_cfg.h_k * model_cfg.d_h
    )
    return per_layer * model_cfg.n_layers


def lora_baseline_attach(model: TransformerLM, rank: int, rng: np.random.Generator) -> TransformerLM:
    for i, layer in enumerate(model.layers):
        if layer.adapter is not None:
            raise ConfigError(f"layer {i} already has a {layer.adapter.prefix} adapter")
        layer.adapter = LoraQKAdapter(model.cfg, rank, rng)
    return model
