"""Dynamic layer selection: gradient-norm scores on the normalization gains,
periodic exploit/explore selection, and gradient masking for inactive layers.

The gains themselves stay frozen during fine-tuning; the engine still computes
their gradients, which is all the scoring needs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ScoringError
from .model import TransformerLM


@dataclass(frozen=True)
class DLSConfig:
    k_ratio: float = 0.5
    p_exploit: float = 0.8
    interval_u: int = 40
    warmup_steps: int = 100

    def __post_init__(self):
        if not (0.0 < self.k_ratio <= 1.0):
            raise ConfigError(f"k_ratio must lie in (0, 1], got {self.k_ratio}")
        if not (0.0 <= self.p_exploit <= 1.0):
            raise ConfigError(f"p_exploit must lie in [0, 1], got {self.p_exploit}")
        if self.interval_u < 1:
            raise ConfigError(f"interval_u must be >= 1, got {self.interval_u}")
        if self.warmup_steps < 0:
            raise ConfigError(f"warmup_steps must be >= 0, got {self.warmup_steps}")

    def k_for(self, n_layers: int) -> int:
        return max(1, math.ceil(self.k_ratio * n_layers))


@dataclass
class SelectionEvent:
    step: int
    mode: str
    scores: list[float]
    selected: tuple[int, ...]

    def format_line(self) -> str:
        scores = ",".join(f"{s:.17g}" for s in self.scores)
        chosen = ",".join(str(i) for i in self.selected)
        return f"step={self.step} mode={self.mode} scores=[{scores}] selected=[{chosen}]"


@dataclass
class DLSState:
    cfg: DLSConfig
    n_layers: int
    rng: np.random.Generator
    selected: tuple[int, ...] = ()
    last_scores: list[float] | None = None
    step: int = 0
    last_mode: str = "warmup"
    events: list[SelectionEvent] = field(default_factory=list)

    def __post_init__(self):
        if not self.selected:
            self.selected = tuple(range(self.n_layers))  # warmup trains everything


def layer_score(attn_gain_grad: np.ndarray | None, ffn_gain_grad: np.ndarray | None) -> float:
    """sqrt(||g_attn||^2 + ||g_ffn||^2) over the two per-layer gain gradients."""
    if attn_gain_grad is None or ffn_gain_grad is None:
        raise ScoringError(
            "layer scoring needs gradients of both normalization gains; keep the "
            "gains' gradient computation enabled even while they are frozen"
        )
    a = np.asarray(attn_gain_grad, dtype=np.float64)
    f = np.asarray(ffn_gain_grad, dtype=np.float64)
    return float(np.sqrt(np.sum(a * a) + np.sum(f * f)))


@dataclass(frozen=True)
class SelectionResult:
    selected: tuple[int, ...]
    mode: str


def select_layers(scores, cfg: DLSConfig, rng: np.random.Generator) -> SelectionResult:
    """Top-k by score with probability p_exploit, else a uniform random k-subset.

    Exploitation sorts descending with ties broken by lower layer index.
    """
    scores = list(scores)
    n = len(scores)
    k = cfg.k_for(n)
    if rng.random() < cfg.p_exploit:
        order = sorted(range(n), key=lambda i: (-scores[i], i))
        return SelectionResult(tuple(sorted(order[:k])), "exploit")
    picked = rng.choice(n, size=k, replace=False)
    return SelectionResult(tuple(sorted(int(i) for i in picked)), "explore")


def mask_gradients(model: TransformerLM, selected) -> None:
    """Zero the gradients of every trainable parameter outside the active set."""
    active = set(selected)
    for i in range(len(model.layers)):
        if i in active:
            continue
        for p in model.layer_trainable_parameters(i):
            if p.grad is not None:
                p.grad = np.zeros_like(p.grad)


def dls_step(state: DLSState, step_index: int, model: TransformerLM) -> DLSState:
    """Advance the scheduler by one training step and mask inactive layers.

    Selection fires only after warmup at multiples of interval_u; between
    events the previous active set persists.
    """
    cfg = state.cfg
    if step_index <= cfg.warmup_steps:
        state.selected = tuple(range(state.n_layers))
        state.last_mode = "warmup"
    elif step_index % cfg.interval_u == 0:
        scores = [layer_score(*model.gain_gradients(i)) for i in range(state.n_layers)]
        result = select_layers(scores, cfg, state.rng)
        state.selected = result.selected
        state.last_scores = scores
        state.last_mode = result.mode
        state.events.append(SelectionEvent(step_index, result.mode, scores, result.selected))
    mask_gradients(model, state.selected)
    state.step = step_index
    return state


def inactive_trainable_parameters(state: DLSState, model: TransformerLM):
    """Trainable tensors the optimizer must skip this step (frozen layers)."""
    active = set(state.selected)
    skipped = []
    for i in range(len(model.layers)):
        if i not in active:
            skipped.extend(model.layer_trainable_parameters(i))
    return skipped
