"""Run configuration: one flat `key = value` file, `#` comments, strict keys.

Defaults mirror the method's published hyperparameters (r_low 0.25, alpha 0.1,
rank 128, k_ratio 0.5, interval 40, p_exploit 0.8, lr 1e-3).
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

from .dls import DLSConfig
from .errors import ConfigError
from .model import ModelConfig
from .roae import RoAEConfig


@dataclass(frozen=True)
class RunConfig:
    # model architecture
    d: int = 32
    n_layers: int = 2
    h_q: int = 4
    h_k: int = 4
    d_h: int = 8
    vocab: int = 64
    max_seq: int = 128
    rope_base: float = 10000.0
    ffn_mult: int = 4
    precision: str = "float32"
    # adapter
    adapter: str = "roae"  # "roae" | "lora" | "none"
    r_low: float = 0.25
    alpha: float = 0.1
    rank: int = 128
    share_qk: bool = True
    stage: str = "pre_rope"
    signal_source: str = "normed"
    lora_rank: int = 128
    # layer selection
    k_ratio: float = 0.5
    p_exploit: float = 0.8
    interval_u: int = 40
    warmup_steps: int = 100
    # optimization
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    grad_clip: float = 0.0  # 0 disables clipping
    # run shape
    task: str = "copy"  # "corpus" | "copy" | "twincopy" | "modsum"
    corpus_path: str = ""
    twin_noise: float = 0.45  # twincopy pretrain mixture: P(answer token copies far prefix)
    steps: int = 2000
    batch: int = 16
    seq_len: int = 64
    seed: int = 0
    pretrain_steps: int = 0
    pretrain_lr: float = 1e-3
    save_every: int = 0  # 0 = final checkpoint only
    run_dir: str = "runs/run"
    resume_from: str = ""

    def __post_init__(self):
        if self.precision not in ("float32", "float64"):
            raise ConfigError(f"precision must be float32 or float64, got {self.precision!r}")
        if self.adapter not in ("roae", "lora", "none"):
            raise ConfigError(f"adapter must be roae, lora or none, got {self.adapter!r}")
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.steps < 1:
            raise ConfigError(f"steps must be >= 1, got {self.steps}")
        if self.batch < 1 or self.seq_len < 1:
            raise ConfigError("batch and seq_len must be >= 1")

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            d=self.d,
            n_layers=self.n_layers,
            h_q=self.h_q,
            h_k=self.h_k,
            d_h=self.d_h,
            vocab=self.vocab,
            max_seq=self.max_seq,
            rope_base=self.rope_base,
            ffn_mult=self.ffn_mult,
        )

    def roae_config(self) -> RoAEConfig:
        return RoAEConfig(
            r_low=self.r_low,
            alpha=self.alpha,
            rank=self.rank,
            share_qk=self.share_qk,
            stage=self.stage,
            signal_source=self.signal_source,
        )

    def dls_config(self) -> DLSConfig:
        return DLSConfig(
            k_ratio=self.k_ratio,
            p_exploit=self.p_exploit,
            interval_u=self.interval_u,
            warmup_steps=self.warmup_steps,
        )


_FIELDS = {f.name: f.type for f in dataclasses.fields(RunConfig)}


def _parse_value(key: str, text: str):
    kind = _FIELDS[key]
    if kind == "bool":
        low = text.lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {text!r}")
    if kind == "int":
        try:
            return int(text)
        except ValueError:
            raise ConfigError(f"{key}: expected an integer, got {text!r}") from None
    if kind == "float":
        try:
            return float(text)
        except ValueError:
            raise ConfigError(f"{key}: expected a number, got {text!r}") from None
    return text


def parse_config(text: str) -> RunConfig:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, _, val = line.partition("=")
        key, val = key.strip(), val.strip()
        if key not in _FIELDS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        values[key] = _parse_value(key, val)
    return RunConfig(**values)


def format_config(cfg: RunConfig) -> str:
    lines = []
    for f in dataclasses.fields(RunConfig):
        v = getattr(cfg, f.name)
        if isinstance(v, bool):
            v = "true" if v else "false"
        elif isinstance(v, float):
            v = repr(v)
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"


def load_config(path: str) -> RunConfig:
    from .errors import IoError

    try:
        with open(path, "r", encoding="utf-8") as fh:
            return parse_config(fh.read())
    except OSError as e:
        raise IoError(f"cannot read config {path!r}: {e}") from e
