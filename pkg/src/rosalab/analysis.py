"""Reporting tools: head-activation norm tables, parameter budgets, model-wide
gradient checking, and the ablation-variant grid."""

from __future__ import annotations

import os
from dataclasses import replace

import numpy as np

from .config import RunConfig
from .data import tokenize_bytes
from .errors import ConfigError, InputError, IoError
from .gradcheck import finite_difference_elements
from .model import StateCapture, TransformerLM, count_parameters
from .roae import attach_roae, lora_baseline_attach, lora_param_count, roae_param_count
from .tensor import backward, cross_entropy_mean, using_dtype

CSV_HEADER = "layer,head,dim,mean_abs,head_l2"


def head_state_table(model: TransformerLM, tokens: np.ndarray, which: str, stage: str):
    """Rows of (layer, head, dim, mean |activation|, mean per-head L2 norm).

    Statistics average over batch and sequence; the per-head L2 is repeated on
    each of its dim rows so a single table carries both views.
    """
    if which not in ("q", "k"):
        raise InputError(f"which must be 'q' or 'k', got {which!r}")
    if stage not in ("pre_rope", "post_rope"):
        raise InputError(f"stage must be 'pre_rope' or 'post_rope', got {stage!r}")
    capture = StateCapture(which=which, stage=stage)
    model.lm_forward(tokens, capture=capture)
    rows = []
    for layer_idx, states in enumerate(capture.states):  # [h, b, l, d_h]
        mean_abs = np.abs(states).mean(axis=(1, 2))  # [h, d_h]
        head_l2 = np.linalg.norm(states, axis=-1).mean(axis=(1, 2))  # [h]
        h, d_h = mean_abs.shape
        for head in range(h):
            for dim in range(d_h):
                rows.append((layer_idx, head, dim, float(mean_abs[head, dim]), float(head_l2[head])))
    return rows


def write_norm_csv(rows, path: str) -> None:
    try:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(CSV_HEADER + "\n")
            for layer, head, dim, mean_abs, head_l2 in rows:
                fh.write(f"{layer},{head},{dim},{mean_abs!r},{head_l2!r}\n")
    except OSError as e:
        raise IoError(f"cannot write {path!r}: {e}") from e


def analyze_checkpoint(ckpt: str, sample: str, out_csv: str, which: str = "q", stage: str = "pre_rope"):
    """Forward a byte sample through a checkpointed model and dump the table."""
    from .train import load_trainer

    state = load_trainer(ckpt)
    try:
        with open(sample, "rb") as fh:
            raw = fh.read()
    except OSError as e:
        raise IoError(f"cannot read sample {sample!r}: {e}") from e
    if not raw:
        raise InputError(f"sample {sample!r} is empty")
    tokens = tokenize_bytes(raw)
    vocab = state.cfg.vocab
    if tokens.max() >= vocab:
        tokens = tokens[tokens < vocab]  # synthetic vocabularies drop foreign bytes
        if tokens.size == 0:
            raise InputError(f"sample {sample!r} has no tokens inside vocab {vocab}")
    if tokens.size > state.cfg.max_seq:
        tokens = tokens[: state.cfg.max_seq]
    rows = head_state_table(state.model, tokens[None, :], which, stage)
    write_norm_csv(rows, out_csv)
    return rows


# -- parameter budget -------------------------------------------------------------


def build_model_for_report(cfg: RunConfig) -> TransformerLM:
    from .train import STREAM_INIT, substream

    with using_dtype(np.float64 if cfg.precision == "float64" else np.float32):
        rng = substream(cfg.seed, STREAM_INIT)
        model = TransformerLM(cfg.model_config(), rng)
        if cfg.adapter == "roae":
            model.freeze_base()
            attach_roae(model, cfg.roae_config(), rng)
        elif cfg.adapter == "lora":
            model.freeze_base()
            lora_baseline_attach(model, cfg.lora_rank, rng)
        return model


def param_report(cfg: RunConfig) -> dict:
    """Total, attached-trainable, and actively-updated counts plus the
    trainable fraction, cross-checked against the closed forms."""
    model = build_model_for_report(cfg)
    total = count_parameters(model)
    trainable = count_parameters(model, trainable_only=True)
    layer_total = sum(
        p.numpy().size for i in range(cfg.n_layers) for p in model.layer_trainable_parameters(i)
    )
    k = cfg.dls_config().k_for(cfg.n_layers)
    active = (trainable - layer_total) + (layer_total // cfg.n_layers) * k
    report = {
        "total": total,
        "trainable": trainable,
        "active": active,
        "fraction_pct": 100.0 * trainable / total,
    }
    if cfg.adapter == "roae":
        report["closed_form"] = roae_param_count(cfg.model_config(), cfg.roae_config())
    elif cfg.adapter == "lora":
        report["closed_form"] = lora_param_count(cfg.model_config(), cfg.lora_rank)
    return report


def format_param_report(report: dict) -> str:
    lines = [
        f"total_params = {report['total']}",
        f"trainable_params = {report['trainable']}",
        f"active_params = {report['active']}",
        f"trainable_fraction = {report['fraction_pct']:.3f}%",
    ]
    if "closed_form" in report:
        lines.append(f"closed_form_trainable = {report['closed_form']}")
    return "\n".join(lines) + "\n"


# -- whole-model gradient check ----------------------------------------------------


PROBE_WEIGHT_STD = 0.1  # keeps every path's gradient well above FD roundoff


def gradcheck_report(cfg: RunConfig, tol: float = 1e-5, max_elements: int = 128, eps: float = 1e-5) -> dict:
    """Analytic vs central-difference gradients over the whole model, float64.

    Weights are re-drawn at a probe scale: the training init (std 0.02, zero
    adapter factors) attenuates the adapter path until its true gradients sit
    below the finite-difference noise floor, where no tolerance is meaningful.
    Large base matrices are sampled at up to max_elements entries. Relative
    error is normalized per tensor by the gradient's own scale.
    """
    from .data import make_batch, make_source
    from .train import STREAM_BATCH, STREAM_INIT, substream

    with using_dtype(np.float64):
        rng = substream(cfg.seed, STREAM_INIT)
        model = TransformerLM(cfg.model_config(), rng)
        if cfg.adapter == "roae":
            attach_roae(model, cfg.roae_config(), rng)
        elif cfg.adapter == "lora":
            lora_baseline_attach(model, cfg.lora_rank, rng)
        for name, p in model.named_parameters():
            if ".roae.b" in name or ".lora.b" in name:
                p.data = rng.normal(0.0, 0.3, size=p.shape)
            elif name.endswith("gain"):
                p.data = 1.0 + rng.normal(0.0, 0.1, size=p.shape)
            elif p.ndim >= 2:
                p.data = rng.normal(0.0, PROBE_WEIGHT_STD, size=p.shape)

        source = make_source(cfg.task, cfg.vocab, cfg.corpus_path)
        batch = make_batch(source, min(cfg.batch, 2), min(cfg.seq_len, 16), substream(cfg.seed, STREAM_BATCH))

        def objective():
            return cross_entropy_mean(model.lm_forward(batch.inputs), batch.targets, batch.loss_mask)

        model.zero_grad()
        backward(objective())

        groups = {"adapters": [], "norm_gains": [], "base_weights": []}
        for name, p in model.named_parameters():
            if ".roae." in name or ".lora." in name:
                groups["adapters"].append((name, p))
            elif name.endswith("gain"):
                groups["norm_gains"].append((name, p))
            else:
                groups["base_weights"].append((name, p))

        pick_rng = np.random.default_rng(cfg.seed)
        result = {}
        for group, params in groups.items():
            worst = 0.0
            for name, p in params:
                size = p.numpy().size
                if size <= max_elements:
                    idx = np.arange(size)
                else:
                    idx = np.sort(pick_rng.choice(size, size=max_elements, replace=False))
                fd = finite_difference_elements(objective, p, idx, eps=eps)
                analytic = p.grad.reshape(-1)[idx]
                scale = max(np.abs(p.grad).max(), np.abs(fd).max(initial=0.0))
                if scale > 0.0:
                    worst = max(worst, float(np.abs(analytic - fd).max() / scale))
            result[group] = worst
        result["max"] = max(result.values())
        result["passed"] = result["max"] <= tol
        result["tol"] = tol
        return result


def format_gradcheck_report(report: dict) -> str:
    lines = [
        f"adapters_rel_err = {report['adapters']:.3e}",
        f"norm_gains_rel_err = {report['norm_gains']:.3e}",
        f"base_weights_rel_err = {report['base_weights']:.3e}",
        f"max_rel_err = {report['max']:.3e}",
        f"tolerance = {report['tol']:.3e}",
        f"result = {'PASS' if report['passed'] else 'FAIL'}",
    ]
    return "\n".join(lines) + "\n"


# -- ablation variants --------------------------------------------------------------


ABLATION_VARIANTS = ("full", "roae_only", "rlow_half", "lora128", "lora_matched")


def matched_lora_rank(cfg: RunConfig) -> int:
    """LoRA rank whose trainable count lands closest to the adapter budget."""
    target = roae_param_count(cfg.model_config(), cfg.roae_config())
    per_rank = lora_param_count(cfg.model_config(), 1)
    best = max(1, round(target / per_rank))
    candidates = [max(1, best - 1), best, best + 1]
    return min(candidates, key=lambda r: abs(lora_param_count(cfg.model_config(), r) - target))


def ablation_config(cfg: RunConfig, variant: str) -> RunConfig:
    sub_dir = os.path.join(cfg.run_dir, variant)
    if variant == "full":
        return replace(cfg, adapter="roae", run_dir=sub_dir)
    if variant == "roae_only":
        return replace(cfg, adapter="roae", k_ratio=1.0, run_dir=sub_dir)
    if variant == "rlow_half":
        return replace(cfg, adapter="roae", r_low=0.5, run_dir=sub_dir)
    if variant == "lora128":
        return replace(cfg, adapter="lora", lora_rank=128, run_dir=sub_dir)
    if variant == "lora_matched":
        return replace(cfg, adapter="lora", lora_rank=matched_lora_rank(cfg), run_dir=sub_dir)
    raise ConfigError(f"unknown ablation variant {variant!r}; choose from {ABLATION_VARIANTS}")


def run_ablation(cfg: RunConfig, variant: str):
    from .train import run_training

    return run_training(ablation_config(cfg, variant))
