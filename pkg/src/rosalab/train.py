"""End-to-end training: batching, causal-LM loss, AdamW, the adapter step with
layer selection and gradient masking, checkpointing, and run reporting.

A run owns three named random substreams derived from the master seed (init,
batches, layer selection) plus a fourth for evaluation batches, so ablations
change one factor at a time. The desk-scale protocol mirrors fine-tuning a
pretrained backbone: optionally pretrain the base model on the task, freeze
it, attach adapters, then run the adapted loop.
"""

from __future__ import annotations

import json
import math
import os
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .checkpoint import read_checkpoint, write_checkpoint
from .config import RunConfig, format_config, parse_config
from .data import Batch, answer_accuracy, make_batch, make_source
from .dls import DLSState, dls_step, inactive_trainable_parameters
from .errors import ConfigError, NumericError, TrainingAbort
from .model import TransformerLM, count_parameters
from .optim import AdamW
from .roae import attach_roae, lora_baseline_attach
from .tensor import backward, cross_entropy_mean, using_dtype

STREAM_INIT, STREAM_BATCH, STREAM_DLS, STREAM_EVAL = 0, 1, 2, 3
EVAL_BATCHES = 8


def substream(seed: int, which: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, which]))


def _rng_state(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def _restore_rng(state: dict) -> np.random.Generator:
    rng = np.random.default_rng(0)
    rng.bit_generator.state = state
    return rng


@dataclass
class TrainerState:
    cfg: RunConfig
    model: TransformerLM
    source: object
    opt: AdamW
    dls: DLSState
    batch_rng: np.random.Generator
    step: int = 0  # completed adapted-training steps
    base_metrics: dict = field(default_factory=dict)


@dataclass
class RunReport:
    run_dir: str
    steps: int
    final_loss: float
    base_ce: float
    final_ce: float
    base_accuracy: float
    final_accuracy: float
    total_params: int
    trainable_params: int
    active_params: int
    exploit_events: int
    explore_events: int
    duration_s: float


def build_trainer(cfg: RunConfig) -> TrainerState:
    """Construct the full run state, including the pretrain/freeze/attach phase."""
    with using_dtype(np.float64 if cfg.precision == "float64" else np.float32):
        init_rng = substream(cfg.seed, STREAM_INIT)
        model = TransformerLM(cfg.model_config(), init_rng)
        source = make_source(cfg.task, cfg.vocab, cfg.corpus_path)
        batch_rng = substream(cfg.seed, STREAM_BATCH)

        if cfg.pretrain_steps > 0:
            # twincopy pretrains on the hedged mixture; the adapted phase and
            # its evaluation then target the pure far-copy behavior
            pre_source = make_source(cfg.task, cfg.vocab, cfg.corpus_path, twin_far=cfg.twin_noise)
            pre_opt = AdamW(
                model.named_parameters(),
                lr=cfg.pretrain_lr,
                betas=(cfg.beta1, cfg.beta2),
                eps=cfg.eps,
                weight_decay=cfg.weight_decay,
            )
            for _ in range(cfg.pretrain_steps):
                batch = make_batch(pre_source, cfg.batch, cfg.seq_len, batch_rng)
                model.zero_grad()
                loss = cross_entropy_mean(
                    model.lm_forward(batch.inputs), batch.targets, batch.loss_mask
                )
                backward(loss)
                pre_opt.step()

        if cfg.adapter == "roae":
            model.freeze_base()
            attach_roae(model, cfg.roae_config(), init_rng)
        elif cfg.adapter == "lora":
            model.freeze_base()
            lora_baseline_attach(model, cfg.lora_rank, init_rng)
        # adapter == "none": the base model itself stays trainable

        opt = AdamW(
            model.named_parameters(),
            lr=cfg.lr,
            betas=(cfg.beta1, cfg.beta2),
            eps=cfg.eps,
            weight_decay=cfg.weight_decay,
        )
        dls = DLSState(cfg.dls_config(), cfg.n_layers, substream(cfg.seed, STREAM_DLS))
        state = TrainerState(cfg, model, source, opt, dls, batch_rng)
        base_ce, base_acc = evaluate(state)
        state.base_metrics = {"ce": base_ce, "accuracy": base_acc}
        return state


def eval_batches(cfg: RunConfig, source) -> list[Batch]:
    rng = substream(cfg.seed, STREAM_EVAL)
    return [make_batch(source, cfg.batch, cfg.seq_len, rng) for _ in range(EVAL_BATCHES)]


def evaluate(state: TrainerState) -> tuple[float, float]:
    """Masked mean cross-entropy and answer-span accuracy on fixed eval batches."""
    ces, accs = [], []
    for batch in eval_batches(state.cfg, state.source):
        logits = state.model.lm_forward(batch.inputs)
        ce = cross_entropy_mean(logits, batch.targets, batch.loss_mask)
        ces.append(float(ce.item()))
        accs.append(answer_accuracy(logits.numpy(), batch))
    return float(np.mean(ces)), float(np.mean(accs))


def _clip_gradients(model: TransformerLM, max_norm: float) -> None:
    grads = [p.grad for _, p in model.named_parameters() if p.trainable and p.grad is not None]
    if not grads:
        return
    total = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads))
    if total > max_norm:
        factor = max_norm / total
        for _, p in model.named_parameters():
            if p.trainable and p.grad is not None:
                p.grad = p.grad * factor


def train_step(state: TrainerState, batch: Batch, step: int) -> float:
    """One adapted step: forward, loss, backward, selection mask, update."""
    cfg, model = state.cfg, state.model
    model.zero_grad()
    logits = model.lm_forward(batch.inputs)
    loss = cross_entropy_mean(logits, batch.targets, batch.loss_mask)
    backward(loss)
    if cfg.grad_clip > 0:
        _clip_gradients(model, cfg.grad_clip)
    dls_step(state.dls, step, model)
    state.opt.step(skip=inactive_trainable_parameters(state.dls, model))
    state.step = step
    return float(loss.item())


# -- persistence -----------------------------------------------------------------


def save_trainer(state: TrainerState, path: str) -> None:
    # normalize fields that steer output rather than computation, so a split
    # run's final checkpoint is byte-identical to the monolithic run's
    stored_cfg = replace(state.cfg, run_dir="", resume_from="", pretrain_steps=0, save_every=0)
    meta = {
        "config": format_config(stored_cfg),
        "step": state.step,
        "batch_rng": _rng_state(state.batch_rng),
        "dls": {
            "rng": _rng_state(state.dls.rng),
            "selected": list(state.dls.selected),
            "last_scores": state.dls.last_scores,
            "last_mode": state.dls.last_mode,
            "step": state.dls.step,
        },
        "opt_t": state.opt.step_counts(),
        "base_metrics": state.base_metrics,
    }
    tensors = [(name, p.data) for name, p in state.model.named_parameters()]
    tensors += state.opt.state_arrays()
    write_checkpoint(path, json.dumps(meta, sort_keys=True), tensors)


def load_trainer(path: str, run_dir: str | None = None, steps: int | None = None) -> TrainerState:
    """Rebuild a run from a checkpoint; the embedded config drives everything
    except an optional new run_dir / total step count."""
    meta_text, tensors = read_checkpoint(path)
    meta = json.loads(meta_text)
    cfg = parse_config(meta["config"])
    overrides = {}
    if run_dir is not None:
        overrides["run_dir"] = run_dir
    if steps is not None:
        overrides["steps"] = steps
    overrides["pretrain_steps"] = 0  # weights come from the checkpoint
    cfg = replace(cfg, **overrides)

    with using_dtype(np.float64 if cfg.precision == "float64" else np.float32):
        init_rng = substream(cfg.seed, STREAM_INIT)
        model = TransformerLM(cfg.model_config(), init_rng)
        if cfg.adapter == "roae":
            model.freeze_base()
            attach_roae(model, cfg.roae_config(), init_rng)
        elif cfg.adapter == "lora":
            model.freeze_base()
            lora_baseline_attach(model, cfg.lora_rank, init_rng)
        for name, p in model.named_parameters():
            if name not in tensors:
                raise ConfigError(f"checkpoint {path!r} is missing tensor {name!r}")
            p.data = tensors[name]
        opt = AdamW(
            model.named_parameters(),
            lr=cfg.lr,
            betas=(cfg.beta1, cfg.beta2),
            eps=cfg.eps,
            weight_decay=cfg.weight_decay,
        )
        opt.load_state(tensors, meta["opt_t"])
        dls_meta = meta["dls"]
        dls = DLSState(
            cfg.dls_config(),
            cfg.n_layers,
            _restore_rng(dls_meta["rng"]),
            selected=tuple(dls_meta["selected"]),
            last_scores=dls_meta["last_scores"],
            step=dls_meta["step"],
            last_mode=dls_meta["last_mode"],
        )
        source = make_source(cfg.task, cfg.vocab, cfg.corpus_path)
        state = TrainerState(
            cfg, model, source, opt, dls, _restore_rng(meta["batch_rng"]), step=meta["step"]
        )
        state.base_metrics = meta["base_metrics"]
        return state


# -- full run ---------------------------------------------------------------------


def _active_param_count(state: TrainerState) -> int:
    model, cfg = state.model, state.cfg
    layer_total = sum(
        p.numpy().size for i in range(cfg.n_layers) for p in model.layer_trainable_parameters(i)
    )
    non_layer = count_parameters(model, trainable_only=True) - layer_total
    k = state.dls.cfg.k_for(cfg.n_layers)
    return non_layer + (layer_total // cfg.n_layers) * k


def run_training(cfg: RunConfig, state: TrainerState | None = None) -> RunReport:
    """Execute the loop; write loss curve, selection trace, final checkpoint,
    and a summary into the run directory."""
    started = time.monotonic()
    os.makedirs(cfg.run_dir, exist_ok=True)
    with open(os.path.join(cfg.run_dir, "config.cfg"), "w", encoding="utf-8") as fh:
        fh.write(format_config(cfg))

    if state is None:
        if cfg.resume_from:
            state = load_trainer(cfg.resume_from, run_dir=cfg.run_dir, steps=cfg.steps)
            cfg = state.cfg
        else:
            state = build_trainer(cfg)

    loss_path = os.path.join(cfg.run_dir, "loss.csv")
    sel_path = os.path.join(cfg.run_dir, "selection.log")
    final_ckpt = os.path.join(cfg.run_dir, "final.ckpt")
    last_good = None
    flushed_events = 0
    final_loss = float("nan")

    with open(loss_path, "w", encoding="utf-8") as loss_fh, open(
        sel_path, "w", encoding="utf-8"
    ) as sel_fh:
        loss_fh.write("step,loss\n")
        for step in range(state.step + 1, cfg.steps + 1):
            batch = make_batch(state.source, cfg.batch, cfg.seq_len, state.batch_rng)
            try:
                final_loss = train_step(state, batch, step)
            except NumericError as e:
                raise TrainingAbort(step, last_good, str(e)) from e
            loss_fh.write(f"{step},{final_loss!r}\n")
            while flushed_events < len(state.dls.events):
                sel_fh.write(state.dls.events[flushed_events].format_line() + "\n")
                flushed_events += 1
            if cfg.save_every and step % cfg.save_every == 0:
                ckpt = os.path.join(cfg.run_dir, f"step{step:06d}.ckpt")
                save_trainer(state, ckpt)
                last_good = ckpt

    final_ce, final_acc = evaluate(state)
    save_trainer(state, final_ckpt)

    total = count_parameters(state.model)
    trainable = count_parameters(state.model, trainable_only=True)
    exploit = sum(1 for e in state.dls.events if e.mode == "exploit")
    explore = sum(1 for e in state.dls.events if e.mode == "explore")
    report = RunReport(
        run_dir=cfg.run_dir,
        steps=state.step,
        final_loss=final_loss,
        base_ce=state.base_metrics.get("ce", float("nan")),
        final_ce=final_ce,
        base_accuracy=state.base_metrics.get("accuracy", float("nan")),
        final_accuracy=final_acc,
        total_params=total,
        trainable_params=trainable,
        active_params=_active_param_count(state),
        exploit_events=exploit,
        explore_events=explore,
        duration_s=time.monotonic() - started,
    )
    with open(os.path.join(cfg.run_dir, "summary.txt"), "w", encoding="utf-8") as fh:
        fh.write(_format_summary(report))
    return report


def _format_summary(r: RunReport) -> str:
    frac = 100.0 * r.trainable_params / r.total_params if r.total_params else 0.0
    lines = [
        f"steps = {r.steps}",
        f"final_loss = {r.final_loss!r}",
        f"base_ce = {r.base_ce!r}",
        f"final_ce = {r.final_ce!r}",
        f"base_accuracy = {r.base_accuracy!r}",
        f"final_accuracy = {r.final_accuracy!r}",
        f"total_params = {r.total_params}",
        f"trainable_params = {r.trainable_params}",
        f"active_params = {r.active_params}",
        f"trainable_fraction = {frac:.3f}%",
        f"exploit_events = {r.exploit_events}",
        f"explore_events = {r.explore_events}",
    ]
    return "\n".join(lines) + "\n"
