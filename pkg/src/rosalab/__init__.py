"""Desk-scale fine-tuning laboratory: a rotary-attention transformer on a
hand-built autograd engine, low-frequency Q/K adapters, and gradient-norm
layer scheduling, with finite-difference verification throughout."""

from .config import RunConfig, load_config, parse_config
from .dls import DLSConfig, DLSState, dls_step, layer_score, mask_gradients, select_layers
from .gradcheck import finite_difference_gradient
from .model import ModelConfig, TransformerLM, count_parameters, rope_rotate
from .roae import (
    RoAEAdapter,
    RoAEConfig,
    align_gqa,
    attach_roae,
    extract_low_freq,
    generate_signal,
    lora_baseline_attach,
    modulate,
    reinsert,
    roae_param_count,
)
from .tensor import Tensor, apply_primitive, backward
from .train import RunReport, build_trainer, load_trainer, run_training, save_trainer, train_step

__all__ = [
    "DLSConfig",
    "DLSState",
    "ModelConfig",
    "RoAEAdapter",
    "RoAEConfig",
    "RunConfig",
    "RunReport",
    "Tensor",
    "TransformerLM",
    "align_gqa",
    "apply_primitive",
    "attach_roae",
    "backward",
    "build_trainer",
    "count_parameters",
    "dls_step",
    "extract_low_freq",
    "finite_difference_gradient",
    "generate_signal",
    "layer_score",
    "load_config",
    "load_trainer",
    "lora_baseline_attach",
    "mask_gradients",
    "modulate",
    "parse_config",
    "reinsert",
    "roae_param_count",
    "rope_rotate",
    "run_training",
    "save_trainer",
    "select_layers",
    "train_step",
]
