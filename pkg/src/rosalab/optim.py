"""AdamW with decoupled weight decay.

Parameters handed to `step` via `skip` are left completely untouched: no
moment update, no step count, no decay. That makes layer freezing bitwise
verifiable (advancing moments on zeroed grads would still mutate state).
"""

from __future__ import annotations

import numpy as np

from .tensor import Tensor


class AdamW:
    def __init__(
        self,
        named_params,
        lr: float = 1e-3,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.01,
    ):
        self.params: list[tuple[str, Tensor]] = [(n, p) for n, p in named_params if p.trainable]
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.state = {
            name: {"m": np.zeros_like(p.data), "v": np.zeros_like(p.data), "t": 0}
            for name, p in self.params
        }

    def step(self, skip=()) -> None:
        skip_ids = {id(p) for p in skip}
        b1, b2 = self.beta1, self.beta2
        for name, p in self.params:
            if id(p) in skip_ids or p.grad is None:
                continue
            g = p.grad.astype(p.data.dtype, copy=False)
            st = self.state[name]
            st["t"] += 1
            st["m"] = b1 * st["m"] + (1.0 - b1) * g
            st["v"] = b2 * st["v"] + (1.0 - b2) * g * g
            m_hat = st["m"] / (1.0 - b1 ** st["t"])
            v_hat = st["v"] / (1.0 - b2 ** st["t"])
            p.data = p.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
            # decay only matrix weights, never gains/biases
            if self.weight_decay and p.data.ndim >= 2:
                p.data = p.data - self.lr * self.weight_decay * p.data

    def state_arrays(self):
        """Moment buffers as (name, array) pairs, for checkpointing."""
        out = []
        for name, _ in self.params:
            out.append((f"opt.m.{name}", self.state[name]["m"]))
            out.append((f"opt.v.{name}", self.state[name]["v"]))
        return out

    def step_counts(self) -> dict[str, int]:
        return {name: self.state[name]["t"] for name, _ in self.params}

    def load_state(self, arrays: dict[str, np.ndarray], counts: dict[str, int]) -> None:
        for name, p in self.params:
            self.state[name]["m"] = arrays[f"opt.m.{name}"].astype(p.data.dtype)
            self.state[name]["v"] = arrays[f"opt.v.{name}"].astype(p.data.dtype)
            self.state[name]["t"] = int(counts[name])
