"""Central finite-difference gradients, the independent oracle for backward()."""

from __future__ import annotations

import numpy as np

from .errors import ContractError, NumericError
from .tensor import Tensor


def finite_difference_gradient(f, params: list[Tensor], eps: float = 1e-5) -> list[np.ndarray]:
    """Central differences of a scalar function w.r.t. each param element.

    `f` takes no arguments and must be deterministic; it reads the params via
    closure. Perturbations happen in place and are restored. Meant to run in
    float64; float32 step noise swamps the estimate.
    """
    if eps <= 0:
        raise ContractError(f"finite_difference_gradient: eps must be positive, got {eps}")
    grads = []
    for p in params:
        flat = p.data.reshape(-1)
        g = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = _eval_scalar(f)
            flat[i] = orig - eps
            lo = _eval_scalar(f)
            flat[i] = orig
            g[i] = (hi - lo) / (2.0 * eps)
        grads.append(g.reshape(p.shape))
    return grads


def finite_difference_elements(f, param: Tensor, indices, eps: float = 1e-5) -> np.ndarray:
    """Central differences at selected flat indices of one param (for sampling
    large weight matrices instead of sweeping every element)."""
    if eps <= 0:
        raise ContractError(f"finite_difference_elements: eps must be positive, got {eps}")
    flat = param.data.reshape(-1)
    out = np.zeros(len(indices), dtype=flat.dtype)
    for j, i in enumerate(indices):
        orig = flat[i]
        flat[i] = orig + eps
        hi = _eval_scalar(f)
        flat[i] = orig - eps
        lo = _eval_scalar(f)
        flat[i] = orig
        out[j] = (hi - lo) / (2.0 * eps)
    return out


def _eval_scalar(f) -> float:
    out = f()
    val = out.item() if isinstance(out, Tensor) else float(out)
    if not np.isfinite(val):
        raise NumericError("finite_difference_gradient: objective returned non-finite value")
    return val


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Largest elementwise deviation, normalized by the gradient's own scale.

    Normalizing per tensor (not per element) keeps the metric meaningful when
    individual entries are incidentally near zero.
    """
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0))
    if scale == 0.0:
        return 0.0
    return float(np.abs(analytic - numeric).max() / scale)
