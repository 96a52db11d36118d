"""Dense-tensor engine with reverse-mode differentiation.

Small, fixed primitive set; numpy supplies the array kernels, gradients are
derived here. Graphs are define-by-run: every non-leaf tensor carries the
record of the primitive that produced it (kind, parent tensors, vjp closure,
creation sequence number). Sorting the tensors reachable from a loss by
sequence number yields a topological order, which `backward` walks in reverse.

Precision is a process-global mode: tensors created without an explicit dtype
use the current default (float32 for training; verification code switches to
float64 via `using_dtype`).
"""

from __future__ import annotations

import itertools
from contextlib import contextmanager

import numpy as np

from .errors import ContractError, NumericError, ShapeError

EPS_NORM = 1e-6  # rms-normalize denominator floor

PRIMITIVE_KINDS = (
    "matmul",
    "add",
    "mul",
    "scale",
    "transpose_last_two",
    "reshape",
    "slice_last_dim",
    "concat_last_dim",
    "embedding_lookup",
    "softmax_last_dim",
    "silu",
    "rms_normalize",
    "cross_entropy_mean",
    "masked_fill",
)

_default_dtype = np.float32
_seq_counter = itertools.count()


def set_default_dtype(dtype) -> None:
    global _default_dtype
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ContractError(f"unsupported dtype {dtype}; use float32 or float64")
    _default_dtype = dtype.type


def default_dtype():
    return _default_dtype


@contextmanager
def using_dtype(dtype):
    """Temporarily switch the global default dtype (verification runs use float64)."""
    prev = _default_dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(prev)


class Tensor:
    """Dense floating array, optionally tracked by the autograd graph.

    `requires_grad` controls whether a gradient is *computed* for this tensor;
    `trainable` marks it as eligible for optimizer updates. The two are
    deliberately independent: frozen normalization gains keep requires_grad so
    layer scoring can read their gradients without the optimizer touching them.
    """

    __slots__ = ("data", "requires_grad", "grad", "trainable", "op", "_parents", "_vjp", "_seq")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else _default_dtype)
        if arr.dtype.type not in (np.float32, np.float64):
            arr = arr.astype(_default_dtype)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.trainable = False
        self.op: str | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._vjp = None
        self._seq = next(_seq_counter)

    # -- introspection -------------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        """The backing array. Treat as read-only."""
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, dtype=self.data.dtype.type)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={list(self.shape)}, dtype={self.data.dtype}{flag})"

    # -- operator sugar ------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __sub__(self, other):
        return add(self, scale(other, -1.0))

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, shape):
        return reshape(self, shape)

    def transpose_last_two(self):
        return transpose_last_two(self)


def _result(kind: str, data: np.ndarray, parents: tuple[Tensor, ...], vjp) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NumericError(f"{kind} produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = any(p.requires_grad for p in parents)
    out.grad = None
    out.trainable = False
    out.op = kind if out.requires_grad else None
    out._parents = parents if out.requires_grad else ()
    out._vjp = vjp if out.requires_grad else None
    out._seq = next(_seq_counter)
    return out


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_same_dtype(kind: str, *tensors: Tensor) -> None:
    dtypes = {t.data.dtype for t in tensors}
    if len(dtypes) > 1:
        raise ContractError(f"{kind}: mixed dtypes {sorted(map(str, dtypes))}")


def _check_leading_broadcast(kind: str, a: np.ndarray, b: np.ndarray) -> None:
    """Elementwise operands may differ only by extra leading batch dims."""
    small, big = (a, b) if a.ndim <= b.ndim else (b, a)
    if small.ndim == big.ndim:
        if small.shape != big.shape:
            raise ShapeError(f"{kind}: shapes {a.shape} and {b.shape} must match")
    elif small.ndim > 0 and big.shape[big.ndim - small.ndim:] != small.shape:
        raise ShapeError(
            f"{kind}: {small.shape} does not match the trailing dims of {big.shape}"
        )


def _sum_to_shape(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce the extra leading dims a broadcast introduced."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    return g.sum(axis=tuple(range(extra)))


# -- primitives ---------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same_dtype("matmul", a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-D, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dims differ, {a.shape} @ {b.shape}")
    la, lb = a.shape[:-2], b.shape[:-2]
    if la != lb and la != () and lb != ():
        raise ShapeError(f"matmul: leading batch dims differ, {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def vjp(g):
        ga = _sum_to_shape(np.matmul(g, np.swapaxes(bd, -1, -2)), a.shape)
        gb = _sum_to_shape(np.matmul(np.swapaxes(ad, -1, -2), g), b.shape)
        return ga, gb

    return _result("matmul", np.matmul(ad, bd), (a, b), vjp)


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same_dtype("add", a, b)
    _check_leading_broadcast("add", a.data, b.data)

    def vjp(g):
        return _sum_to_shape(g, a.shape), _sum_to_shape(g, b.shape)

    return _result("add", a.data + b.data, (a, b), vjp)


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same_dtype("mul", a, b)
    _check_leading_broadcast("mul", a.data, b.data)
    ad, bd = a.data, b.data

    def vjp(g):
        return _sum_to_shape(g * bd, a.shape), _sum_to_shape(g * ad, b.shape)

    return _result("mul", ad * bd, (a, b), vjp)


def scale(a: Tensor, c: float) -> Tensor:
    a = _as_tensor(a)
    c = float(c)

    def vjp(g):
        return (g * c,)

    return _result("scale", a.data * a.data.dtype.type(c), (a,), vjp)


def transpose_last_two(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    if a.ndim < 2:
        raise ShapeError(f"transpose_last_two: needs at least 2 dims, got {a.shape}")

    def vjp(g):
        return (np.swapaxes(g, -1, -2),)

    return _result("transpose_last_two", np.swapaxes(a.data, -1, -2), (a,), vjp)


def reshape(a: Tensor, shape) -> Tensor:
    a = _as_tensor(a)
    shape = tuple(int(s) for s in shape)
    try:
        out = a.data.reshape(shape)
    except ValueError as e:
        raise ShapeError(f"reshape: {a.shape} -> {shape}: {e}") from None
    old = a.shape

    def vjp(g):
        return (g.reshape(old),)

    return _result("reshape", out, (a,), vjp)


def slice_last_dim(a: Tensor, start: int, stop: int) -> Tensor:
    a = _as_tensor(a)
    d = a.shape[-1] if a.ndim else 0
    if not (0 <= start < stop <= d):
        raise ShapeError(f"slice_last_dim: [{start}:{stop}] out of range for last dim {d}")

    def vjp(g):
        full = np.zeros(a.shape, dtype=g.dtype)
        full[..., start:stop] = g
        return (full,)

    return _result("slice_last_dim", a.data[..., start:stop], (a,), vjp)


def concat_last_dim(tensors) -> Tensor:
    tensors = tuple(_as_tensor(t) for t in tensors)
    if not tensors:
        raise ShapeError("concat_last_dim: no inputs")
    _check_same_dtype("concat_last_dim", *tensors)
    lead = tensors[0].shape[:-1]
    for t in tensors:
        if t.shape[:-1] != lead:
            raise ShapeError(
                f"concat_last_dim: leading dims differ, {t.shape} vs {tensors[0].shape}"
            )
    widths = [t.shape[-1] for t in tensors]
    offsets = np.cumsum([0] + widths)

    def vjp(g):
        return tuple(g[..., offsets[i]:offsets[i + 1]] for i in range(len(tensors)))

    return _result("concat_last_dim", np.concatenate([t.data for t in tensors], axis=-1), tensors, vjp)


def embedding_lookup(table: Tensor, ids: np.ndarray) -> Tensor:
    table = _as_tensor(table)
    ids = np.asarray(ids)
    if table.ndim != 2:
        raise ShapeError(f"embedding_lookup: table must be 2-D, got {table.shape}")
    if not np.issubdtype(ids.dtype, np.integer):
        raise ShapeError("embedding_lookup: ids must be integers")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(
            f"embedding_lookup: id out of range [0, {table.shape[0]}) in lookup"
        )

    def vjp(g):
        gt = np.zeros(table.shape, dtype=g.dtype)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return _result("embedding_lookup", table.data[ids], (table,), vjp)


def softmax_last_dim(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        inner = (g * s).sum(axis=-1, keepdims=True)
        return (s * (g - inner),)

    return _result("softmax_last_dim", s, (a,), vjp)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def silu(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    sig = _sigmoid(a.data)
    ad = a.data

    def vjp(g):
        return (g * (sig + ad * sig * (1.0 - sig)),)

    return _result("silu", ad * sig, (a,), vjp)


def rms_normalize(x: Tensor, gain: Tensor) -> Tensor:
    """x / sqrt(mean(x^2, last) + eps), scaled elementwise by a learnable gain."""
    x, gain = _as_tensor(x), _as_tensor(gain)
    _check_same_dtype("rms_normalize", x, gain)
    if gain.ndim != 1 or x.ndim < 1 or gain.shape[0] != x.shape[-1]:
        raise ShapeError(
            f"rms_normalize: gain {gain.shape} must match last dim of {x.shape}"
        )
    xd, gd = x.data, gain.data
    d = xd.shape[-1]
    inv = 1.0 / np.sqrt(np.mean(xd * xd, axis=-1, keepdims=True) + xd.dtype.type(EPS_NORM))

    def vjp(g):
        gx = gd * g * inv - xd * (inv ** 3 / d) * np.sum(g * gd * xd, axis=-1, keepdims=True)
        ggain = np.sum(
            (g * xd * inv).reshape(-1, d), axis=0
        ) if xd.ndim > 1 else g * xd.reshape(-1) * inv
        return gx.astype(xd.dtype, copy=False), ggain.astype(gd.dtype, copy=False)

    return _result("rms_normalize", xd * inv * gd, (x, gain), vjp)


def cross_entropy_mean(logits: Tensor, targets: np.ndarray, mask: np.ndarray | None = None) -> Tensor:
    """Mean negative log-likelihood over (optionally masked) positions."""
    logits = _as_tensor(logits)
    targets = np.asarray(targets)
    if logits.ndim < 2:
        raise ShapeError(f"cross_entropy_mean: logits must be at least 2-D, got {logits.shape}")
    if targets.shape != logits.shape[:-1]:
        raise ShapeError(
            f"cross_entropy_mean: targets {targets.shape} must match {logits.shape[:-1]}"
        )
    if not np.issubdtype(targets.dtype, np.integer):
        raise ShapeError("cross_entropy_mean: targets must be integers")
    v = logits.shape[-1]
    if targets.size and (targets.min() < 0 or targets.max() >= v):
        raise ShapeError(f"cross_entropy_mean: target id out of range [0, {v})")
    flat = logits.data.reshape(-1, v)
    tflat = targets.reshape(-1)
    if mask is None:
        mflat = np.ones(tflat.shape, dtype=bool)
    else:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != targets.shape:
            raise ShapeError(f"cross_entropy_mean: mask {mask.shape} must match targets {targets.shape}")
        mflat = mask.reshape(-1)
    n = int(mflat.sum())
    if n == 0:
        raise ShapeError("cross_entropy_mean: mask excludes every position")
    m = flat.max(axis=-1, keepdims=True)
    e = np.exp(flat - m)
    lse = np.log(e.sum(axis=-1)) + m.reshape(-1)
    ll = flat[np.arange(flat.shape[0]), tflat] - lse
    loss = -(ll[mflat].sum() / n)
    probs = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        gflat = probs.copy()
        gflat[np.arange(flat.shape[0]), tflat] -= 1.0
        gflat *= (mflat / n).reshape(-1, 1)
        return ((float(g) * gflat).reshape(logits.shape).astype(flat.dtype, copy=False),)

    return _result("cross_entropy_mean", np.asarray(loss, dtype=flat.dtype), (logits,), vjp)


def masked_fill(a: Tensor, mask: np.ndarray, value: float) -> Tensor:
    a = _as_tensor(a)
    mask = np.asarray(mask, dtype=bool)
    _check_leading_broadcast("masked_fill", a.data, mask)
    if mask.ndim > a.ndim:
        raise ShapeError(f"masked_fill: mask {mask.shape} has more dims than input {a.shape}")
    value = a.data.dtype.type(value)
    if not np.isfinite(value):
        raise NumericError("masked_fill: fill value must be finite")

    def vjp(g):
        return (np.where(mask, 0.0, g).astype(g.dtype, copy=False),)

    return _result("masked_fill", np.where(mask, value, a.data), (a,), vjp)


_PRIMITIVES = {
    "matmul": lambda inputs, **kw: matmul(*inputs),
    "add": lambda inputs, **kw: add(*inputs),
    "mul": lambda inputs, **kw: mul(*inputs),
    "scale": lambda inputs, **kw: scale(inputs[0], kw["c"]),
    "transpose_last_two": lambda inputs, **kw: transpose_last_two(inputs[0]),
    "reshape": lambda inputs, **kw: reshape(inputs[0], kw["shape"]),
    "slice_last_dim": lambda inputs, **kw: slice_last_dim(inputs[0], kw["start"], kw["stop"]),
    "concat_last_dim": lambda inputs, **kw: concat_last_dim(inputs),
    "embedding_lookup": lambda inputs, **kw: embedding_lookup(inputs[0], kw["ids"]),
    "softmax_last_dim": lambda inputs, **kw: softmax_last_dim(inputs[0]),
    "silu": lambda inputs, **kw: silu(inputs[0]),
    "rms_normalize": lambda inputs, **kw: rms_normalize(*inputs),
    "cross_entropy_mean": lambda inputs, **kw: cross_entropy_mean(
        inputs[0], kw["targets"], kw.get("mask")
    ),
    "masked_fill": lambda inputs, **kw: masked_fill(inputs[0], kw["mask"], kw["value"]),
}


def apply_primitive(kind: str, inputs, **attrs) -> Tensor:
    """Uniform dispatch over the primitive set (mostly useful for test sweeps)."""
    if kind not in _PRIMITIVES:
        raise ContractError(f"unknown primitive kind {kind!r}")
    return _PRIMITIVES[kind](list(inputs), **attrs)


# -- reverse mode -------------------------------------------------------------


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(t) into t.grad for every requires_grad tensor.

    Repeated calls on the same loss add another copy of the gradient.
    """
    if not isinstance(loss, Tensor) or loss.data.size != 1:
        raise ContractError("backward: loss must be a scalar tensor")
    if not loss.requires_grad:
        raise ContractError("backward: loss does not require grad (detached graph)")

    nodes: dict[int, Tensor] = {}
    stack = [loss]
    while stack:
        t = stack.pop()
        if id(t) not in nodes:
            nodes[id(t)] = t
            stack.extend(t._parents)
    order = sorted(nodes.values(), key=lambda t: t._seq, reverse=True)

    flowing: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape, dtype=loss.data.dtype)}
    for t in order:
        g = flowing.get(id(t))
        if g is None or t._vjp is None:
            continue
        contribs = t._vjp(g)
        for parent, c in zip(t._parents, contribs):
            if c is None or not parent.requires_grad:
                continue
            pid = id(parent)
            prev = flowing.get(pid)
            flowing[pid] = c if prev is None else prev + c

    for t in nodes.values():
        if not t.requires_grad:
            continue
        g = flowing.get(id(t))
        if g is None:
            continue
        if not np.all(np.isfinite(g)):
            raise NumericError(f"backward produced non-finite gradient (op {t.op!r})")
        t.grad = g if t.grad is None else t.grad + g
