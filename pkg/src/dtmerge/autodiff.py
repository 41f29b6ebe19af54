"""Dense float32 tensors with reverse-mode automatic differentiation.

The engine is a tape-free computation graph: every op returns a new Tensor
holding references to its parents and a closure that propagates gradients.
`backward(loss, params)` walks the graph once in reverse topological order
and returns a gradient map; a graph can be consumed only once.

All tensor data is float32 and row-major. Forward ops validate that their
outputs are finite unless finite checks are globally disabled (they cost a
memory pass per op, which matters in tight training loops only for
profiling; the default is on).
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from scipy.special import erf

F32 = np.float32

_FINITE_CHECKS = True


def finite_checks_enabled() -> bool:
    return _FINITE_CHECKS


@contextmanager
def finite_checks(enabled: bool):
    """Temporarily enable/disable per-op output finiteness validation."""
    global _FINITE_CHECKS
    prev = _FINITE_CHECKS
    _FINITE_CHECKS = enabled
    try:
        yield
    finally:
        _FINITE_CHECKS = prev


class ShapeMismatch(ValueError):
    """Raised when operand shapes are incompatible; carries both shapes."""

    def __init__(self, op: str, *shapes: tuple):
        self.op = op
        self.shapes = shapes
        super().__init__(f"{op}: incompatible shapes {' vs '.join(str(s) for s in shapes)}")


class NonFiniteValue(FloatingPointError):
    """Raised when an op produces (or receives) NaN/Inf values."""


class GraphConsumed(RuntimeError):
    """Raised when backward is called twice through the same loss node."""


class MissingGradient(KeyError):
    """Raised by the optimizer when an unfrozen parameter has no gradient."""


def _check_finite(arr: np.ndarray, op: str) -> None:
    # a single read-only reduction: NaN/Inf both propagate into the sum
    if _FINITE_CHECKS and not np.isfinite(arr.sum(dtype=np.float64)):
        raise NonFiniteValue(f"{op}: non-finite values in output of shape {arr.shape}")


class Tensor:
    """Immutable float32 array node in a computation graph."""

    __slots__ = ("data", "requires_grad", "_parents", "_backward", "_consumed", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=F32)
        _check_finite(arr, "tensor")
        self.data = arr
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray, dict], None] | None = None
        self._consumed = False
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag})"

    # operator sugar; all graph building goes through module-level ops
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: Iterable[Tensor], backward, op: str) -> Tensor:
    _check_finite(data, op)
    parents = tuple(parents)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = any(p.requires_grad for p in parents)
    out._parents = parents if out.requires_grad else ()
    out._backward = backward if out.requires_grad else None
    out._consumed = False
    out.name = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum grad over axes that were broadcast to reach `grad.shape`."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return np.ascontiguousarray(grad.astype(F32, copy=False))


def _accum(store: dict, t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    key = id(t)
    if key in store:
        store[key] = store[key] + g
    else:
        store[key] = g


# ---------------------------------------------------------------------------
# elementwise / shape ops
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        data = a.data + b.data
    except ValueError:
        raise ShapeMismatch("add", a.shape, b.shape) from None

    def backward(g, store):
        _accum(store, a, _unbroadcast(g, a.shape))
        _accum(store, b, _unbroadcast(g, b.shape))

    return _node(data, (a, b), backward, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    try:
        data = a.data - b.data
    except ValueError:
        raise ShapeMismatch("sub", a.shape, b.shape) from None

    def backward(g, store):
        _accum(store, a, _unbroadcast(g, a.shape))
        _accum(store, b, _unbroadcast(-g, b.shape))

    return _node(data, (a, b), backward, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        data = a.data * b.data
    except ValueError:
        raise ShapeMismatch("mul", a.shape, b.shape) from None

    def backward(g, store):
        _accum(store, a, _unbroadcast(g * b.data, a.shape))
        _accum(store, b, _unbroadcast(g * a.data, b.shape))

    return _node(data, (a, b), backward, "mul")


def div(a: Tensor, b: Tensor) -> Tensor:
    try:
        data = a.data / b.data
    except ValueError:
        raise ShapeMismatch("div", a.shape, b.shape) from None

    def backward(g, store):
        _accum(store, a, _unbroadcast(g / b.data, a.shape))
        _accum(store, b, _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _node(data, (a, b), backward, "div")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    data = a.data * F32(c)

    def backward(g, store):
        _accum(store, a, g * F32(c))

    return _node(data, (a,), backward, "scale")


def sqrt(a: Tensor) -> Tensor:
    data = np.sqrt(a.data)

    def backward(g, store):
        _accum(store, a, g * (F32(0.5) / data))

    return _node(data, (a,), backward, "sqrt")


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    data = a.data.reshape(shape)

    def backward(g, store):
        _accum(store, a, g.reshape(a.shape))

    return _node(data, (a,), backward, "reshape")


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    data = np.ascontiguousarray(a.data.transpose(axes))
    inv = tuple(np.argsort(axes))

    def backward(g, store):
        _accum(store, a, np.ascontiguousarray(g.transpose(inv)))

    return _node(data, (a,), backward, "transpose")


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g, store):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            _accum(store, t, np.ascontiguousarray(piece))

    return _node(data, tensors, backward, "concat")


def getitem(a: Tensor, key) -> Tensor:
    data = np.ascontiguousarray(a.data[key])

    def backward(g, store):
        full = np.zeros(a.shape, dtype=F32)
        full[key] = g
        _accum(store, a, full)

    return _node(data, (a,), backward, "getitem")


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = a.data.sum(axis=axis, keepdims=keepdims, dtype=F32)

    def backward(g, store):
        g = np.asarray(g, dtype=F32)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(store, a, np.broadcast_to(g, a.shape).astype(F32, copy=True))

    return _node(data, (a,), backward, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.size
    else:
        count = a.shape[axis]
    return scale(sum_(a, axis=axis, keepdims=keepdims), 1.0 / count)


def max_(a: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    data = a.data.max(axis=axis, keepdims=keepdims)
    argmax = a.data.argmax(axis=axis)

    def backward(g, store):
        full = np.zeros(a.shape, dtype=F32)
        g_exp = g if keepdims else np.expand_dims(g, axis)
        np.put_along_axis(full, np.expand_dims(argmax, axis), np.asarray(g_exp, dtype=F32), axis)
        _accum(store, a, full)

    return _node(data, (a,), backward, "max")


# ---------------------------------------------------------------------------
# linear algebra and neural-net ops
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim < 2 or b.data.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch("matmul", a.shape, b.shape)

    if a.data.ndim > 2 and b.data.ndim == 2:
        # stacked @ 2D: one large GEMM instead of a gufunc loop over slices
        lead = a.shape[:-1]
        a2 = a.data.reshape(-1, a.shape[-1])
        data = (a2 @ b.data).reshape(*lead, b.shape[-1])

        def backward(g, store):
            g2 = g.reshape(-1, g.shape[-1])
            _accum(store, a, (g2 @ b.data.T).reshape(a.shape))
            _accum(store, b, a2.T @ g2)

        return _node(data, (a, b), backward, "matmul")

    data = a.data @ b.data

    def backward(g, store):
        _accum(store, a, _unbroadcast(g @ b.data.swapaxes(-1, -2), a.shape))
        _accum(store, b, _unbroadcast(a.data.swapaxes(-1, -2) @ g, b.shape))

    return _node(data, (a, b), backward, "matmul")


def relu(a: Tensor) -> Tensor:
    data = np.maximum(a.data, F32(0.0))

    def backward(g, store):
        _accum(store, a, g * (a.data > 0))

    return _node(data, (a,), backward, "relu")


_INV_SQRT2 = F32(1.0 / math.sqrt(2.0))
_INV_SQRT2PI = F32(1.0 / math.sqrt(2.0 * math.pi))


def gelu(a: Tensor) -> Tensor:
    phi = F32(0.5) * (F32(1.0) + erf(a.data * _INV_SQRT2).astype(F32, copy=False))
    data = a.data * phi

    def backward(g, store):
        pdf = np.exp(F32(-0.5) * a.data * a.data) * _INV_SQRT2PI
        _accum(store, a, g * (phi + a.data * pdf))

    return _node(data, (a,), backward, "gelu")


def tanh(a: Tensor) -> Tensor:
    data = np.tanh(a.data)

    def backward(g, store):
        _accum(store, a, g * (F32(1.0) - data * data))

    return _node(data, (a,), backward, "tanh")


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis; rows are nonnegative and sum to 1."""
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=-1, keepdims=True)

    def backward(g, store):
        inner = (g * data).sum(axis=-1, keepdims=True)
        _accum(store, a, data * (g - inner))

    return _node(data, (a,), backward, "softmax")


LAYER_NORM_EPS = 1e-5


def layer_norm(a: Tensor, gamma: Tensor, beta: Tensor) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine.

    Constant inputs map to beta: the epsilon inside the square root keeps
    the zero-variance case finite.
    """
    d = a.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeMismatch("layer_norm", a.shape, gamma.shape, beta.shape)
    mu = a.data.mean(axis=-1, keepdims=True, dtype=F32)
    xc = a.data - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True, dtype=F32)
    inv = 1.0 / np.sqrt(var + F32(LAYER_NORM_EPS))
    xhat = xc * inv
    data = xhat * gamma.data + beta.data

    def backward(g, store):
        lead = tuple(range(g.ndim - 1))
        _accum(store, gamma, np.ascontiguousarray((g * xhat).sum(axis=lead, dtype=F32)))
        _accum(store, beta, np.ascontiguousarray(g.sum(axis=lead, dtype=F32)))
        gx = g * gamma.data
        m1 = gx.mean(axis=-1, keepdims=True, dtype=F32)
        m2 = (gx * xhat).mean(axis=-1, keepdims=True, dtype=F32)
        _accum(store, a, (gx - m1 - xhat * m2) * inv)

    return _node(data, (a, gamma, beta), backward, "layer_norm")


def dropout(a: Tensor, rate: float, seed) -> Tensor:
    """Zero entries with probability `rate`, rescaling survivors by 1/(1-rate).

    `seed` fully determines the mask (ints or sequences of ints accepted),
    so identical seeds reproduce identical masks.
    """
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if rate == 0.0:
        return a
    rng = np.random.default_rng(seed)
    keep = (rng.random(a.shape, dtype=np.float32) >= rate).astype(F32)
    scale_ = F32(1.0 / (1.0 - rate))
    data = a.data * keep * scale_

    def backward(g, store):
        _accum(store, a, g * keep * scale_)

    return _node(data, (a,), backward, "dropout")


def embedding_lookup(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise ShapeMismatch("embedding_lookup", table.shape, ids.shape)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(
            f"embedding_lookup: ids out of range [0, {table.shape[0]}) "
            f"(got min={ids.min()}, max={ids.max()})"
        )
    data = np.ascontiguousarray(table.data[ids])

    def backward(g, store):
        full = np.zeros(table.shape, dtype=F32)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[-1]))
        _accum(store, table, full)

    return _node(data, (table,), backward, "embedding_lookup")


def mse_loss(pred: Tensor, target: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Mean squared error over unmasked elements (mask broadcasts over pred)."""
    if pred.shape != target.shape:
        raise ShapeMismatch("mse_loss", pred.shape, target.shape)
    diff = pred.data - target.data
    if mask is None:
        count = pred.size
        sq = diff * diff
    else:
        mask = np.broadcast_to(np.asarray(mask, dtype=F32), pred.shape)
        count = float(mask.sum())
        if count == 0:
            raise ValueError("mse_loss: mask excludes every element")
        diff = diff * mask
        sq = diff * diff
    data = np.asarray(sq.sum(dtype=np.float64) / count, dtype=F32)

    def backward(g, store):
        base = diff * F32(2.0 / count) * g
        _accum(store, pred, base)
        _accum(store, target, -base)

    return _node(data, (pred, target), backward, "mse_loss")


def cross_entropy_loss(logits: Tensor, targets: np.ndarray, mask: np.ndarray | None = None) -> Tensor:
    """Mean negative log-likelihood of integer targets under softmax(logits).

    logits: [..., V]; targets: integer array of shape logits.shape[:-1];
    mask (same shape as targets) selects the positions that count.
    """
    targets = np.asarray(targets)
    if targets.shape != logits.shape[:-1]:
        raise ShapeMismatch("cross_entropy_loss", logits.shape, targets.shape)
    shifted = logits.data - logits.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    probs = e / e.sum(axis=-1, keepdims=True)
    logp = shifted - np.log(e.sum(axis=-1, keepdims=True))
    picked = np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    if mask is None:
        count = targets.size
        data = np.asarray(-picked.sum(dtype=np.float64) / count, dtype=F32)
        w = None
    else:
        w = np.asarray(mask, dtype=F32)
        count = float(w.sum())
        if count == 0:
            raise ValueError("cross_entropy_loss: mask excludes every position")
        data = np.asarray(-(picked * w).sum(dtype=np.float64) / count, dtype=F32)

    def backward(g, store):
        grad = probs.copy()
        np.put_along_axis(
            grad, targets[..., None],
            np.take_along_axis(grad, targets[..., None], axis=-1) - F32(1.0), axis=-1,
        )
        if w is not None:
            grad *= w[..., None]
        _accum(store, logits, grad * F32(1.0 / count) * g)

    return _node(data, (logits,), backward, "cross_entropy_loss")


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------

def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, params: Mapping[str, Tensor] | None = None):
    """Reverse-mode gradient of a scalar loss.

    Returns {name: grad} for `params` (zeros for parameters the loss does
    not depend on), or {Tensor: grad} for every trainable leaf reached when
    `params` is None. A loss node can be consumed exactly once.
    """
    if loss.size != 1:
        raise ValueError(f"backward expects a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise GraphConsumed("backward already called through this loss node")
    loss._consumed = True

    store: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape, dtype=F32)}
    for node in reversed(_toposort(loss)):
        g = store.pop(id(node), None)
        if g is None or node._backward is None:
            if g is not None and node._parents == () and node.requires_grad:
                store[id(node)] = g  # trainable leaf: keep its gradient
            continue
        node._backward(g, store)

    if params is not None:
        out: dict[str, np.ndarray] = {}
        for name, p in params.items():
            g = store.get(id(p))
            out[name] = np.zeros(p.shape, dtype=F32) if g is None else g.astype(F32, copy=False)
        return out
    leaves: dict[Tensor, np.ndarray] = {}
    for node in _toposort_leaves(loss):
        g = store.get(id(node))
        if g is not None:
            leaves[node] = g.astype(F32, copy=False)
    return leaves


def _toposort_leaves(root: Tensor) -> list[Tensor]:
    return [n for n in _toposort(root) if n._parents == () and n.requires_grad]


# ---------------------------------------------------------------------------
# optimizer: Adam with decoupled weight decay and linear warmup
# ---------------------------------------------------------------------------

@dataclass
class AdamConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-4
    warmup_steps: int = 100


@dataclass
class OptimizerState:
    """Per-parameter first/second moment accumulators plus a step counter."""

    config: AdamConfig
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step_count: int = 0


def optimizer_step(
    params: Mapping[str, Tensor],
    grads: Mapping[str, np.ndarray],
    state: OptimizerState,
    frozen: frozenset[str] | set[str] = frozenset(),
) -> dict[str, Tensor]:
    """One decoupled-weight-decay Adam step.

    Returns a new name->Tensor mapping; frozen entries keep the identical
    Tensor object (bit-invariant), unfrozen entries get fresh tensors.
    """
    cfg = state.config
    state.step_count += 1
    t = state.step_count
    lr_t = cfg.lr * min(1.0, t / cfg.warmup_steps) if cfg.warmup_steps > 0 else cfg.lr
    bc1 = 1.0 - cfg.beta1 ** t
    bc2 = 1.0 - cfg.beta2 ** t

    out: dict[str, Tensor] = {}
    for name, p in params.items():
        if name in frozen:
            out[name] = p
            continue
        if name not in grads:
            raise MissingGradient(f"no gradient supplied for unfrozen parameter {name!r}")
        g = np.asarray(grads[name], dtype=F32)
        if g.shape != p.shape:
            raise ShapeMismatch("optimizer_step", p.shape, g.shape)
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros(p.shape, dtype=F32)
            v = np.zeros(p.shape, dtype=F32)
        m = cfg.beta1 * m + (1.0 - cfg.beta1) * g
        v = cfg.beta2 * v + (1.0 - cfg.beta2) * (g * g)
        state.m[name] = m
        state.v[name] = v
        update = (m / bc1) / (np.sqrt(v / bc2) + cfg.eps) + cfg.weight_decay * p.data
        new = Tensor(p.data - F32(lr_t) * update.astype(F32, copy=False), requires_grad=True, name=p.name)
        out[name] = new
    return out
