"""Shared test oracles: finite-difference gradient checking and friends."""

from __future__ import annotations

from typing import Callable

import numpy as np

from dtmerge import autodiff as ad
from dtmerge.autodiff import Tensor

FD_H = 1e-3


def fd_gradient(loss_fn: Callable[..., float], arrays: dict[str, np.ndarray], wrt: str) -> np.ndarray:
    """Central finite differences of loss_fn w.r.t. arrays[wrt], h = 1e-3.

    loss_fn receives the arrays dict and returns a python float; it must not
    mutate its inputs. Entirely independent of the reverse-mode path.
    """
    base = {k: v.copy() for k, v in arrays.items()}
    x = base[wrt]
    grad = np.zeros(x.shape, dtype=np.float64)
    flat_x = x.reshape(-1)
    flat_g = grad.reshape(-1)
    for i in range(flat_x.size):
        orig = flat_x[i]
        flat_x[i] = orig + FD_H
        fp = loss_fn(base)
        flat_x[i] = orig - FD_H
        fm = loss_fn(base)
        flat_x[i] = orig
        flat_g[i] = (fp - fm) / (2.0 * FD_H)
    return grad


def max_rel_error(analytic: np.ndarray, reference: np.ndarray) -> float:
    """max |a - b| / max(|a|, |b|, 1): relative above 1, absolute below."""
    a = np.asarray(analytic, dtype=np.float64)
    b = np.asarray(reference, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1.0)
    return float((np.abs(a - b) / denom).max())


def check_op_gradients(case_fn, seed: int, tol: float = 1e-3) -> float:
    """Run one FD instance: build inputs, compare backward vs FD per input.

    case_fn(rng) must return (arrays, loss_fn) where loss_fn(arrays) builds
    the graph from Tensor-wrapped arrays and returns the scalar loss Tensor.
    Returns the worst relative error over all differentiable inputs.
    """
    rng = np.random.default_rng(seed)
    arrays, loss_fn = case_fn(rng)
    params = {k: Tensor(v, requires_grad=True) for k, v in arrays.items()}
    loss = loss_fn({k: p for k, p in params.items()})
    grads = ad.backward(loss, params)

    def scalar_loss(arrs: dict[str, np.ndarray]) -> float:
        wrapped = {k: Tensor(v) for k, v in arrs.items()}
        return float(loss_fn(wrapped).data)

    worst = 0.0
    for name in arrays:
        fd = fd_gradient(scalar_loss, arrays, name)
        err = max_rel_error(grads[name], fd)
        worst = max(worst, err)
        assert err < tol, f"op gradient mismatch for input {name!r} (seed {seed}): {err:.2e}"
    return worst


def brute_force_attention(x, wq, bq, wk, bk, wv, bv, wo, bo):
    """Naive per-position causal attention oracle in float64 loops."""
    x = np.asarray(x, dtype=np.float64)
    n, d = x.shape
    q = x @ wq + bq
    k = x @ wk + bk
    v = x @ wv + bv
    out = np.zeros((n, d))
    for t in range(n):
        logits = np.array([q[t] @ k[s] / np.sqrt(d) for s in range(t + 1)])
        w = np.exp(logits - logits.max())
        w = w / w.sum()
        mix = np.zeros(d)
        for s in range(t + 1):
            mix += w[s] * v[s]
        out[t] = mix @ wo + bo
    return out
