"""Central finite-difference checks against tape gradients."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward, get_tape, no_grad


def numerical_grad(fn: Callable[[], Tensor], t: Tensor, step: float = 1e-5,
                   max_entries: int | None = None, rng: np.random.Generator | None = None):
    """Central differences of scalar ``fn()`` w.r.t. entries of ``t`` (in place perturbation).

    Returns (flat indices, estimates). With ``max_entries`` a random subset is probed.
    """
    flat = t.data.reshape(-1)
    idx = np.arange(flat.size)
    if max_entries is not None and flat.size > max_entries:
        rng = rng or np.random.default_rng(0)
        idx = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
    est = np.empty(idx.size)
    with no_grad():
        for k, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + step
            fp = float(fn().data)
            flat[i] = orig - step
            fm = float(fn().data)
            flat[i] = orig
            est[k] = (fp - fm) / (2 * step)
    return idx, est


def max_rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """max |a - n| / max(|a|, |n|, floor) over entries."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0


def check_gradients(fn: Callable[[], Tensor], tensors: Sequence[Tensor], step: float = 1e-5,
                    max_entries: int | None = 24, seed: int = 0) -> float:
    """Largest norm-wise relative error between tape and finite-difference gradients.

    For each tensor the probed entries give max|a - n| / max(max|a|, max|n|).
    Elementwise ratios are not used: entries many orders below the tensor's
    largest gradient sit under the cancellation noise of the central
    difference (about eps * |f| / step) and would report spurious failures.
    """
    for t in tensors:
        t.grad = None
        t.requires_grad = True
    get_tape().clear()
    loss = fn()
    backward(loss)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for t in tensors:
        analytic = np.zeros(t.shape) if t.grad is None else t.grad
        idx, est = numerical_grad(fn, t, step=step, max_entries=max_entries, rng=rng)
        a = analytic.reshape(-1)[idx]
        scale = max(np.max(np.abs(a)), np.max(np.abs(est)), 1e-300)
        worst = max(worst, float(np.max(np.abs(a - est))) / scale)
    return worst


def check_directional(fn: Callable[[], Tensor], tensors: Sequence[Tensor], n_dirs: int = 3,
                      step: float = 1e-5, seed: int = 0) -> float:
    """Compare <grad, v> with a central difference along random unit directions v.

    One pair of evaluations per direction checks every tensor at once, which
    suits deep compositions where per-entry probing is slow and individual
    gradients can be tiny.
    """
    for t in tensors:
        t.grad = None
        t.requires_grad = True
    get_tape().clear()
    backward(fn())
    grads = [np.zeros(t.shape) if t.grad is None else t.grad for t in tensors]
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_dirs):
        vs = [rng.normal(size=t.shape) for t in tensors]
        norm = np.sqrt(sum(float(np.sum(v * v)) for v in vs))
        vs = [v / norm for v in vs]
        analytic = sum(float(np.sum(g * v)) for g, v in zip(grads, vs))
        base = [t.data.copy() for t in tensors]
        with no_grad():
            for t, b, v in zip(tensors, base, vs):
                t.data = b + step * v
            fp = float(fn().data)
            for t, b, v in zip(tensors, base, vs):
                t.data = b - step * v
            fm = float(fn().data)
        for t, b in zip(tensors, base):
            t.data = b
        numeric = (fp - fm) / (2 * step)
        worst = max(worst, abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-300))
    return worst
