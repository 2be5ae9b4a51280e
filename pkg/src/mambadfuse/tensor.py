"""Dense tensors with a define-by-run tape for reverse-mode gradients.

Only the op set the fusion network needs is provided. Every op checks that its
output is finite; a NaN or Inf raises ``FloatingPointError`` naming the op.
"""
from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import expit

_DTYPES = {"fp64": np.float64, "fp32": np.float32}


class _State(threading.local):
    def __init__(self) -> None:
        self.tape: OpTape = OpTape()
        self.grad_enabled = True
        self.default_dtype = np.float64
        self.check_finite = True


@dataclass
class TapeRecord:
    op: str
    out: "Tensor"
    inputs: tuple["Tensor", ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class OpTape:
    """Ordered op records since the last backward pass (one per thread)."""

    records: list[TapeRecord] = field(default_factory=list)

    def clear(self) -> None:
        self.records.clear()

    def __len__(self) -> int:
        return len(self.records)


_state = _State()


def get_tape() -> OpTape:
    return _state.tape


def dtype_for(precision: str) -> type:
    try:
        return _DTYPES[precision]
    except KeyError:
        raise ValueError(f"unknown precision {precision!r}; expected one of {sorted(_DTYPES)}")


@contextlib.contextmanager
def no_grad():
    prev = _state.grad_enabled
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


@contextlib.contextmanager
def precision(name: str):
    """Set the default dtype for tensors created from Python data."""
    prev = _state.default_dtype
    _state.default_dtype = dtype_for(name)
    try:
        yield
    finally:
        _state.default_dtype = prev


@contextlib.contextmanager
def finite_checks(enabled: bool):
    prev = _state.check_finite
    _state.check_finite = enabled
    try:
        yield
    finally:
        _state.check_finite = prev


class Tensor:
    """An n-d float array with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "name", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(_state.default_dtype)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    def backward(self) -> None:
        backward(self)

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype) if dtype is not None else x)


def _record(op: str, out_data: np.ndarray, inputs: Iterable[Tensor], backward_fn) -> Tensor:
    if _state.check_finite and not np.all(np.isfinite(out_data)):
        raise FloatingPointError(f"non-finite values produced by op {op!r}")
    inputs = tuple(inputs)
    needs = _state.grad_enabled and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs)
    if needs:
        _state.tape.records.append(TapeRecord(op, out, inputs, backward_fn))
    return out


def backward(loss: Tensor) -> None:
    """Replay the tape in reverse, writing d loss / d t into ``t.grad``.

    Gradients accumulate into existing ``grad`` buffers of leaf tensors. The
    tape is cleared afterwards.
    """
    tape = _state.tape
    if loss.size != 1:
        tape.clear()
        raise ValueError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        tape.clear()
        raise ValueError("loss does not depend on any tensor that requires grad")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    produced = set()
    try:
        for rec in reversed(tape.records):
            g = grads.pop(id(rec.out), None)
            produced.add(id(rec.out))
            if g is None:
                continue
            in_grads = rec.backward(g)
            for t, gi in zip(rec.inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        # whatever remains belongs to leaves
        leaves = {}
        for rec in tape.records:
            for t in rec.inputs:
                if t.requires_grad and id(t) not in produced:
                    leaves[id(t)] = t
        for key, t in leaves.items():
            g = grads.get(key)
            if g is None:
                continue
            g = np.asarray(g, dtype=t.dtype).reshape(t.shape)
            t.grad = g if t.grad is None else t.grad + g
    finally:
        tape.clear()


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _record("add", a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _record("sub", a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _record("mul", a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data / b.data
    return _record("div", out, (a, b),
                   lambda g: (_unbroadcast(g / b.data, a.shape),
                              _unbroadcast(-g * out / b.data, b.shape)))


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, as_tensor(b, like=a)
    b = as_tensor(b)
    return as_tensor(a, like=b), b


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _record("exp", out, (x,), lambda g: (g * out,))


def phi1(z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(exp(z) - 1) / z and its derivative, with the z -> 0 limits 1 and 1/2."""
    small = np.abs(z) < 1e-6
    if small.any():
        zs = np.where(small, 1.0, z)
        em1 = np.expm1(zs)
        val = np.where(small, 1.0 + z / 2.0, em1 / zs)
        dval = np.where(small, 0.5 + z / 3.0, (em1 + 1.0 - val) / zs)
    else:
        em1 = np.expm1(z)
        val = em1 / z
        # d/dz [(e^z - 1)/z] = (e^z - phi1) / z
        dval = (em1 + 1.0 - val) / z
    return val.astype(z.dtype, copy=False), dval.astype(z.dtype, copy=False)


def expm1_over(x: Tensor) -> Tensor:
    """phi1(z) = (exp(z) - 1) / z with phi1(0) = 1, stable near zero."""
    val, dval = phi1(x.data)
    return _record("expm1_over", val, (x,), lambda g: (g * dval,))


def log(x: Tensor) -> Tensor:
    return _record("log", np.log(x.data), (x,), lambda g: (g / x.data,))


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return _record("sqrt", out, (x,), lambda g: (g / (2.0 * out),))


def square(x: Tensor) -> Tensor:
    return _record("square", x.data * x.data, (x,), lambda g: (2.0 * g * x.data,))


def absolute(x: Tensor) -> Tensor:
    return _record("abs", np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),))


def maximum(a, b) -> Tensor:
    a, b = _pair(a, b)
    pick_a = a.data >= b.data
    out = np.where(pick_a, a.data, b.data)
    return _record("maximum", out, (a, b),
                   lambda g: (_unbroadcast(np.where(pick_a, g, 0.0), a.shape),
                              _unbroadcast(np.where(pick_a, 0.0, g), b.shape)))


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    inside = (x.data >= lo) & (x.data <= hi)
    return _record("clamp", np.clip(x.data, lo, hi), (x,), lambda g: (np.where(inside, g, 0.0),))


def where(mask: np.ndarray, a: Tensor, b: Tensor) -> Tensor:
    """Select ``a`` where mask is true, else ``b``. Pure routing, no arithmetic."""
    a, b = _pair(a, b)
    mask = np.asarray(mask, dtype=bool)
    out = np.where(mask, a.data, b.data)
    return _record("where", out, (a, b),
                   lambda g: (_unbroadcast(np.where(mask, g, 0.0), a.shape),
                              _unbroadcast(np.where(mask, 0.0, g), b.shape)))


def sigmoid_np(x: np.ndarray) -> np.ndarray:
    return expit(x)


def silu(x: Tensor) -> Tensor:
    s = sigmoid_np(x.data)
    return _record("silu", x.data * s, (x,), lambda g: (g * (s * (1.0 + x.data * (1.0 - s))),))


def leaky_relu(x: Tensor, slope: float = 0.01) -> Tensor:
    pos = x.data > 0
    return _record("leaky_relu", np.where(pos, x.data, slope * x.data), (x,),
                   lambda g: (np.where(pos, g, slope * g),))


def softplus(x: Tensor) -> Tensor:
    d = x.data
    out = np.maximum(d, 0.0) + np.log1p(np.exp(-np.abs(d)))
    return _record("softplus", out, (x,), lambda g: (g * sigmoid_np(d),))


# ---------------------------------------------------------------- reductions

def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape),)

    return _record("sum", np.asarray(out), (x,), bw)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = x.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([x.shape[a] for a in axes]))
    return mul(tsum(x, axis, keepdims), 1.0 / n)


# ---------------------------------------------------------------- shape ops

def reshape(x: Tensor, shape) -> Tensor:
    return _record("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes) if axes else tuple(reversed(range(x.ndim)))
    inv = np.argsort(axes)
    return _record("transpose", x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def getitem(x: Tensor, idx) -> Tensor:
    def bw(g):
        full = np.zeros_like(x.data)
        if _has_advanced(idx):
            np.add.at(full, idx, g)
        else:
            full[idx] = g
        return (full,)

    return _record("getitem", np.ascontiguousarray(x.data[idx]), (x,), bw)


def _has_advanced(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def flip(x: Tensor, axis: int) -> Tensor:
    return _record("flip", np.flip(x.data, axis).copy(), (x,), lambda g: (np.flip(g, axis),))


def concat(xs: Sequence[Tensor], axis: int) -> Tensor:
    xs = list(xs)
    sizes = np.cumsum([t.shape[axis] for t in xs])[:-1]
    return _record("concat", np.concatenate([t.data for t in xs], axis=axis), xs,
                   lambda g: tuple(np.split(g, sizes, axis=axis)))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    def bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _record("matmul", a.data @ b.data, (a, b), bw)


def einsum(spec: str, a: Tensor, b: Tensor) -> Tensor:
    """Two-operand einsum; every index of each operand must appear in the others."""
    ins, out = spec.split("->")
    sa, sb = ins.split(",")

    def bw(g):
        ga = np.einsum(f"{out},{sb}->{sa}", g, b.data)
        gb = np.einsum(f"{out},{sa}->{sb}", g, a.data)
        return ga, gb

    return _record("einsum", np.einsum(spec, a.data, b.data), (a, b), bw)
