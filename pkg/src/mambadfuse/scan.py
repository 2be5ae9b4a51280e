"""Selective state-space scan with input-dependent B, C and step size.

The recurrence ``h_t = a_bar_t * h_{t-1} + b_bar_t * x_t`` (diagonal state
matrix, so everything is elementwise over (channel, state)) is evaluated either
token by token (:func:`scan_sequential`, the reference) or in blocks
(:func:`scan_chunked`): a local scan runs inside every block at once, then the
carry from each block is folded into the next through the block's running
product of ``a_bar``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .functional import linear
from .tensor import Tensor, _record


@dataclass
class LinearParams:
    weight: Tensor
    bias: Tensor | None = None

    def __call__(self, x: Tensor) -> Tensor:
        return linear(x, self.weight, self.bias)


@dataclass
class SsmParams:
    """Per-block SSM parameters. ``A = -exp(a_log)`` has shape (C', D)."""

    a_log: Tensor
    d_skip: Tensor
    proj_b: LinearParams
    proj_c: LinearParams
    proj_delta: LinearParams

    @property
    def inner(self) -> int:
        return self.a_log.shape[0]

    @property
    def d_state(self) -> int:
        return self.a_log.shape[1]

    def a(self) -> Tensor:
        return T.exp(self.a_log) * -1.0


@dataclass
class DiscretizedParams:
    """a_bar, b_bar: (B, N, C', D). c: (B, N, D), broadcast over C' when contracted."""

    a_bar: Tensor
    b_bar: Tensor
    c: Tensor | None = None


def _uniform(rng: np.random.Generator, bound: float, shape, dtype) -> np.ndarray:
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def init_ssm_params(inner: int, d_state: int, rng: np.random.Generator, dtype=np.float64,
                    dt_min: float = 1e-3, dt_max: float = 1e-1) -> SsmParams:
    if d_state < 1 or inner < 1:
        raise ValueError(f"need inner >= 1 and d_state >= 1, got {inner}, {d_state}")
    a_log = np.log(np.tile(np.arange(1, d_state + 1, dtype=np.float64), (inner, 1)))
    bound = 1.0 / math.sqrt(inner)
    dt = np.exp(rng.uniform(math.log(dt_min), math.log(dt_max), size=inner))
    dt_bias = dt + np.log(-np.expm1(-dt))  # inverse softplus

    def p(arr):
        return Tensor(np.asarray(arr, dtype=dtype), requires_grad=True)

    return SsmParams(
        a_log=p(a_log),
        d_skip=p(np.ones(inner)),
        proj_b=LinearParams(p(_uniform(rng, bound, (d_state, inner), dtype))),
        proj_c=LinearParams(p(_uniform(rng, bound, (d_state, inner), dtype))),
        proj_delta=LinearParams(p(_uniform(rng, bound, (inner, inner), dtype)), p(dt_bias)),
    )


def derive_params(x: Tensor, params: SsmParams) -> tuple[Tensor, Tensor, Tensor]:
    """Input-dependent (b, c, delta): shapes (B,N,D), (B,N,D), (B,N,C')."""
    if x.shape[-1] != params.inner:
        raise ValueError(f"derive_params: x has {x.shape[-1]} channels, params expect {params.inner}")
    b = params.proj_b(x)
    c = params.proj_c(x)
    delta = T.softplus(params.proj_delta(x))
    return b, c, delta


def discretize(a: Tensor, b: Tensor, delta: Tensor, zoh: bool = True) -> DiscretizedParams:
    """Zero-order hold for a diagonal state matrix.

    a_bar = exp(delta*a); b_bar = (exp(delta*a) - 1) / a * b, which tends to
    delta*b as delta*a -> 0. ``zoh=False`` uses the Euler form b_bar = delta*b.
    """
    if np.any(delta.data <= 0):
        raise ValueError("discretize: step size delta must be strictly positive")
    if np.any(a.data >= 0):
        raise ValueError("discretize: state matrix entries must be strictly negative")
    d4 = T.reshape(delta, delta.shape + (1,))
    b4 = T.reshape(b, b.shape[:-1] + (1, b.shape[-1]))
    da = d4 * a
    a_bar = T.exp(da)
    if zoh:
        b_bar = T.expm1_over(da) * d4 * b4
    else:
        b_bar = d4 * b4
    return DiscretizedParams(a_bar, b_bar)


# ---------------------------------------------------------------- kernels

def _recurrence_sequential(a: np.ndarray, u: np.ndarray) -> np.ndarray:
    h = np.empty_like(u)
    state = np.zeros_like(u[:, 0])
    for t in range(u.shape[1]):
        state = a[:, t] * state + u[:, t]
        h[:, t] = state
    return h


def _recurrence_chunked(a: np.ndarray, u: np.ndarray, chunk: int) -> np.ndarray:
    if chunk < 1:
        raise ValueError(f"chunk must be >= 1, got {chunk}")
    B, N = u.shape[:2]
    rest = u.shape[2:]
    chunk = min(chunk, N)
    nc = -(-N // chunk)
    pad = nc * chunk - N
    if pad:
        widths = [(0, 0), (0, pad)] + [(0, 0)] * len(rest)
        a = np.pad(a, widths, constant_values=1.0)
        u = np.pad(u, widths)
    a = a.reshape((B, nc, chunk) + rest)
    u = u.reshape((B, nc, chunk) + rest)
    h = np.empty_like(u)
    prod = np.empty_like(a)
    h[:, :, 0] = u[:, :, 0]
    prod[:, :, 0] = a[:, :, 0]
    for t in range(1, chunk):
        h[:, :, t] = a[:, :, t] * h[:, :, t - 1] + u[:, :, t]
        prod[:, :, t] = prod[:, :, t - 1] * a[:, :, t]
    for c in range(1, nc):
        h[:, c] += prod[:, c] * h[:, c - 1, -1][:, None]
    return h.reshape((B, nc * chunk) + rest)[:, :N]


def _run(a: np.ndarray, u: np.ndarray, chunk: int | None) -> np.ndarray:
    if chunk is None:
        return _recurrence_sequential(a, u)
    return _recurrence_chunked(a, u, chunk)


def default_chunk(n_tokens: int) -> int:
    return max(1, 2 ** round(math.log2(max(1, n_tokens)) / 2))


def linear_recurrence(a_bar: Tensor, u: Tensor, chunk: int | None = None) -> Tensor:
    """h_t = a_bar_t * h_{t-1} + u_t along axis 1 with h_0 = 0.

    chunk=None runs the token-by-token reference; an int runs the blocked path.
    The backward pass is the same recurrence run in reverse.
    """
    if a_bar.shape != u.shape:
        raise ValueError(f"linear_recurrence: shape mismatch {a_bar.shape} vs {u.shape}")
    a = a_bar.data
    h = _run(a, u.data, chunk)

    def bw(g):
        # gh_t = g_t + a_{t+1} gh_{t+1}
        a_next = np.zeros_like(a)
        a_next[:, :-1] = a[:, 1:]
        gh = np.flip(_run(np.flip(a_next, 1), np.flip(g, 1), chunk), 1)
        h_prev = np.zeros_like(h)
        h_prev[:, 1:] = h[:, :-1]
        return gh * h_prev, gh

    return _record("linear_recurrence", h, (a_bar, u), bw)


def _readout(disc: DiscretizedParams, x: Tensor, chunk: int | None) -> Tensor:
    u = disc.b_bar * T.reshape(x, x.shape + (1,))
    h = linear_recurrence(disc.a_bar, u, chunk)
    return T.einsum("bnkd,bnd->bnk", h, disc.c)


def scan_sequential(disc: DiscretizedParams, x: Tensor, d_skip: Tensor | None = None) -> Tensor:
    """Reference scan: y_t = sum_d c_{t,d} h_{t,d} + d_skip * x_t."""
    y = _readout(disc, x, None)
    return y + d_skip * x if d_skip is not None else y


def scan_chunked(disc: DiscretizedParams, x: Tensor, chunk: int, d_skip: Tensor | None = None) -> Tensor:
    if chunk < 1:
        raise ValueError(f"chunk must be >= 1, got {chunk}")
    y = _readout(disc, x, chunk)
    return y + d_skip * x if d_skip is not None else y


def fused_scan(x: Tensor, delta: Tensor, a: Tensor, b: Tensor, c: Tensor,
               chunk: int | None = None, zoh: bool = True) -> Tensor:
    """Discretize, recur and read out as one tape op (no skip term).

    Same value as ``_readout(discretize(a, b, delta), x)`` but the (B, N, C', D)
    intermediates live only inside this call and the backward pass is written
    out by hand. Shapes: x, delta (B, N, C'); a (C', D); b, c (B, N, D).
    """
    if np.any(delta.data <= 0):
        raise ValueError("fused_scan: step size delta must be strictly positive")
    if np.any(a.data >= 0):
        raise ValueError("fused_scan: state matrix entries must be strictly negative")
    xd, dd, ad, bd, cd = x.data, delta.data, a.data, b.data, c.data
    d4 = dd[..., None]
    da = d4 * ad
    a_bar = np.exp(da)
    b4 = bd[:, :, None, :]
    if zoh:
        phi, dphi = T.phi1(da)
        coef = phi * d4  # b_bar = coef * b
    else:
        coef = np.broadcast_to(d4, da.shape)
    b_bar = coef * b4
    h = _run(a_bar, b_bar * xd[..., None], chunk)
    y = np.einsum("bnkd,bnd->bnk", h, cd)

    def bw(gy):
        gc = np.einsum("bnk,bnkd->bnd", gy, h)
        a_next = np.zeros_like(a_bar)
        a_next[:, :-1] = a_bar[:, 1:]
        gh = np.flip(_run(np.flip(a_next, 1), np.flip(gy[..., None] * cd[:, :, None, :], 1), chunk), 1)
        h_prev = np.zeros_like(h)
        h_prev[:, 1:] = h[:, :-1]
        gx = np.einsum("bnkd,bnkd->bnk", gh, b_bar)
        g_bbar = gh * xd[..., None]
        gb = np.einsum("bnkd,bnkd->bnd", g_bbar, coef)
        g_da = gh * h_prev * a_bar
        gb4 = g_bbar * b4
        if zoh:
            g_da += gb4 * dphi * d4
            g_delta = np.einsum("bnkd,kd->bnk", g_da, ad) + np.einsum("bnkd,bnkd->bnk", gb4, phi)
        else:
            g_delta = np.einsum("bnkd,kd->bnk", g_da, ad) + gb4.sum(-1)
        ga = np.einsum("bnkd,bnk->kd", g_da, dd)
        return gx, g_delta, ga, gb, gc

    return _record("fused_scan", y, (x, delta, a, b, c), bw)


def selective_scan(x: Tensor, params: SsmParams, *, chunk: int | None = -1, zoh: bool = True,
                   bidirectional: bool = False, use_skip: bool = True, fused: bool = True) -> Tensor:
    """Derive, discretize and scan. chunk=-1 picks a block size from N; None is sequential.

    ``fused=False`` builds the same computation from individual tape ops, which
    is slower but serves as a cross-check of the fused kernel.
    """
    if chunk == -1:
        chunk = default_chunk(x.shape[1])
    b, c, delta = derive_params(x, params)
    a = params.a()
    if fused:
        y = fused_scan(x, delta, a, b, c, chunk, zoh)
        if bidirectional:
            fl = [T.flip(t, 1) for t in (x, delta)]
            y_rev = fused_scan(fl[0], fl[1], a, T.flip(b, 1), T.flip(c, 1), chunk, zoh)
            y = (y + T.flip(y_rev, 1)) * 0.5
    else:
        disc = discretize(a, b, delta, zoh=zoh)
        disc.c = c
        y = _readout(disc, x, chunk)
        if bidirectional:
            rev = DiscretizedParams(T.flip(disc.a_bar, 1), T.flip(disc.b_bar, 1), T.flip(c, 1))
            y_rev = T.flip(_readout(rev, T.flip(x, 1), chunk), 1)
            y = (y + y_rev) * 0.5
    if use_skip:
        y = y + params.d_skip * x
    return y
