"""Network layers on top of :mod:`mambadfuse.tensor`, each with an analytic backward."""
from __future__ import annotations

import numpy as np

from .tensor import Tensor, _record

LN_EPS = 1e-5


def _check(cond: bool, msg: str) -> None:
    if not cond:
        raise ValueError(msg)


def _shifted_views(xp: np.ndarray, kh: int, kw: int, h: int, w: int):
    for i in range(kh):
        for j in range(kw):
            yield i, j, xp[..., i:i + h, j:j + w]


def conv2d_3x3(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """3x3 convolution, stride 1, zero padding 1 (spatial size preserved).

    x: (B, C_in, H, W); weight: (C_out, C_in, 3, 3); bias: (C_out,).
    """
    _check(x.ndim == 4, f"conv2d_3x3: input must be 4-d (B,C,H,W), got shape {x.shape}")
    _check(weight.ndim == 4 and weight.shape[2:] == (3, 3),
           f"conv2d_3x3: kernel axes must be 3x3, got weight shape {weight.shape}")
    _check(weight.shape[1] == x.shape[1],
           f"conv2d_3x3: channel axis mismatch, input has {x.shape[1]} channels, weight expects {weight.shape[1]}")
    if bias is not None:
        _check(bias.shape == (weight.shape[0],),
               f"conv2d_3x3: bias axis must be ({weight.shape[0]},), got {bias.shape}")
    B, C, H, W = x.shape
    O = weight.shape[0]
    xp = np.pad(x.data, ((0, 0), (0, 0), (1, 1), (1, 1)))
    # im2col: (B, C_in, 3, 3, H, W) flattened to (B, 9*C_in, H*W)
    cols = np.empty((B, C, 3, 3, H, W), dtype=x.dtype)
    for i, j, v in _shifted_views(xp, 3, 3, H, W):
        cols[:, :, i, j] = v
    cols = cols.reshape(B, C * 9, H * W)
    w2 = weight.data.reshape(O, C * 9)
    out = np.matmul(w2, cols)
    if bias is not None:
        out += bias.data[:, None]
    out = out.reshape(B, O, H, W)

    def bw(g):
        g2 = g.reshape(B, O, H * W)
        gw = sum(g2[b] @ cols[b].T for b in range(B)).reshape(weight.shape)
        gcols = np.matmul(w2.T, g2).reshape(B, C, 3, 3, H, W)
        gxp = np.zeros_like(xp)
        for i in range(3):
            for j in range(3):
                gxp[:, :, i:i + H, j:j + W] += gcols[:, :, i, j]
        gx = gxp[:, :, 1:-1, 1:-1]
        gb = g2.sum(axis=(0, 2)) if bias is not None else None
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _record("conv2d_3x3", out, inputs, bw)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map over the last axis; weight is (C_out, C_in)."""
    _check(weight.ndim == 2, f"linear: weight must be 2-d, got {weight.shape}")
    _check(x.shape[-1] == weight.shape[1],
           f"linear: last axis extent {x.shape[-1]} does not match weight input extent {weight.shape[1]}")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data

    def bw(g):
        gx = g @ weight.data
        g2 = g.reshape(-1, g.shape[-1])
        gw = g2.T @ x.data.reshape(-1, x.shape[-1])
        gb = g2.sum(axis=0) if bias is not None else None
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _record("linear", out, inputs, bw)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = LN_EPS) -> Tensor:
    """Normalize over the last axis, then scale by gamma and shift by beta."""
    C = x.shape[-1]
    _check(C >= 1 and gamma.shape == (C,) and beta.shape == (C,),
           f"layer_norm: affine params must have shape ({C},), got {gamma.shape} / {beta.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat * gamma.data + beta.data

    def bw(g):
        gxhat = g * gamma.data
        gx = rstd * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                     - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _record("layer_norm", out, (x, gamma, beta), bw)


def causal_depthwise_conv1d(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Per-channel conv along the token axis with left zero padding.

    x: (B, N, C); weight: (C, K). out[t] = sum_k weight[:, k] * x[t - K + 1 + k].
    """
    B, N, C = x.shape
    _check(weight.ndim == 2 and weight.shape[0] == C,
           f"causal_depthwise_conv1d: weight must be ({C}, K), got {weight.shape}")
    K = weight.shape[1]
    xp = np.pad(x.data, ((0, 0), (K - 1, 0), (0, 0)))
    out = np.zeros_like(x.data)
    for k in range(K):
        out += weight.data[:, k] * xp[:, k:k + N]
    if bias is not None:
        out = out + bias.data

    def bw(g):
        gxp = np.zeros_like(xp)
        gw = np.empty_like(weight.data)
        for k in range(K):
            gxp[:, k:k + N] += g * weight.data[:, k]
            gw[:, k] = (g * xp[:, k:k + N]).sum(axis=(0, 1))
        gb = g.sum(axis=(0, 1)) if bias is not None else None
        return gxp[:, K - 1:], gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _record("causal_depthwise_conv1d", out, inputs, bw)


def filter2d(x: Tensor, kernel: np.ndarray, padding: str = "valid") -> Tensor:
    """Correlate every (H, W) plane of x with a fixed 2-d kernel.

    padding="valid" shrinks the plane; padding="same" zero-pads (odd kernels only).
    The kernel is a constant: no gradient is produced for it.
    """
    kernel = np.asarray(kernel, dtype=x.dtype)
    kh, kw = kernel.shape
    H, W = x.shape[-2:]
    if padding == "same":
        _check(kh % 2 == 1 and kw % 2 == 1, "filter2d: 'same' padding needs an odd kernel")
        pad = [(0, 0)] * (x.ndim - 2) + [(kh // 2, kh // 2), (kw // 2, kw // 2)]
        xp = np.pad(x.data, pad)
    elif padding == "valid":
        _check(H >= kh and W >= kw, f"filter2d: plane {H}x{W} smaller than kernel {kh}x{kw}")
        xp = x.data
        pad = None
    else:
        raise ValueError(f"filter2d: unknown padding {padding!r}")
    oh, ow = xp.shape[-2] - kh + 1, xp.shape[-1] - kw + 1
    out = np.zeros(xp.shape[:-2] + (oh, ow), dtype=x.dtype)
    for i, j, v in _shifted_views(xp, kh, kw, oh, ow):
        if kernel[i, j] != 0:
            out += kernel[i, j] * v

    def bw(g):
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                if kernel[i, j] != 0:
                    gxp[..., i:i + oh, j:j + ow] += kernel[i, j] * g
        if pad is None:
            return (gxp,)
        return (gxp[..., kh // 2:kh // 2 + H, kw // 2:kw // 2 + W],)

    return _record("filter2d", out, (x,), bw)

