"""Patch embedding, the single-modality Mamba block and the multi-modal M3 block."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .functional import causal_depthwise_conv1d, layer_norm
from .scan import LinearParams, SsmParams, init_ssm_params, selective_scan
from .tensor import Tensor


@dataclass
class FeatureSeq:
    """Token sequence (B, N, C) laid out row-major over an H x W grid."""

    data: Tensor
    height: int
    width: int

    def __post_init__(self):
        if self.data.ndim != 3 or self.data.shape[1] != self.height * self.width:
            raise ValueError(f"FeatureSeq: data shape {self.data.shape} does not hold "
                             f"{self.height}x{self.width} tokens")

    @property
    def shape(self):
        return self.data.shape

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    def with_data(self, data: Tensor) -> "FeatureSeq":
        return FeatureSeq(data, self.height, self.width)


@dataclass
class ScanConfig:
    chunk: int | None = -1  # -1: automatic block size, None: sequential reference
    zoh: bool = True
    bidirectional: bool = False
    use_skip: bool = True


def _param(arr, dtype) -> Tensor:
    return Tensor(np.asarray(arr, dtype=dtype), requires_grad=True)


def init_linear(rng: np.random.Generator, c_in: int, c_out: int, dtype, bias: bool = True,
                zero: bool = False) -> LinearParams:
    bound = 1.0 / math.sqrt(c_in)
    w = np.zeros((c_out, c_in)) if zero else rng.uniform(-bound, bound, (c_out, c_in))
    return LinearParams(_param(w, dtype), _param(np.zeros(c_out), dtype) if bias else None)


# ---------------------------------------------------------------- patch embed

def patch_embed(feat: Tensor, proj: LinearParams | None = None) -> FeatureSeq:
    """(B, C, H, W) -> (B, H*W, C') with pixel tokens in row-major order."""
    B, C, H, W = feat.shape
    seq = T.reshape(T.transpose(feat, (0, 2, 3, 1)), (B, H * W, C))
    if proj is not None:
        seq = proj(seq)
    return FeatureSeq(seq, H, W)


def unpatch_embed(seq: FeatureSeq, proj: LinearParams | None = None) -> Tensor:
    """Inverse layout of :func:`patch_embed`: (B, N, C) -> (B, C', H, W)."""
    data = seq.data
    B, N, _ = data.shape
    if N != seq.height * seq.width:
        raise ValueError(f"unpatch_embed: {N} tokens cannot fill {seq.height}x{seq.width}")
    if proj is not None:
        data = proj(data)
    C = data.shape[2]
    return T.transpose(T.reshape(data, (B, seq.height, seq.width, C)), (0, 3, 1, 2))


# ---------------------------------------------------------------- Mamba block

@dataclass
class MambaBlockParams:
    norm_gamma: Tensor
    norm_beta: Tensor
    mlp_x: LinearParams
    mlp_z: LinearParams
    conv_w: Tensor  # (C', K) depthwise, causal
    conv_b: Tensor
    ssm: SsmParams
    mlp_f: LinearParams

    @property
    def channels(self) -> int:
        return self.norm_gamma.shape[0]


def _init_conv1d(rng, inner: int, kernel: int, dtype):
    bound = 1.0 / math.sqrt(kernel)
    return _param(rng.uniform(-bound, bound, (inner, kernel)), dtype), _param(np.zeros(inner), dtype)


def init_mamba_block(rng: np.random.Generator, channels: int, expand: int = 2, d_state: int = 16,
                     conv_kernel: int = 4, dtype=np.float64) -> MambaBlockParams:
    if expand < 1:
        raise ValueError(f"expand must be >= 1, got {expand}")
    inner = expand * channels
    conv_w, conv_b = _init_conv1d(rng, inner, conv_kernel, dtype)
    return MambaBlockParams(
        norm_gamma=_param(np.ones(channels), dtype),
        norm_beta=_param(np.zeros(channels), dtype),
        mlp_x=init_linear(rng, channels, inner, dtype),
        mlp_z=init_linear(rng, channels, inner, dtype),
        conv_w=conv_w,
        conv_b=conv_b,
        ssm=init_ssm_params(inner, d_state, rng, dtype),
        mlp_f=init_linear(rng, inner, channels, dtype, zero=True),
    )


def mamba_block(seq: FeatureSeq, params: MambaBlockParams, cfg: ScanConfig | None = None,
                trace: dict | None = None) -> FeatureSeq:
    """Norm, x/z projections, causal conv + SiLU, selective scan, SiLU(z) gate, output MLP + residual."""
    cfg = cfg or ScanConfig()
    if seq.channels != params.channels:
        raise ValueError(f"mamba_block: sequence has {seq.channels} channels, block expects {params.channels}")
    normed = layer_norm(seq.data, params.norm_gamma, params.norm_beta)
    x = params.mlp_x(normed)
    z = params.mlp_z(normed)
    x_conv = T.silu(causal_depthwise_conv1d(x, params.conv_w, params.conv_b))
    f = selective_scan(x_conv, params.ssm, chunk=cfg.chunk, zoh=cfg.zoh,
                       bidirectional=cfg.bidirectional, use_skip=cfg.use_skip)
    f_gated = f * T.silu(z)
    out = params.mlp_f(f_gated) + seq.data
    if trace is not None:
        trace.update({"F_norm": normed, "x": x, "z": z, "x_prime": x_conv, "f": f, "f_prime": f_gated})
    return seq.with_data(out)


# ---------------------------------------------------------------- M3 block

@dataclass
class BranchParams:
    norm_gamma: Tensor
    norm_beta: Tensor
    mlp_x: LinearParams
    conv_w: Tensor
    conv_b: Tensor
    ssm: SsmParams


@dataclass
class M3BlockParams:
    """Branches keyed 'i1', 'i2', 'if'. One-modality guidance drops the unused branch."""

    branches: dict[str, BranchParams]
    mlp_z: LinearParams
    mlp_f: LinearParams
    guidance: str = "both"
    use_fused_branch_output: bool = False

    @property
    def channels(self) -> int:
        return self.branches["if"].norm_gamma.shape[0]


GUIDANCE = {"both": ("i1", "i2"), "i1": ("i1",), "i2": ("i2",)}


def _init_branch(rng, channels, inner, d_state, conv_kernel, dtype) -> BranchParams:
    conv_w, conv_b = _init_conv1d(rng, inner, conv_kernel, dtype)
    return BranchParams(
        norm_gamma=_param(np.ones(channels), dtype),
        norm_beta=_param(np.zeros(channels), dtype),
        mlp_x=init_linear(rng, channels, inner, dtype),
        conv_w=conv_w,
        conv_b=conv_b,
        ssm=init_ssm_params(inner, d_state, rng, dtype),
    )


def init_m3_block(rng: np.random.Generator, channels: int, expand: int = 2, d_state: int = 16,
                  conv_kernel: int = 4, dtype=np.float64, guidance: str = "both",
                  tie_branches: bool = False, use_fused_branch_output: bool = False) -> M3BlockParams:
    if guidance not in GUIDANCE:
        raise ValueError(f"unknown guidance {guidance!r}; expected one of {sorted(GUIDANCE)}")
    inner = expand * channels
    branches: dict[str, BranchParams] = {}
    for name in GUIDANCE[guidance]:
        if tie_branches and branches:
            branches[name] = next(iter(branches.values()))
        else:
            branches[name] = _init_branch(rng, channels, inner, d_state, conv_kernel, dtype)
    branches["if"] = _init_branch(rng, channels, inner, d_state, conv_kernel, dtype)
    return M3BlockParams(
        branches=branches,
        mlp_z=init_linear(rng, channels, inner, dtype),
        mlp_f=init_linear(rng, inner, channels, dtype, zero=True),
        guidance=guidance,
        use_fused_branch_output=use_fused_branch_output,
    )


def _branch(seq: FeatureSeq, p: BranchParams, cfg: ScanConfig, trace: dict | None, key: str):
    normed = layer_norm(seq.data, p.norm_gamma, p.norm_beta)
    x = p.mlp_x(normed)
    x_conv = T.silu(causal_depthwise_conv1d(x, p.conv_w, p.conv_b))
    y = selective_scan(x_conv, p.ssm, chunk=cfg.chunk, zoh=cfg.zoh,
                       bidirectional=cfg.bidirectional, use_skip=cfg.use_skip)
    if trace is not None:
        trace.update({f"F_norm_{key}": normed, f"x_{key}": x, f"x_prime_{key}": x_conv, f"y_{key}": y})
    return normed, y


def _normed(seq: FeatureSeq, p: BranchParams) -> Tensor:
    return layer_norm(seq.data, p.norm_gamma, p.norm_beta)


def m3_block(f1: FeatureSeq, f2: FeatureSeq, ff: FeatureSeq, params: M3BlockParams,
             cfg: ScanConfig | None = None, trace: dict | None = None) -> FeatureSeq:
    """Three-branch block: modality branch outputs gated by SiLU(z) from the fused branch.

    out = mlp_f(y_i1 * SiLU(z) + y_i2 * SiLU(z)) + ff. The fused branch's own scan
    output only enters when ``use_fused_branch_output`` is set; otherwise it is
    computed only when a trace is requested.
    """
    cfg = cfg or ScanConfig()
    if not (f1.shape == f2.shape == ff.shape):
        raise ValueError(f"m3_block: shape mismatch {f1.shape}, {f2.shape}, {ff.shape}")
    if ff.channels != params.channels:
        raise ValueError(f"m3_block: features have {ff.channels} channels, block expects {params.channels}")
    inputs = {"i1": f1, "i2": f2}
    ys = {name: _branch(inputs[name], params.branches[name], cfg, trace, name)[1]
          for name in GUIDANCE[params.guidance]}
    fused_branch = params.branches["if"]
    if params.use_fused_branch_output or trace is not None:
        normed_f, y_f = _branch(ff, fused_branch, cfg, trace, "if")
    else:
        normed_f, y_f = _normed(ff, fused_branch), None
    z = params.mlp_z(normed_f)
    gate = T.silu(z)
    gated = {name: y * gate for name, y in ys.items()}
    acc = None
    for y in gated.values():
        acc = y if acc is None else acc + y
    if params.use_fused_branch_output:
        acc = acc + y_f * gate
    out = params.mlp_f(acc) + ff.data
    if trace is not None:
        trace["z"] = z
        trace.update({f"y_prime_{k}": v for k, v in gated.items()})
    return ff.with_data(out)
