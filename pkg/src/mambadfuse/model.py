"""The three-stage fusion network: dual-level extraction, dual-phase fusion, reconstruction."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .blocks import (FeatureSeq, M3BlockParams, MambaBlockParams, ScanConfig,
                     init_m3_block, init_mamba_block, m3_block, mamba_block, patch_embed,
                     unpatch_embed)
from .functional import conv2d_3x3
from .scan import LinearParams
from .tensor import Tensor

FUSE_MODES = ("add", "l1")
EXCHANGE_MODES = ("exchange", "swap", "none")


@dataclass
class ArchConfig:
    stem_channels: int = 64
    embed_dim: int = 64
    expand: int = 2
    d_state: int = 16
    conv_kernel: int = 4
    n_extract: int = 4
    n_recon: int = 4
    shallow_rounds: int = 2
    deep_blocks: int = 4
    fuse_mode: str = "add"
    exchange: str = "exchange"
    exchange_ratio: int = 2
    shallow_fuse: bool = True
    guidance: str = "both"
    use_fused_branch_output: bool = False
    head_layers: int = 1  # 1: linear 3x3 conv head; 2: conv + LeakyReLU + conv
    leaky_slope: float = 0.01
    tie_stems: bool = False
    tie_modalities: bool = False
    zoh: bool = True
    use_skip: bool = True
    bidirectional: bool = False
    scan_chunk: int = 0  # 0: automatic, -1: sequential reference

    def validate(self) -> "ArchConfig":
        for name in ("stem_channels", "embed_dim", "expand", "d_state", "conv_kernel", "exchange_ratio"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        for name in ("n_extract", "n_recon", "shallow_rounds", "deep_blocks"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0, got {getattr(self, name)}")
        if self.fuse_mode not in FUSE_MODES:
            raise ValueError(f"fuse_mode must be one of {FUSE_MODES}, got {self.fuse_mode!r}")
        if self.exchange not in EXCHANGE_MODES:
            raise ValueError(f"exchange must be one of {EXCHANGE_MODES}, got {self.exchange!r}")
        if self.guidance not in ("both", "i1", "i2"):
            raise ValueError(f"guidance must be both, i1 or i2, got {self.guidance!r}")
        if self.head_layers not in (1, 2):
            raise ValueError(f"head_layers must be 1 or 2, got {self.head_layers}")
        return self

    def scan_config(self) -> ScanConfig:
        chunk = {0: -1, -1: None}.get(self.scan_chunk, self.scan_chunk)
        return ScanConfig(chunk=chunk, zoh=self.zoh, bidirectional=self.bidirectional,
                          use_skip=self.use_skip)


# A reduced network for CPU-only smoke runs; the dataclass defaults are the full-size model.
ARCH_PRESETS = {
    "desk": dict(stem_channels=64, embed_dim=8, expand=1, d_state=4, n_extract=1, n_recon=1, head_layers=2,
                 shallow_rounds=1, deep_blocks=1),
    "full": {},
}


def arch_preset(name: str, **overrides) -> ArchConfig:
    if name not in ARCH_PRESETS:
        raise ValueError(f"unknown preset {name!r}; expected one of {sorted(ARCH_PRESETS)}")
    return ArchConfig(**{**ARCH_PRESETS[name], **overrides}).validate()


@dataclass
class ConvParams:
    weight: Tensor
    bias: Tensor

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d_3x3(x, self.weight, self.bias)


@dataclass
class StemParams:
    conv1: ConvParams
    conv2: ConvParams


@dataclass
class ModelParams:
    config: ArchConfig
    stem1: StemParams
    stem2: StemParams
    embed1: LinearParams
    embed2: LinearParams
    tower1: list[MambaBlockParams]
    tower2: list[MambaBlockParams]
    shallow1: list[MambaBlockParams]
    shallow2: list[MambaBlockParams]
    deep: list[M3BlockParams]
    recon: list[MambaBlockParams]
    unembed: LinearParams
    head: list[ConvParams] = field(default_factory=list)


@dataclass
class ExchangeMask:
    """Boolean (B, N, C) mask, constant over batch and tokens; True means exchange."""

    mask: np.ndarray
    ratio: int
    rule: str

    @property
    def fraction(self) -> float:
        return float(self.mask.mean()) if self.mask.size else 0.0


def make_exchange_mask(shape: tuple[int, int, int], ratio: int = 2, rule: str = "exchange") -> ExchangeMask:
    """'exchange': channels with index % ratio == 0; 'swap': every channel; 'none': no channel."""
    C = shape[-1]
    if rule == "exchange":
        chan = np.arange(C) % ratio == 0
    elif rule == "swap":
        chan = np.ones(C, dtype=bool)
    elif rule == "none":
        chan = np.zeros(C, dtype=bool)
    else:
        raise ValueError(f"unknown exchange rule {rule!r}")
    return ExchangeMask(np.broadcast_to(chan, shape), ratio, rule)


# ---------------------------------------------------------------- init

def _conv(rng, c_in: int, c_out: int, dtype, gain: float = 1.0) -> ConvParams:
    """Normal init with std gain / sqrt(fan_in); He gain before a LeakyReLU."""
    w = rng.normal(size=(c_out, c_in, 3, 3)) * (gain / math.sqrt(9 * c_in))
    return ConvParams(Tensor(w.astype(dtype), requires_grad=True),
                      Tensor(np.zeros(c_out, dtype=dtype), requires_grad=True))


def _proj(rng, c_in: int, c_out: int, dtype) -> LinearParams:
    # variance-preserving, so the untrained network passes texture through to the head
    w = rng.normal(size=(c_out, c_in)) / math.sqrt(c_in)
    return LinearParams(Tensor(w.astype(dtype), requires_grad=True),
                        Tensor(np.zeros(c_out, dtype=dtype), requires_grad=True))


def init_model(config: ArchConfig | None = None, seed: int = 0, precision: str = "fp32") -> ModelParams:
    cfg = (config or ArchConfig()).validate()
    dtype = T.dtype_for(precision)
    rng = np.random.default_rng(seed)
    C, E = cfg.stem_channels, cfg.embed_dim
    tie = cfg.tie_modalities

    def block():
        return init_mamba_block(rng, E, cfg.expand, cfg.d_state, cfg.conv_kernel, dtype)

    he = math.sqrt(2.0 / (1.0 + cfg.leaky_slope ** 2))

    def stem():
        return StemParams(_conv(rng, 1, C, dtype, he), _conv(rng, C, C, dtype, he))

    stem1 = stem()
    stem2 = stem1 if (cfg.tie_stems or tie) else stem()
    embed1 = _proj(rng, C, E, dtype)
    embed2 = embed1 if tie else _proj(rng, C, E, dtype)
    tower1 = [block() for _ in range(cfg.n_extract)]
    tower2 = tower1 if tie else [block() for _ in range(cfg.n_extract)]
    rounds = cfg.shallow_rounds if cfg.shallow_fuse else 0
    shallow1 = [block() for _ in range(rounds)]
    shallow2 = shallow1 if tie else [block() for _ in range(rounds)]
    deep = [init_m3_block(rng, E, cfg.expand, cfg.d_state, cfg.conv_kernel, dtype, guidance=cfg.guidance,
                          tie_branches=tie, use_fused_branch_output=cfg.use_fused_branch_output)
            for _ in range(cfg.deep_blocks)]
    recon = [block() for _ in range(cfg.n_recon)]
    unembed = _proj(rng, E, C, dtype)
    head = [_conv(rng, C, C, dtype, he), _conv(rng, C, 1, dtype)] if cfg.head_layers == 2 else [_conv(rng, C, 1, dtype)]
    head[-1].bias.data[:] = 0.5  # start mid-range so the output clamp passes gradients
    return ModelParams(cfg, stem1, stem2, embed1, embed2, tower1, tower2, shallow1, shallow2,
                       deep, recon, unembed, head)


def named_parameters(obj, prefix: str = "") -> list[tuple[str, Tensor]]:
    """Every parameter tensor once, in a stable order; tied tensors keep their first name."""
    out: list[tuple[str, Tensor]] = []
    seen: set[int] = set()

    def walk(o, name):
        if isinstance(o, Tensor):
            if id(o) not in seen:
                seen.add(id(o))
                out.append((name, o))
        elif isinstance(o, ArchConfig):
            return
        elif dataclasses.is_dataclass(o):
            for f in dataclasses.fields(o):
                walk(getattr(o, f.name), f"{name}.{f.name}" if name else f.name)
        elif isinstance(o, dict):
            for k, v in o.items():
                walk(v, f"{name}.{k}")
        elif isinstance(o, (list, tuple)):
            for i, v in enumerate(o):
                walk(v, f"{name}.{i}")

    walk(obj, prefix)
    return out


def parameter_count(model: ModelParams) -> int:
    return sum(t.size for _, t in named_parameters(model))


def fingerprint(model: ModelParams) -> str:
    """Hash of the architecture config plus every parameter's name and shape."""
    payload = {"config": dataclasses.asdict(model.config),
               "params": [(n, list(t.shape)) for n, t in named_parameters(model)]}
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]


# ---------------------------------------------------------------- stages

def _stem_forward(img: Tensor, stem: StemParams, slope: float) -> Tensor:
    h = T.leaky_relu(stem.conv1(img), slope)
    return T.leaky_relu(stem.conv2(h), slope)


def low_level_extract(img: Tensor, stem: StemParams, slope: float = 0.01) -> Tensor:
    """Two 3x3 conv + LeakyReLU layers: (B, 1, H, W) -> (B, C, H, W)."""
    if img.ndim != 4 or img.shape[1] != 1:
        raise ValueError(f"low_level_extract: expected (B,1,H,W), got {img.shape}")
    if img.data.min() < 0.0 or img.data.max() > 1.0:
        warnings.warn("input image outside [0, 1]; clamping", RuntimeWarning, stacklevel=2)
        img = T.clamp(img, 0.0, 1.0)
    return _stem_forward(img, stem, slope)


def high_level_extract(f0: FeatureSeq, blocks: list[MambaBlockParams], cfg: ScanConfig | None = None,
                       trace: list | None = None) -> FeatureSeq:
    f = f0
    for p in blocks:
        t = {} if trace is not None else None
        f = mamba_block(f, p, cfg, t)
        if trace is not None:
            trace.append(t)
    return f


def channel_exchange(f1: FeatureSeq, f2: FeatureSeq, mask: ExchangeMask) -> tuple[FeatureSeq, FeatureSeq]:
    """Swap masked entries between the two streams. Parameter-free pure selection."""
    if f1.shape != f2.shape:
        raise ValueError(f"channel_exchange: shape mismatch {f1.shape} vs {f2.shape}")
    if mask.mask.shape != tuple(f1.shape):
        raise ValueError(f"channel_exchange: mask shape {mask.mask.shape} vs features {f1.shape}")
    m = mask.mask
    return (f1.with_data(T.where(m, f2.data, f1.data)),
            f2.with_data(T.where(m, f1.data, f2.data)))


def fuse_op(f1: FeatureSeq, f2: FeatureSeq, mode: str = "add") -> FeatureSeq:
    """'add': f1 + f2. 'l1': per-token weights proportional to each stream's channel L1 norm."""
    if f1.shape != f2.shape:
        raise ValueError(f"fuse_op: shape mismatch {f1.shape} vs {f2.shape}")
    if mode == "add":
        return f1.with_data(f1.data + f2.data)
    if mode != "l1":
        raise ValueError(f"fuse_op: unknown mode {mode!r}")
    n1 = T.tsum(T.absolute(f1.data), axis=-1, keepdims=True)
    n2 = T.tsum(T.absolute(f2.data), axis=-1, keepdims=True)
    den = n1 + n2
    empty = den.data == 0
    w1 = T.where(empty, T.Tensor(np.full(den.shape, 0.5, dtype=den.dtype)),
                 n1 / T.where(empty, T.Tensor(np.ones(den.shape, dtype=den.dtype)), den))
    w2 = 1.0 - w1
    return f1.with_data(w1 * f1.data + w2 * f2.data)


def shallow_fuse(f1: FeatureSeq, f2: FeatureSeq, blocks1: list[MambaBlockParams],
                 blocks2: list[MambaBlockParams], config: ArchConfig,
                 trace: list | None = None) -> tuple[FeatureSeq, FeatureSeq, FeatureSeq]:
    """Rounds of [channel exchange -> per-modality Mamba block], then the FUSE rule."""
    if not config.shallow_fuse:
        return f1, f2, fuse_op(f1, f2, "add")
    cfg = config.scan_config()
    mask = make_exchange_mask(tuple(f1.shape), config.exchange_ratio, config.exchange)
    for b1, b2 in zip(blocks1, blocks2):
        f1, f2 = channel_exchange(f1, f2, mask)
        t1 = {} if trace is not None else None
        t2 = {} if trace is not None else None
        f1 = mamba_block(f1, b1, cfg, t1)
        f2 = mamba_block(f2, b2, cfg, t2)
        if trace is not None:
            trace.append({"i1": t1, "i2": t2})
    return f1, f2, fuse_op(f1, f2, config.fuse_mode)


def deep_fuse(f1: FeatureSeq, f2: FeatureSeq, fs: FeatureSeq, m3_list: list[M3BlockParams],
              cfg: ScanConfig | None = None, trace: list | None = None) -> FeatureSeq:
    """Refine the shallow fused feature through M3 blocks guided by both modality streams."""
    f = fs
    for p in m3_list:
        t = {} if trace is not None else None
        f = m3_block(f1, f2, f, p, cfg, t)
        if trace is not None:
            trace.append(t)
    return f


def reconstruct(fd: FeatureSeq, model: ModelParams, trace: list | None = None) -> Tensor:
    """M Mamba blocks, unpatch, conv head, clamp to [0, 1]."""
    cfg = model.config
    f = high_level_extract(fd, model.recon, cfg.scan_config(), trace)
    x = unpatch_embed(f, model.unembed)
    for i, conv in enumerate(model.head):
        x = conv(x)
        if i < len(model.head) - 1:
            x = T.leaky_relu(x, cfg.leaky_slope)
    return T.clamp(x, 0.0, 1.0)


def _as_image(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x if x.dtype == dtype else Tensor(x.data.astype(dtype))
    arr = np.asarray(x, dtype=dtype)
    if arr.ndim == 2:
        arr = arr[None, None]
    elif arr.ndim == 3:
        arr = arr[:, None]
    return Tensor(arr)


def fuse_images(i1, i2, model: ModelParams, trace: dict | None = None) -> Tensor:
    """Fuse two aligned single-channel images (B,1,H,W) in [0, 1] into one."""
    dtype = model.stem1.conv1.weight.dtype
    i1, i2 = _as_image(i1, dtype), _as_image(i2, dtype)
    if i1.shape != i2.shape:
        raise ValueError(f"fuse_images: size mismatch {i1.shape} vs {i2.shape} (no implicit resize)")
    cfg = model.config
    scfg = cfg.scan_config()
    stages = {k: [] for k in ("tower1", "tower2", "shallow", "deep", "recon")} if trace is not None else None
    s1 = low_level_extract(i1, model.stem1, cfg.leaky_slope)
    s2 = low_level_extract(i2, model.stem2, cfg.leaky_slope)
    f1 = high_level_extract(patch_embed(s1, model.embed1), model.tower1, scfg, stages and stages["tower1"])
    f2 = high_level_extract(patch_embed(s2, model.embed2), model.tower2, scfg, stages and stages["tower2"])
    f1p, f2p, fs = shallow_fuse(f1, f2, model.shallow1, model.shallow2, cfg, stages and stages["shallow"])
    fd = deep_fuse(f1p, f2p, fs, model.deep, scfg, stages and stages["deep"])
    out = reconstruct(fd, model, stages and stages["recon"])
    if trace is not None:
        trace.update(stages)
        trace.update({"stem1": s1, "stem2": s2, "F_n_i1": f1, "F_n_i2": f2, "F_S": fs, "F_D": fd})
    return out


# ---------------------------------------------------------------- colour

_RGB2YCBCR = np.array([[0.299, 0.587, 0.114],
                       [-0.168736, -0.331264, 0.5],
                       [0.5, -0.418688, -0.081312]])
_YCBCR2RGB = np.linalg.inv(_RGB2YCBCR)
_OFFSET = np.array([0.0, 0.5, 0.5])


def ycbcr_split(rgb):
    """BT.601 full-range RGB -> (Y, Cb, Cr), channel axis -3, values in [0, 1]."""
    rgb = np.asarray(rgb.data if isinstance(rgb, Tensor) else rgb, dtype=np.float64)
    if rgb.shape[-3] != 3:
        raise ValueError(f"ycbcr_split: expected 3 channels on axis -3, got shape {rgb.shape}")
    ycc = np.einsum("ij,...jhw->...ihw", _RGB2YCBCR, rgb) + _OFFSET[:, None, None]
    return ycc[..., 0:1, :, :], ycc[..., 1:2, :, :], ycc[..., 2:3, :, :]


def ycbcr_merge(y, cb, cr):
    ycc = np.concatenate([np.asarray(c.data if isinstance(c, Tensor) else c, dtype=np.float64)
                          for c in (y, cb, cr)], axis=-3)
    return np.einsum("ij,...jhw->...ihw", _YCBCR2RGB, ycc - _OFFSET[:, None, None])
