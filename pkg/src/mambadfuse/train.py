"""Random-crop Adam training of the fusion network."""
from __future__ import annotations

import dataclasses
import logging
import math
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .checkpoint import AdamState, Checkpoint, save_checkpoint
from .data import DatasetError, PairDataset
from .losses import LossWeights, total_loss
from .model import ModelParams, fuse_images, named_parameters

log = logging.getLogger(__name__)

CURVE_COLUMNS = ("step", "total", "ssim", "text", "int")


class TrainingAborted(RuntimeError):
    """Non-finite loss or gradient; the last written checkpoint is left untouched."""


@dataclass
class TrainConfig:
    batch_size: int = 12
    steps: int = 10_000
    lr: float = 2e-5
    crop: int = 128
    seed: int = 0
    w_ssim: float = 10.0
    w_text: float = 10.0
    w_int: float = 10.0
    ckpt_interval: int = 0  # 0: only the final checkpoint
    precision: str = "fp32"
    grad_clip: float = 0.0  # global-norm clip; 0 disables

    def validate(self) -> "TrainConfig":
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.steps < 0:
            raise ValueError(f"steps must be >= 0, got {self.steps}")
        if not self.lr > 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if self.crop < 11:
            raise ValueError(f"crop must be >= 11 (SSIM window), got {self.crop}")
        if self.ckpt_interval < 0 or self.grad_clip < 0:
            raise ValueError("ckpt_interval and grad_clip must be nonnegative")
        T.dtype_for(self.precision)
        self.weights()
        return self

    def weights(self) -> LossWeights:
        return LossWeights(self.w_ssim, self.w_text, self.w_int)


PRESETS = {
    "desk": dict(batch_size=4, steps=500, crop=64),
    "full": dict(batch_size=12, steps=10_000, crop=128),
}


def preset(name: str, **overrides) -> TrainConfig:
    if name not in PRESETS:
        raise ValueError(f"unknown preset {name!r}; expected one of {sorted(PRESETS)}")
    return TrainConfig(**{**PRESETS[name], **overrides}).validate()


# ---------------------------------------------------------------- Adam

def init_adam(model: ModelParams) -> AdamState:
    st = AdamState()
    for name, p in named_parameters(model):
        st.m[name] = np.zeros_like(p.data)
        st.v[name] = np.zeros_like(p.data)
    return st


def adam_step(params: list[tuple[str, T.Tensor]], state: AdamState, lr: float) -> None:
    """Bias-corrected Adam update in place; raises if any gradient is non-finite."""
    for name, p in params:
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            raise TrainingAborted(f"non-finite gradient in parameter {name}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, p in params:
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        m = state.m.setdefault(name, np.zeros_like(p.data))
        v = state.v.setdefault(name, np.zeros_like(p.data))
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data = (p.data - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype, copy=False)


def clip_grad_norm(params: list[tuple[str, T.Tensor]], max_norm: float) -> float:
    total = math.sqrt(sum(float(np.sum(np.square(p.grad, dtype=np.float64)))
                          for _, p in params if p.grad is not None))
    if total > max_norm > 0:
        scale = max_norm / total
        for _, p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return total


# ---------------------------------------------------------------- batches

def check_crop(dataset: PairDataset, crop: int) -> None:
    for name, a in zip(dataset.names, dataset.a):
        if min(a.shape) < crop:
            raise DatasetError(f"{name}: image {a.shape[0]}x{a.shape[1]} is smaller than crop {crop}")


def sample_batch(dataset: PairDataset, cfg: TrainConfig, rng: np.random.Generator):
    """Aligned random crops: the same window is cut from both modalities of a pair."""
    if len(dataset) == 0:
        raise DatasetError("empty dataset")
    check_crop(dataset, cfg.crop)
    dtype = T.dtype_for(cfg.precision)
    k = cfg.crop
    b1 = np.empty((cfg.batch_size, 1, k, k), dtype=dtype)
    b2 = np.empty_like(b1)
    for j in range(cfg.batch_size):
        i = int(rng.integers(len(dataset)))
        a, b = dataset.a[i], dataset.b[i]
        y = int(rng.integers(a.shape[0] - k + 1))
        x = int(rng.integers(a.shape[1] - k + 1))
        b1[j, 0] = a[y:y + k, x:x + k]
        b2[j, 0] = b[y:y + k, x:x + k]
    return b1, b2


# ---------------------------------------------------------------- loop

def _meta(cfg: TrainConfig, step: int, rng: np.random.Generator, curve: list) -> dict:
    return {"train": dataclasses.asdict(cfg), "step": step,
            "rng_state": rng.bit_generator.state, "curve": curve}


def train(model: ModelParams, dataset: PairDataset, cfg: TrainConfig, *, ckpt_path=None,
          resume: Checkpoint | None = None, log_every: int = 0) -> tuple[ModelParams, list[list[float]]]:
    """Run sample -> forward -> loss -> backward -> Adam for ``cfg.steps`` total steps.

    Returns the (in-place updated) model and the loss curve as rows
    (step, total, ssim, text, int). With ``resume``, the model, optimizer,
    sampler state and curve continue from the checkpoint.
    """
    cfg.validate()
    check_crop(dataset, cfg.crop)
    rng = np.random.default_rng(cfg.seed)
    if resume is not None:
        model = resume.model
        adam = resume.adam or init_adam(model)
        rng.bit_generator.state = resume.meta["rng_state"]
        start = int(resume.meta["step"])
        curve = [list(r) for r in resume.meta.get("curve", [])]
    else:
        adam = init_adam(model)
        start, curve = 0, []
    params = named_parameters(model)
    weights = cfg.weights()
    t0 = time.perf_counter()
    with T.precision(cfg.precision):
        for step in range(start, cfg.steps):
            i1, i2 = sample_batch(dataset, cfg, rng)
            for _, p in params:
                p.grad = None
            try:
                fused = fuse_images(i1, i2, model)
                loss, terms = total_loss(fused, i1, i2, weights)
            except FloatingPointError as exc:
                T.get_tape().clear()
                raise TrainingAborted(f"step {step + 1}: {exc}") from exc
            value = float(loss.data)
            if not math.isfinite(value):
                T.get_tape().clear()
                raise TrainingAborted(f"step {step + 1}: non-finite loss {value}")
            loss.backward()
            if cfg.grad_clip > 0:
                clip_grad_norm(params, cfg.grad_clip)
            adam_step(params, adam, cfg.lr)
            curve.append([step + 1, value, terms["ssim"], terms["text"], terms["int"]])
            if log_every and (step + 1) % log_every == 0:
                log.info("step %d loss %.4f (%.1fs)", step + 1, value, time.perf_counter() - t0)
            if ckpt_path and cfg.ckpt_interval and (step + 1) % cfg.ckpt_interval == 0:
                save_checkpoint(ckpt_path, model, adam, _meta(cfg, step + 1, rng, curve))
    if ckpt_path:
        save_checkpoint(ckpt_path, model, adam, _meta(cfg, max(cfg.steps, start), rng, curve))
    return model, curve


def smoothed_ratio(curve: list[list[float]], window: int = 20) -> float:
    """Mean total loss over the last ``window`` steps divided by the mean over the first."""
    totals = [row[1] for row in curve]
    if len(totals) < window:
        raise ValueError(f"need at least {window} steps, got {len(totals)}")
    return float(np.mean(totals[-window:]) / np.mean(totals[:window]))


def write_curve(path, curve: list[list[float]], header: dict | None = None) -> None:
    lines = [f"# {k}={v}" for k, v in (header or {}).items()]
    lines.append("\t".join(CURVE_COLUMNS))
    lines += [f"{int(r[0])}\t" + "\t".join(repr(float(v)) for v in r[1:]) for r in curve]
    Path(path).write_text("\n".join(lines) + "\n")


def read_curve(path) -> list[list[float]]:
    rows = []
    for line in Path(path).read_text().splitlines():
        if not line or line.startswith("#") or line.startswith("step"):
            continue
        parts = line.split("\t")
        rows.append([int(parts[0])] + [float(v) for v in parts[1:]])
    return rows
