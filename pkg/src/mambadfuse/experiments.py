"""Desk-scale runs on synthetic pairs: training smoke and fusion sanity checks."""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .data import PairDataset, synthetic_dataset
from .metrics import en, sf
from .model import ModelParams, arch_preset, fuse_images, init_model
from .train import preset, smoothed_ratio, train

SMOKE_PAIRS = 8
SMOKE_SIZE = 64
SMOKE_STEPS = 200
HELD_OUT_SEED = 10_000


@dataclass
class SmokeResult:
    seed: int
    identical: bool
    model: ModelParams
    curve: list[list[float]]
    seconds: float

    @property
    def ratio(self) -> float:
        return smoothed_ratio(self.curve)


def smoke_run(seed: int, steps: int = SMOKE_STEPS, identical: bool = False, **train_overrides) -> SmokeResult:
    """Desk presets for model and trainer on 8 synthetic 64x64 pairs, fp32."""
    ds = synthetic_dataset(SMOKE_PAIRS, SMOKE_SIZE, seed=seed, identical=identical)
    cfg = preset("desk", steps=steps, seed=seed, precision="fp32", **train_overrides)
    model = init_model(arch_preset("desk"), seed=seed, precision="fp32")
    t0 = time.perf_counter()
    model, curve = train(model, ds, cfg)
    return SmokeResult(seed, identical, model, curve, time.perf_counter() - t0)


def held_out(n: int = 4, seed: int = 0, identical: bool = False) -> PairDataset:
    return synthetic_dataset(n, SMOKE_SIZE, seed=HELD_OUT_SEED + seed, identical=identical)


def _fuse(model: ModelParams, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    with T.no_grad():
        return fuse_images(a, b, model).data[0, 0].astype(np.float64)


def identity_mae(model: ModelParams, ds: PairDataset) -> float:
    """Mean absolute error of fuse(x, x) against x over a dataset of identical pairs."""
    return float(np.mean([np.mean(np.abs(_fuse(model, a, a) - a)) for a in ds.a]))


def texture_rows(model: ModelParams, ds: PairDataset) -> list[dict[str, float]]:
    """Per pair: EN and SF of the fused image next to the smaller source value."""
    rows = []
    for name, a, b in zip(ds.names, ds.a, ds.b):
        f = _fuse(model, a, b)
        rows.append({"name": name, "EN": en(f), "EN_min": min(en(a), en(b)),
                     "SF": sf(f), "SF_min": min(sf(a), sf(b))})
    return rows
