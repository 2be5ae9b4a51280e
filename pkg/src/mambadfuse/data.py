"""Paired image datasets: directories of matching filenames and synthetic pairs."""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .images import list_images, read_gray


class DatasetError(ValueError):
    """Empty, unmatched or misaligned paired data."""


@dataclass
class PairDataset:
    """Aligned grayscale pairs as float arrays in [0, 1]."""

    a: list[np.ndarray]
    b: list[np.ndarray]
    names: list[str] = field(default_factory=list)

    def __post_init__(self):
        if len(self.a) != len(self.b):
            raise DatasetError(f"{len(self.a)} images in modality a but {len(self.b)} in modality b")
        if not self.names:
            self.names = [f"pair{i:03d}" for i in range(len(self.a))]
        for name, x, y in zip(self.names, self.a, self.b):
            if x.shape != y.shape:
                raise DatasetError(f"{name}: modality shapes differ, {x.shape} vs {y.shape}")
            if x.ndim != 2:
                raise DatasetError(f"{name}: expected 2-d grayscale arrays, got shape {x.shape}")

    def __len__(self) -> int:
        return len(self.a)

    def subset(self, idx) -> "PairDataset":
        idx = list(idx)
        return PairDataset([self.a[i] for i in idx], [self.b[i] for i in idx], [self.names[i] for i in idx])


def match_pairs(dir_a, dir_b) -> tuple[list[tuple[Path, Path]], list[str]]:
    """Pair files by stem; returns (matched pairs, sorted unmatched names)."""
    fa = {p.stem: p for p in list_images(dir_a)}
    fb = {p.stem: p for p in list_images(dir_b)}
    common = sorted(fa.keys() & fb.keys())
    unmatched = sorted((fa.keys() ^ fb.keys()))
    return [(fa[k], fb[k]) for k in common], unmatched


def load_pair_dirs(dir_a, dir_b, allow_partial: bool = False) -> PairDataset:
    for d in (dir_a, dir_b):
        if not Path(d).is_dir():
            raise DatasetError(f"{d}: not a directory")
    pairs, unmatched = match_pairs(dir_a, dir_b)
    if unmatched:
        msg = "unmatched filenames: " + ", ".join(unmatched)
        if not allow_partial:
            raise DatasetError(msg)
        warnings.warn(msg, stacklevel=2)
    if not pairs:
        raise DatasetError(f"no paired images found in {dir_a} and {dir_b}")
    return PairDataset([read_gray(pa) for pa, _ in pairs], [read_gray(pb) for _, pb in pairs],
                       [pa.stem for pa, _ in pairs])


# ---------------------------------------------------------------- synthetic

def _normalize(x: np.ndarray) -> np.ndarray:
    lo, hi = x.min(), x.max()
    return (x - lo) / (hi - lo) if hi > lo else np.zeros_like(x)


def synthetic_pair(rng: np.random.Generator, size: int = 64) -> tuple[np.ndarray, np.ndarray]:
    """A thermal-like and a visible-like view of one random scene.

    Both share a smooth background layout. The first adds a few bright compact
    blobs on a dim, low-detail field; the second carries fine texture
    (oriented gratings plus filtered noise) and hard region edges.
    """
    yy, xx = np.mgrid[0:size, 0:size] / size
    layout = _normalize(gaussian_filter(rng.normal(size=(size, size)), size / 6, mode="wrap"))
    regions = (layout > rng.uniform(0.35, 0.65)).astype(float)

    blobs = np.zeros((size, size))
    for _ in range(rng.integers(2, 5)):
        cy, cx = rng.uniform(0.15, 0.85, 2)
        r = rng.uniform(0.04, 0.12)
        blobs += np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * r * r))
    thermal = 0.25 * layout + 0.75 * np.clip(blobs, 0, 1)

    theta = rng.uniform(0, np.pi)
    freq = rng.uniform(6, 14)
    grating = 0.5 + 0.5 * np.sin(2 * np.pi * freq * (xx * np.cos(theta) + yy * np.sin(theta)))
    fine = _normalize(gaussian_filter(rng.normal(size=(size, size)), 0.8))
    visible = 0.35 * regions + 0.35 * grating * (0.4 + 0.6 * layout) + 0.3 * fine
    return np.clip(thermal, 0, 1), np.clip(_normalize(visible), 0, 1)


def synthetic_dataset(n: int = 8, size: int = 64, seed: int = 0, identical: bool = False) -> PairDataset:
    """n textured pairs; ``identical=True`` sets the second modality equal to the first."""
    if n < 1:
        raise DatasetError(f"need at least one pair, got n={n}")
    rng = np.random.default_rng(seed)
    a, b = [], []
    for _ in range(n):
        t, v = synthetic_pair(rng, size)
        a.append(v if identical else t)
        b.append(v.copy() if identical else v)
    return PairDataset(a, b)
