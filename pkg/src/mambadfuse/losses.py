"""Training objective: weighted SSIM, texture and intensity terms."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .functional import filter2d
from .tensor import Tensor

SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
SOBEL_Y = SOBEL_X.T.copy()

SSIM_WIN = 11
SSIM_SIGMA = 1.5
SSIM_K1, SSIM_K2, SSIM_L = 0.01, 0.03, 1.0


@dataclass
class LossWeights:
    w_ssim: float = 10.0
    w_text: float = 10.0
    w_int: float = 10.0

    def __post_init__(self):
        ws = (self.w_ssim, self.w_text, self.w_int)
        if min(ws) < 0 or max(ws) <= 0:
            raise ValueError(f"loss weights must be nonnegative with at least one positive, got {ws}")


def gaussian_1d(size: int = SSIM_WIN, sigma: float = SSIM_SIGMA) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(r * r) / (2.0 * sigma * sigma))
    return g / g.sum()


def _t(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def intensity_loss(fused, i1, i2) -> Tensor:
    """mean |fused - max(i1, i2)|."""
    fused, i1, i2 = _t(fused), _t(i1), _t(i2)
    target = np.maximum(i1.data, i2.data)
    return T.mean(T.absolute(fused - target))


def sobel_magnitude(x: Tensor) -> Tensor:
    """|gx| + |gy| with zero-padded 3x3 Sobel kernels."""
    return T.absolute(filter2d(x, SOBEL_X, "same")) + T.absolute(filter2d(x, SOBEL_Y, "same"))


def texture_loss(fused, i1, i2) -> Tensor:
    """mean | |grad fused| - max(|grad i1|, |grad i2|) |."""
    fused, i1, i2 = _t(fused), _t(i1), _t(i2)
    with T.no_grad():
        target = np.maximum(sobel_magnitude(i1).data, sobel_magnitude(i2).data)
    return T.mean(T.absolute(sobel_magnitude(fused) - target))


def _blur(x: Tensor) -> Tensor:
    g = gaussian_1d()
    return filter2d(filter2d(x, g[:, None], "valid"), g[None, :], "valid")


def ssim(x, y) -> Tensor:
    """Mean single-scale SSIM over valid 11x11 Gaussian windows (sigma 1.5, L = 1).

    Reduces over the last two axes and then averages over any leading axes.
    """
    x, y = _t(x), _t(y)
    h, w = x.shape[-2:]
    if h < SSIM_WIN or w < SSIM_WIN:
        raise ValueError(f"ssim: images {h}x{w} are smaller than the {SSIM_WIN}x{SSIM_WIN} window")
    c1 = (SSIM_K1 * SSIM_L) ** 2
    c2 = (SSIM_K2 * SSIM_L) ** 2
    mx, my = _blur(x), _blur(y)
    sxx = _blur(x * x) - mx * mx
    syy = _blur(y * y) - my * my
    sxy = _blur(x * y) - mx * my
    num = (2.0 * mx * my + c1) * (2.0 * sxy + c2)
    den = (mx * mx + my * my + c1) * (sxx + syy + c2)
    return T.mean(num / den)


def ssim_loss(fused, i1, i2) -> Tensor:
    """1 - (SSIM(fused, i1) + SSIM(fused, i2)) / 2."""
    fused = _t(fused)
    return 1.0 - (ssim(fused, i1) + ssim(fused, i2)) * 0.5


def loss_terms(fused, i1, i2) -> dict[str, Tensor]:
    return {"ssim": ssim_loss(fused, i1, i2),
            "text": texture_loss(fused, i1, i2),
            "int": intensity_loss(fused, i1, i2)}


def total_loss(fused, i1, i2, w: LossWeights | None = None) -> tuple[Tensor, dict[str, float]]:
    """Weighted sum of the three terms; also returns each unweighted term as a float."""
    w = w or LossWeights()
    terms = loss_terms(fused, i1, i2)
    total = terms["ssim"] * w.w_ssim + terms["text"] * w.w_text + terms["int"] * w.w_int
    return total, {k: float(v.data) for k, v in terms.items()}
