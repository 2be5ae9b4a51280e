import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays
from scipy.ndimage import gaussian_filter
from skimage.metrics import structural_similarity

from mambadfuse import metrics as M
from mambadfuse.losses import ssim as ssim_loss_route
from mambadfuse.tensor import Tensor

img_strategy = arrays(np.float64, (16, 16), elements=st.floats(0, 1, allow_nan=False))


def _textured(seed, size=48):
    rng = np.random.default_rng(seed)
    return np.clip(gaussian_filter(rng.random((size, size)), 1.0) * 2 - 0.5, 0, 1)


def test_en_oracles():
    assert M.en(np.full((8, 8), 0.3)) == 0.0
    ramp = (np.arange(256) / 255.0).reshape(16, 16)
    assert M.en(ramp) == pytest.approx(8.0, abs=1e-9)
    assert M.en(np.array([[0.0, 1.0], [1.0, 0.0]])) == pytest.approx(1.0, abs=1e-12)


def test_sd_and_sf_oracles():
    img = np.zeros((4, 8))
    img[:, 4:] = 1.0
    assert M.sd(img) == pytest.approx(127.5, abs=1e-9)
    # one vertical edge of height 255 across 7 column differences per row
    assert M.sf(img) == pytest.approx(np.sqrt(255.0 ** 2 / 7), abs=1e-9)
    assert M.sf(np.full((5, 5), 0.2)) == 0.0


@settings(max_examples=30, deadline=None)
@given(img_strategy)
def test_mi_self_is_twice_entropy(x):
    assert M.mi(x, x, x) == pytest.approx(2 * M.en(x), abs=1e-6)


@settings(max_examples=30, deadline=None)
@given(img_strategy, img_strategy, img_strategy)
def test_metric_ranges(f, a, b):
    assert -2.0 <= M.scd(f, a, b) <= 2.0
    assert 0.0 <= M.qabf(f, a, b) <= 1.0
    assert 0.0 <= M.en(f) <= 8.0
    assert M.mutual_information(f, a) >= -1e-12
    assert M.mutual_information(f, a) == pytest.approx(M.mutual_information(a, f), abs=1e-9)


def test_ssim_self_is_one():
    x = _textured(0)
    assert M.ssim_metric(x, x) == pytest.approx(1.0, abs=1e-9)
    assert M.ssim_metric(np.full((16, 16), 0.5), np.full((16, 16), 0.5)) == pytest.approx(1.0, abs=1e-9)


@pytest.mark.parametrize("seed", range(10))
def test_ssim_matches_skimage(seed):
    rng = np.random.default_rng(seed)
    x = _textured(seed, 40)
    y = np.clip(x + rng.normal(scale=0.1, size=x.shape), 0, 1)
    ref = structural_similarity(x, y, data_range=1.0, gaussian_weights=True, sigma=1.5,
                                use_sample_covariance=False)
    assert M.ssim_metric(x, y) == pytest.approx(ref, abs=1e-6)


def _ssim_window_loop(x, y):
    """Window-by-window SSIM with an explicit 11x11 Gaussian, no separable filtering."""
    g = np.exp(-((np.arange(11) - 5.0) ** 2) / (2 * 1.5 ** 2))
    w = np.outer(g, g) / np.outer(g, g).sum()
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    vals = []
    for i in range(x.shape[0] - 10):
        for j in range(x.shape[1] - 10):
            px, py = x[i:i + 11, j:j + 11], y[i:i + 11, j:j + 11]
            mx, my = (w * px).sum(), (w * py).sum()
            vx = (w * (px - mx) ** 2).sum()
            vy = (w * (py - my) ** 2).sum()
            cxy = (w * (px - mx) * (py - my)).sum()
            vals.append((2 * mx * my + c1) * (2 * cxy + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2)))
    return float(np.mean(vals))


def test_ssim_matches_window_loop_and_loss_route():
    rng = np.random.default_rng(11)
    x, y = rng.random((17, 19)), rng.random((17, 19))
    want = _ssim_window_loop(x, y)
    assert M.ssim_metric(x, y) == pytest.approx(want, abs=1e-9)
    assert float(ssim_loss_route(Tensor(x), Tensor(y)).data) == pytest.approx(want, abs=1e-9)


def test_ssim_rejects_small_or_mismatched():
    with pytest.raises(ValueError):
        M.ssim_metric(np.zeros((10, 20)), np.zeros((10, 20)))
    with pytest.raises(ValueError):
        M.ssim_metric(np.zeros((12, 12)), np.zeros((12, 13)))


def test_vif_self_is_one():
    x = _textured(2, 64)
    assert M.vif_pixel(x, x) == pytest.approx(1.0, abs=1e-6)
    assert M.vif_fusion(x, x, x) == pytest.approx(1.0, abs=1e-6)
    assert M.vif_pixel(np.full((40, 40), 0.5), np.full((40, 40), 0.5)) == 1.0


def test_vif_degrades_with_noise():
    x = _textured(3, 64)
    noisy = np.clip(x + np.random.default_rng(0).normal(scale=0.2, size=x.shape), 0, 1)
    assert M.vif_pixel(x, noisy) < 0.9


def test_qabf_ceiling_and_flat_sources():
    x = _textured(4)
    ceiling = 0.9994 / (1 + np.exp(-15 * 0.5)) * 0.9879 / (1 + np.exp(-22 * 0.2))
    assert M.qabf(x, x, x) == pytest.approx(ceiling, abs=1e-9)
    # zero padding gives constant non-zero images border edges, so use black sources
    black = np.zeros_like(x)
    assert M.qabf(x, black, black) == 0.0
    with pytest.raises(ValueError, match="shape"):
        M.qabf(x, x[:20, :20], x)


def test_scd_oracle():
    rng = np.random.default_rng(5)
    a, b = rng.random((20, 20)), rng.random((20, 20))
    f = a + b
    # f - b = a and f - a = b, so both correlations are exactly 1
    assert M.scd(f, a, b) == pytest.approx(2.0, abs=1e-12)
    assert M.scd(np.zeros((4, 4)), np.zeros((4, 4)), np.zeros((4, 4))) == 0.0


def test_all_metrics_column_order():
    x = _textured(6)
    assert tuple(M.all_metrics(x, x, x)) == ("EN", "SD", "SF", "MI", "SCD", "VIF", "Qabf", "SSIM")
    assert M.COLUMNS == ("EN", "SD", "SF", "MI", "SCD", "VIF", "Qabf", "SSIM")


def test_metrics_reject_stacks():
    with pytest.raises(ValueError):
        M.en(np.zeros((2, 4, 4)))


def test_report_csv_roundtrip(tmp_path):
    rep = M.MetricReport(header={"checkpoint": "abc"})
    x = _textured(7)
    rep.add("a", M.all_metrics(x, x, x))
    rep.add("b", M.all_metrics(1 - x, x, x))
    back = M.MetricReport.from_csv(rep.to_csv())
    assert back.names == ["a", "b"] and back.header == {"checkpoint": "abc"}
    assert back.rows == rep.rows
    rep.save(tmp_path / "r.csv")
    assert (tmp_path / "r.txt").read_text().splitlines()[0].split() == ["name", *M.COLUMNS]
    with pytest.raises(ValueError, match="non-finite"):
        rep.add("c", {c: float("nan") for c in M.COLUMNS})
    with pytest.raises(ValueError, match="lacks"):
        rep.add("d", {"EN": 1.0})
