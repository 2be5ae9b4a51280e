"""Fusion quality metrics: EN, SD, SF, MI, SCD, VIF, Qabf, SSIM.

All functions take float images in [0, 1] (2-d arrays). Intensity-scaled
metrics (SD, SF, VIF) are reported in 8-bit units, i.e. on ``img * 255``;
histogram metrics (EN, MI) quantize with ``round(img * 255)``.
"""
from __future__ import annotations

import csv
import io
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import correlate1d
from scipy.signal import convolve2d

log = logging.getLogger(__name__)

COLUMNS = ("EN", "SD", "SF", "MI", "SCD", "VIF", "Qabf", "SSIM")


def _img(x) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    a = np.squeeze(a)
    if a.ndim != 2:
        raise ValueError(f"metrics expect a single 2-d image, got shape {np.shape(x)}")
    return a


def quantize(img) -> np.ndarray:
    return np.clip(np.round(_img(img) * 255.0), 0, 255).astype(np.int64)


def _same_shape(name: str, *imgs: np.ndarray) -> None:
    if len({im.shape for im in imgs}) > 1:
        raise ValueError(f"{name}: shape mismatch {[im.shape for im in imgs]}")


def _entropy(p: np.ndarray) -> float:
    p = p[p > 0]
    return float(-(p * np.log2(p)).sum())


def en(img) -> float:
    """Shannon entropy (bits) of the 256-bin histogram."""
    q = quantize(img).ravel()
    return _entropy(np.bincount(q, minlength=256) / q.size)


def sd(img) -> float:
    """Population standard deviation in 8-bit units."""
    return float(np.std(_img(img) * 255.0))


def sf(img) -> float:
    """sqrt(RF^2 + CF^2); RF/CF are RMS horizontal/vertical first differences (8-bit units)."""
    a = _img(img) * 255.0
    rf2 = np.mean(np.diff(a, axis=1) ** 2) if a.shape[1] > 1 else 0.0
    cf2 = np.mean(np.diff(a, axis=0) ** 2) if a.shape[0] > 1 else 0.0
    return float(np.sqrt(rf2 + cf2))


def mutual_information(x, y) -> float:
    qx, qy = quantize(x).ravel(), quantize(y).ravel()
    if qx.size != qy.size:
        raise ValueError("mutual_information: images differ in size")
    joint = np.bincount(qx * 256 + qy, minlength=256 * 256).reshape(256, 256) / qx.size
    return _entropy(joint.sum(axis=1)) + _entropy(joint.sum(axis=0)) - _entropy(joint.ravel())


def mi(fused, a, b) -> float:
    """MI(fused, a) + MI(fused, b), in bits."""
    return mutual_information(fused, a) + mutual_information(fused, b)


def pearson(x: np.ndarray, y: np.ndarray) -> float:
    """Pearson correlation; 0 when either input has zero variance."""
    xc = x - x.mean()
    yc = y - y.mean()
    den = np.sqrt((xc * xc).sum() * (yc * yc).sum())
    if den == 0:
        return 0.0
    return float(np.clip((xc * yc).sum() / den, -1.0, 1.0))


def scd(fused, a, b) -> float:
    """corr(fused - b, a) + corr(fused - a, b)."""
    f, a, b = _img(fused), _img(a), _img(b)
    _same_shape("scd", f, a, b)
    return pearson(f - b, a) + pearson(f - a, b)


def _fspecial_gauss(n: int, sigma: float) -> np.ndarray:
    m = (n - 1) / 2.0
    y, x = np.ogrid[-m:m + 1, -m:m + 1]
    h = np.exp(-(x * x + y * y) / (2.0 * sigma * sigma))
    h[h < np.finfo(h.dtype).eps * h.max()] = 0
    return h / h.sum()


def vif_pixel(ref, dist, sigma_nsq: float = 2.0) -> float:
    """Multi-scale pixel-domain VIF of ``dist`` w.r.t. ``ref`` (4 scales, 8-bit units).

    Scales whose window no longer fits are skipped. A reference without any
    local variance carries no information; the ratio is then defined as 1.
    """
    ref = _img(ref) * 255.0
    dist = _img(dist) * 255.0
    _same_shape("vif", ref, dist)
    eps = 1e-10
    num = den = 0.0
    for scale in range(1, 5):
        n = 2 ** (4 - scale + 1) + 1
        win = _fspecial_gauss(n, n / 5.0)
        if scale > 1:
            if min(ref.shape) < n:
                break
            ref = convolve2d(ref, win, mode="valid")[::2, ::2]
            dist = convolve2d(dist, win, mode="valid")[::2, ::2]
        if min(ref.shape) < n:
            break
        mu1 = convolve2d(ref, win, mode="valid")
        mu2 = convolve2d(dist, win, mode="valid")
        s1 = convolve2d(ref * ref, win, mode="valid") - mu1 * mu1
        s2 = convolve2d(dist * dist, win, mode="valid") - mu2 * mu2
        s12 = convolve2d(ref * dist, win, mode="valid") - mu1 * mu2
        s1 = np.maximum(s1, 0.0)
        s2 = np.maximum(s2, 0.0)
        g = s12 / (s1 + eps)
        sv = s2 - g * s12
        low1 = s1 < eps
        g[low1] = 0
        sv[low1] = s2[low1]
        s1[low1] = 0
        low2 = s2 < eps
        g[low2] = 0
        sv[low2] = 0
        neg = g < 0
        sv[neg] = s2[neg]
        g[neg] = 0
        sv[sv <= eps] = eps
        num += np.sum(np.log10(1.0 + g * g * s1 / (sv + sigma_nsq)))
        den += np.sum(np.log10(1.0 + s1 / sigma_nsq))
    if den == 0:
        return 1.0
    return float(num / den)


def vif_fusion(fused, a, b) -> float:
    """Mean of VIF(a -> fused) and VIF(b -> fused)."""
    return 0.5 * (vif_pixel(a, fused) + vif_pixel(b, fused))


# Xydeas-Petrovic constants
_QABF = dict(L=1.0, Tg=0.9994, kg=-15.0, Dg=0.5, Ta=0.9879, ka=-22.0, Da=0.8)
_SOBEL_H = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
_SOBEL_V = np.array([[1.0, 2.0, 1.0], [0.0, 0.0, 0.0], [-1.0, -2.0, -1.0]])


def _edge(img: np.ndarray):
    gx = convolve2d(img, _SOBEL_H, mode="same")
    gy = convolve2d(img, _SOBEL_V, mode="same")
    g = np.sqrt(gx * gx + gy * gy)
    alpha = np.full_like(img, np.pi / 2)
    nz = gx != 0
    with np.errstate(over="ignore"):  # subnormal gx: the ratio overflows to +-inf and arctan gives +-pi/2
        alpha[nz] = np.arctan(gy[nz] / gx[nz])
    return g, alpha


def _edge_preservation(g_s, a_s, g_f, a_f) -> np.ndarray:
    c = _QABF
    lo = np.minimum(g_s, g_f)
    hi = np.maximum(g_s, g_f)
    G = np.divide(lo, hi, out=np.zeros_like(hi), where=hi > 0)
    A = 1.0 - np.abs(a_s - a_f) / (np.pi / 2)
    qg = c["Tg"] / (1.0 + np.exp(c["kg"] * (G - c["Dg"])))
    qa = c["Ta"] / (1.0 + np.exp(c["ka"] * (A - c["Da"])))
    return qg * qa


def qabf(fused, a, b) -> float:
    """Xydeas-Petrovic gradient edge-preservation index in [0, 1].

    Identical textured inputs score Tg/(1+e^{7.5}) * Ta/(1+e^{-4.4}) ~= 0.9748,
    the ceiling implied by the constants. Sources without any edges score 0.
    """
    f, a, b = _img(fused), _img(a), _img(b)
    _same_shape("qabf", f, a, b)
    ga, aa = _edge(a)
    gb, ab = _edge(b)
    gf, af = _edge(f)
    wa, wb = ga ** _QABF["L"], gb ** _QABF["L"]
    den = wa.sum() + wb.sum()
    if den == 0:
        return 0.0
    q = (_edge_preservation(ga, aa, gf, af) * wa + _edge_preservation(gb, ab, gf, af) * wb).sum() / den
    return float(q)


def _gauss_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(r * r) / (2.0 * sigma * sigma))
    return g / g.sum()


def _blur_valid(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    r = len(g) // 2
    y = correlate1d(correlate1d(x, g, axis=0, mode="constant"), g, axis=1, mode="constant")
    return y[r:-r, r:-r] if r else y


def ssim_metric(x, y, data_range: float = 1.0) -> float:
    """Single-scale SSIM, 11x11 Gaussian window (sigma 1.5), K1=0.01, K2=0.03, valid windows."""
    x, y = _img(x), _img(y)
    if x.shape != y.shape:
        raise ValueError(f"ssim_metric: shape mismatch {x.shape} vs {y.shape}")
    if min(x.shape) < 11:
        raise ValueError(f"ssim_metric: image {x.shape} smaller than the 11x11 window")
    g = _gauss_window()
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    mx, my = _blur_valid(x, g), _blur_valid(y, g)
    sxx = _blur_valid(x * x, g) - mx * mx
    syy = _blur_valid(y * y, g) - my * my
    sxy = _blur_valid(x * y, g) - mx * my
    s = ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2))
    return float(s.mean())


def ssim_fusion(fused, a, b) -> float:
    return 0.5 * (ssim_metric(fused, a) + ssim_metric(fused, b))


def all_metrics(fused, a, b) -> dict[str, float]:
    """The eight metrics in report column order."""
    return {
        "EN": en(fused),
        "SD": sd(fused),
        "SF": sf(fused),
        "MI": mi(fused, a, b),
        "SCD": scd(fused, a, b),
        "VIF": vif_fusion(fused, a, b),
        "Qabf": qabf(fused, a, b),
        "SSIM": ssim_fusion(fused, a, b),
    }


# ---------------------------------------------------------------- reports

@dataclass
class MetricReport:
    names: list[str] = field(default_factory=list)
    rows: list[dict[str, float]] = field(default_factory=list)
    header: dict[str, str] = field(default_factory=dict)
    columns: tuple[str, ...] = COLUMNS

    def add(self, name: str, values: dict[str, float]) -> None:
        missing = [c for c in self.columns if c not in values]
        if missing:
            raise ValueError(f"metric row {name!r} lacks columns {missing}")
        bad = [c for c in self.columns if not np.isfinite(values[c])]
        if bad:
            raise ValueError(f"metric row {name!r} has non-finite values in {bad}")
        self.names.append(name)
        self.rows.append({c: float(values[c]) for c in self.columns})

    @property
    def count(self) -> int:
        return len(self.rows)

    def mean(self) -> dict[str, float]:
        if not self.rows:
            return {c: float("nan") for c in self.columns}
        return {c: float(np.mean([r[c] for r in self.rows])) for c in self.columns}

    def to_table(self, digits: int = 4) -> str:
        name_w = max([len("name"), len("mean")] + [len(n) for n in self.names])
        col_w = max(10, digits + 6)
        lines = [f"{'name':<{name_w}} " + " ".join(f"{c:>{col_w}}" for c in self.columns)]
        for n, r in zip(self.names, self.rows):
            lines.append(f"{n:<{name_w}} " + " ".join(f"{r[c]:>{col_w}.{digits}f}" for c in self.columns))
        m = self.mean()
        lines.append(f"{'mean':<{name_w}} " + " ".join(f"{m[c]:>{col_w}.{digits}f}" for c in self.columns))
        return "\n".join(lines)

    def to_csv(self) -> str:
        buf = io.StringIO()
        for k, v in self.header.items():
            buf.write(f"# {k}={v}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["name", *self.columns])
        for n, r in zip(self.names, self.rows):
            w.writerow([n, *(repr(r[c]) for c in self.columns)])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "MetricReport":
        header: dict[str, str] = {}
        body = []
        for line in text.splitlines():
            if line.startswith("#"):
                k, _, v = line[1:].strip().partition("=")
                header[k] = v
            elif line.strip():
                body.append(line)
        reader = csv.reader(body)
        cols = next(reader)
        if cols[0] != "name":
            raise ValueError(f"report header must start with 'name', got {cols[0]!r}")
        rep = cls(header=header, columns=tuple(cols[1:]))
        for row in reader:
            rep.add(row[0], {c: float(v) for c, v in zip(cols[1:], row[1:])})
        return rep

    def save(self, path) -> None:
        """Write the delimited report to ``path`` and the aligned table next to it (``.txt``)."""
        path = Path(path)
        path.write_text(self.to_csv())
        path.with_suffix(".txt").write_text(self.to_table() + "\n")


def _eval_threads() -> int:
    env = os.environ.get("MDF_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            log.warning("ignoring non-integer MDF_THREADS=%r", env)
    return os.cpu_count() or 1


def match_triples(dir_a, dir_b, dir_f) -> tuple[list[str], list[str]]:
    """Filename stems present in all three directories, and those missing somewhere."""
    from .images import list_images

    sets = [{p.stem: p for p in list_images(d)} for d in (dir_a, dir_b, dir_f)]
    common = sorted(set(sets[0]) & set(sets[1]) & set(sets[2]))
    unmatched = sorted((set(sets[0]) | set(sets[1]) | set(sets[2])) - set(common))
    return common, unmatched


def evaluate_dir(dir_a, dir_b, dir_f, header: dict[str, str] | None = None) -> MetricReport:
    """Metrics for every filename-matched (a, b, fused) triple, ordered by filename."""
    from .images import list_images, read_gray

    paths = [{p.stem: p for p in list_images(d)} for d in (dir_a, dir_b, dir_f)]
    common, unmatched = match_triples(dir_a, dir_b, dir_f)
    for name in unmatched:
        log.warning("skipping unmatched file %s", name)

    def one(name):
        a, b, f = (read_gray(p[name]) for p in paths)
        return all_metrics(f, a, b)

    report = MetricReport(header=dict(header or {}))
    with ThreadPoolExecutor(max_workers=_eval_threads()) as pool:
        results = list(pool.map(one, common))
    for name, values in zip(common, results):
        report.add(name, values)
    return report
