"""One test per acceptance criterion, at the stated tolerances.

The training runs are shared through module fixtures; the whole file takes
roughly ten minutes on one core.
"""
import math
import time

import numpy as np
import pytest
from scipy.ndimage import gaussian_filter
from skimage.metrics import structural_similarity

from gradcases import CASES, TOLERANCE, run_case
from mambadfuse import metrics as M
from mambadfuse import tensor as T
from mambadfuse.blocks import FeatureSeq, init_m3_block, init_mamba_block, m3_block, mamba_block
from mambadfuse.checkpoint import load_checkpoint, save_checkpoint
from mambadfuse.cli import EXIT_CKPT, EXIT_DATA, EXIT_INPUT, EXIT_OK, VARIANTS, main, run_variant
from mambadfuse.config import load_config
from mambadfuse.data import synthetic_dataset
from mambadfuse.experiments import held_out, identity_mae, smoke_run, texture_rows
from mambadfuse.images import write_image
from mambadfuse.metrics import MetricReport
from mambadfuse.model import (channel_exchange, deep_fuse, fingerprint, init_model, make_exchange_mask,
                              named_parameters)
from mambadfuse.scan import discretize, scan_chunked, scan_sequential
from mambadfuse.tensor import Tensor

SMOKE_SEEDS = (0, 1, 2)


# ---------------------------------------------------------------- scan kernels

@pytest.mark.criterion("Scan oracle")
def test_scan_oracle(record_property):
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    count, worst = 0, 0.0
    for n in (1, 2, 257):
        for chunk in (1, 2, 3, 16, 64, n):
            for _ in range(6):
                B, C, D = int(rng.integers(1, 3)), int(rng.integers(1, 5)), int(rng.integers(1, 6))
                a = T.Tensor(-rng.uniform(0.05, 4.0, size=(C, D)))
                delta = T.Tensor(rng.uniform(1e-3, 1.0, size=(B, n, C)))
                disc = discretize(a, T.Tensor(rng.normal(size=(B, n, D))), delta)
                disc.c = T.Tensor(rng.normal(size=(B, n, D)))
                x = T.Tensor(rng.normal(size=(B, n, C)))
                d = T.Tensor(rng.normal(size=C))
                ref = scan_sequential(disc, x, d).data
                got = scan_chunked(disc, x, chunk, d).data
                worst = max(worst, float(np.max(np.abs(got - ref))))
                count += 1
    elapsed = time.perf_counter() - t0
    record_property("instances", count)
    record_property("max_abs_err", f"{worst:.1e}")
    assert count >= 100
    assert worst <= 1e-10
    assert elapsed < 30.0


@pytest.mark.criterion("ZOH correctness")
def test_zoh_correctness(record_property):
    a = T.Tensor(np.array([[-1.0]]))
    b = T.Tensor(np.array([[[1.7]]]))
    disc = discretize(a, b, T.Tensor(np.array([[[math.log(2.0)]]])))
    assert abs(disc.a_bar.data.item() - 0.5) <= 1e-12
    assert abs(disc.b_bar.data.item() - 0.5 * 1.7) <= 1e-12

    # A_bar -> 1 and B_bar -> delta*B, with the first-order remainder shrinking as delta^2
    rng = np.random.default_rng(0)
    a = T.Tensor(-rng.uniform(0.1, 5.0, size=(3, 4)))
    b = T.Tensor(rng.normal(size=(1, 1, 4)))
    bound = np.max(np.abs(a.data)) ** 2 * max(1.0, np.max(np.abs(b.data)))
    deltas = np.array([1e-1, 1e-2, 1e-3, 1e-4, 1e-5])
    errs = []
    for d in deltas:
        disc = discretize(a, b, T.Tensor(np.full((1, 1, 3), d)))
        assert np.max(np.abs(disc.a_bar.data - 1.0)) <= np.max(np.abs(a.data)) * d
        err_a = np.max(np.abs(disc.a_bar.data - 1.0 - d * a.data))
        err_b = np.max(np.abs(disc.b_bar.data - d * b.data[:, :, None, :]))
        errs.append(max(err_a, err_b))
    errs = np.array(errs)
    slope = np.polyfit(np.log10(deltas), np.log10(errs), 1)[0]
    record_property("log_slope", f"{slope:.3f}")
    assert np.all(errs <= bound * deltas ** 2)
    assert 1.9 <= slope <= 2.1


# ---------------------------------------------------------------- gradients

@pytest.mark.criterion("Gradient suite")
def test_gradient_suite(record_property):
    t0 = time.perf_counter()
    worst = {}
    for name in sorted(CASES):
        worst[name] = max(run_case(name, k) for k in range(3))
    elapsed = time.perf_counter() - t0
    top = max(worst, key=worst.get)
    record_property("cases", f"{len(worst)}x3")
    record_property("worst", f"{top} {worst[top]:.1e}")
    assert {"mamba_block", "m3_block", "total_loss"} <= worst.keys()
    assert all(v < TOLERANCE for v in worst.values()), {k: v for k, v in worst.items() if v >= TOLERANCE}
    assert elapsed < 300.0


# ---------------------------------------------------------------- block identities

@pytest.mark.criterion("Residual identities")
def test_residual_identities(record_property):
    rng = np.random.default_rng(7)
    worst = 0.0
    for trial in range(10):
        B, H, W, C = 2, int(rng.integers(1, 6)), int(rng.integers(1, 6)), int(rng.integers(1, 9))
        seqs = [FeatureSeq(Tensor(rng.normal(scale=3.0, size=(B, H * W, C))), H, W) for _ in range(3)]
        out = mamba_block(seqs[0], init_mamba_block(rng, C, d_state=3))
        worst = max(worst, float(np.max(np.abs(out.data.data - seqs[0].data.data))))
        p = init_m3_block(rng, C, d_state=3, guidance=("both", "i1", "i2")[trial % 3])
        out = m3_block(*seqs, p)
        worst = max(worst, float(np.max(np.abs(out.data.data - seqs[2].data.data))))
        blocks = [init_m3_block(rng, C, d_state=3) for _ in range(3)]
        out = deep_fuse(*seqs, blocks)
        worst = max(worst, float(np.max(np.abs(out.data.data - seqs[2].data.data))))
    record_property("max_abs_dev", worst)
    assert worst == 0.0


@pytest.mark.criterion("Channel-exchange algebra")
def test_channel_exchange_algebra():
    rng = np.random.default_rng(11)
    for _ in range(25):
        B, H, W, C = 2, int(rng.integers(1, 5)), int(rng.integers(1, 5)), int(rng.integers(1, 10))
        f1 = FeatureSeq(Tensor(rng.normal(size=(B, H * W, C))), H, W)
        f2 = FeatureSeq(Tensor(rng.normal(size=(B, H * W, C))), H, W)
        shape = (B, H * W, C)
        mask = make_exchange_mask(shape, int(rng.integers(1, 4)))
        e1, e2 = channel_exchange(f1, f2, mask)
        # involution
        g1, g2 = channel_exchange(e1, e2, mask)
        assert np.array_equal(g1.data.data, f1.data.data) and np.array_equal(g2.data.data, f2.data.data)
        # parameter-free: the multiset of values is preserved
        before = np.sort(np.concatenate([f1.data.data.ravel(), f2.data.data.ravel()]))
        after = np.sort(np.concatenate([e1.data.data.ravel(), e2.data.data.ravel()]))
        assert np.array_equal(before, after)
        # all-zero mask is the identity, all-one mask swaps the streams
        z1, z2 = channel_exchange(f1, f2, make_exchange_mask(shape, rule="none"))
        assert np.array_equal(z1.data.data, f1.data.data) and np.array_equal(z2.data.data, f2.data.data)
        s1, s2 = channel_exchange(f1, f2, make_exchange_mask(shape, rule="swap"))
        assert np.array_equal(s1.data.data, f2.data.data) and np.array_equal(s2.data.data, f1.data.data)


# ---------------------------------------------------------------- metrics

@pytest.mark.criterion("Metric oracles")
def test_metric_oracles(record_property):
    rng = np.random.default_rng(5)
    assert M.en(np.full((32, 32), 0.4)) == 0.0
    assert abs(M.en((np.arange(256) / 255.0).reshape(16, 16)) - 8.0) <= 1e-9
    half = np.zeros((16, 16))
    half[:, 8:] = 1.0
    assert abs(M.sd(half) - 127.5) <= 1e-9
    x = np.clip(gaussian_filter(rng.random((64, 64)), 1.0) * 2 - 0.5, 0, 1)
    assert abs(M.ssim_metric(x, x) - 1.0) <= 1e-9
    assert abs(M.mi(x, x, x) - 2 * M.en(x)) <= 1e-6
    assert abs(M.vif_fusion(x, x, x) - 1.0) <= 1e-6
    for _ in range(20):
        f, a, b = rng.random((3, 24, 24))
        assert -2.0 <= M.scd(f, a, b) <= 2.0
        assert 0.0 <= M.qabf(f, a, b) <= 1.0
    worst = 0.0
    for _ in range(10):
        a = rng.random((32, 40))
        b = np.clip(a + rng.normal(scale=0.2, size=a.shape), 0, 1)
        ref = structural_similarity(a, b, data_range=1.0, gaussian_weights=True, sigma=1.5,
                                    use_sample_covariance=False)
        worst = max(worst, abs(M.ssim_metric(a, b) - ref))
    record_property("ssim_vs_reference", f"{worst:.1e}")
    assert worst <= 1e-6


# ---------------------------------------------------------------- training

@pytest.fixture(scope="module")
def smoke_runs():
    return [smoke_run(seed) for seed in SMOKE_SEEDS]


@pytest.mark.slow
@pytest.mark.criterion("Training smoke")
def test_training_smoke(smoke_runs, record_property):
    ratios = [r.ratio for r in smoke_runs]
    total = sum(r.seconds for r in smoke_runs)
    record_property("ratios", "/".join(f"{v:.3f}" for v in ratios))
    record_property("seconds", f"{total:.0f}")
    assert all(len(r.curve) == 200 for r in smoke_runs)
    assert all(v <= 0.5 for v in ratios)
    assert total < 600.0


@pytest.mark.slow
@pytest.mark.criterion("End-to-end fusion sanity")
def test_identical_modalities_reconstruct(record_property):
    res = smoke_run(0, identical=True)
    mae = identity_mae(res.model, held_out(seed=0, identical=True))
    record_property("mae", f"{mae:.4f}")
    assert mae < 0.1


@pytest.mark.slow
@pytest.mark.criterion("End-to-end fusion sanity")
def test_fused_keeps_texture(smoke_runs, record_property):
    rows = texture_rows(smoke_runs[0].model, held_out(seed=0))
    record_property("EN_margin", f"{min(r['EN'] - r['EN_min'] for r in rows):.3f}")
    record_property("SF_margin", f"{min(r['SF'] - r['SF_min'] for r in rows):.3f}")
    for r in rows:
        assert r["EN"] >= r["EN_min"], r
        assert r["SF"] >= r["SF_min"], r


# ---------------------------------------------------------------- ablation harness

@pytest.mark.criterion("Ablation harness")
def test_ablation_harness(record_property):
    cfg = load_config(None, {"crop": "32", "batch_size": "2"})
    ds = synthetic_dataset(2, 32, seed=0)
    report = MetricReport(header=cfg.header())
    prints = {}
    for v in ("I", "II", "III", "IV", "V", "VI", "VII", "VIII"):
        model, curve, row = run_variant(v, cfg, ds, steps=1)
        assert len(curve) == 1 and math.isfinite(curve[0][1])
        report.add(v, row)
        prints[v] = fingerprint(model)
    back = MetricReport.from_csv(report.to_csv())
    assert back.names == list(prints) and back.columns == M.COLUMNS
    assert all(math.isfinite(x) for r in back.rows for x in r.values())
    assert len(set(prints.values())) == 8
    record_property("variants", len(prints))


# ---------------------------------------------------------------- checkpoint and CLI

@pytest.mark.criterion("Checkpoint + CLI contracts")
def test_checkpoint_roundtrip_bitwise(tmp_path):
    model = init_model(load_config().arch, seed=4)
    path = tmp_path / "m.mdfz"
    save_checkpoint(path, model, meta={"k": 1})
    back = load_checkpoint(path)
    for (na, a), (nb, b) in zip(named_parameters(model), named_parameters(back.model), strict=True):
        assert na == nb and a.data.tobytes() == b.data.tobytes()
    save_checkpoint(tmp_path / "again.mdfz", back.model, meta=back.meta)
    assert (tmp_path / "again.mdfz").read_bytes() == path.read_bytes()


@pytest.mark.criterion("Checkpoint + CLI contracts")
def test_cli_exit_codes_and_report_columns(tmp_path):
    rng = np.random.default_rng(0)
    ck = tmp_path / "m.mdfz"
    save_checkpoint(ck, init_model(load_config().arch, seed=0))
    dirs = {k: tmp_path / k for k in ("A", "B", "F")}
    for d in dirs.values():
        d.mkdir()
    for n in ("s1", "s2"):
        write_image(dirs["A"] / f"{n}.png", rng.random((24, 24)))
        write_image(dirs["B"] / f"{n}.png", rng.random((24, 24)))
    a, b = dirs["A"] / "s1.png", dirs["B"] / "s1.png"

    assert main(["fuse", "--input-a", str(dirs["A"]), "--input-b", str(dirs["B"]), "--ckpt", str(ck),
                 "--out", str(dirs["F"])]) == EXIT_OK
    write_image(tmp_path / "small.png", rng.random((20, 24)))
    assert main(["fuse", "--input-a", str(a), "--input-b", str(tmp_path / "small.png"), "--ckpt", str(ck),
                 "--out", str(tmp_path / "x.png")]) == EXIT_INPUT
    (tmp_path / "bad.mdfz").write_bytes(b"\x00" * 64)
    assert main(["fuse", "--input-a", str(a), "--input-b", str(b), "--ckpt", str(tmp_path / "bad.mdfz"),
                 "--out", str(tmp_path / "x.png")]) == EXIT_CKPT
    empty = tmp_path / "empty"
    empty.mkdir()
    assert main(["eval", "--dir-a", str(empty), "--dir-b", str(dirs["B"]), "--dir-fused", str(dirs["F"]),
                 "--out-report", str(tmp_path / "r.csv")]) == EXIT_DATA

    report = tmp_path / "report.csv"
    assert main(["eval", "--dir-a", str(dirs["A"]), "--dir-b", str(dirs["B"]), "--dir-fused", str(dirs["F"]),
                 "--out-report", str(report)]) == EXIT_OK
    header = next(l for l in report.read_text().splitlines() if not l.startswith("#"))
    assert header.split(",")[1:] == ["EN", "SD", "SF", "MI", "SCD", "VIF", "Qabf", "SSIM"]
    table_head = (tmp_path / "report.txt").read_text().splitlines()[0].split()
    assert table_head[1:] == ["EN", "SD", "SF", "MI", "SCD", "VIF", "Qabf", "SSIM"]
