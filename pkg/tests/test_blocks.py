import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mambadfuse import tensor as T
from mambadfuse.blocks import (FeatureSeq, ScanConfig, init_m3_block, init_mamba_block, m3_block,
                               mamba_block, patch_embed, unpatch_embed)
from mambadfuse.functional import causal_depthwise_conv1d, layer_norm
from mambadfuse.model import deep_fuse, named_parameters
from mambadfuse.scan import selective_scan
from mambadfuse.tensor import Tensor


def _seq(rng, B=2, H=3, W=4, C=6):
    return FeatureSeq(Tensor(rng.normal(size=(B, H * W, C))), H, W)


def _randomize(params, rng):
    for _, t in named_parameters(params):
        if not np.any(t.data):
            t.data = rng.normal(scale=0.3, size=t.shape)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000), C=st.integers(1, 6), n=st.integers(1, 20))
def test_mamba_block_identity_at_init(seed, C, n):
    rng = np.random.default_rng(seed)
    seq = FeatureSeq(Tensor(rng.normal(size=(2, n, C))), n, 1)
    out = mamba_block(seq, init_mamba_block(rng, C, d_state=3))
    assert np.max(np.abs(out.data.data - seq.data.data)) == 0.0


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000), guidance=st.sampled_from(["both", "i1", "i2"]),
       fused_out=st.booleans())
def test_m3_block_identity_at_init(seed, guidance, fused_out):
    rng = np.random.default_rng(seed)
    f1, f2, ff = _seq(rng), _seq(rng), _seq(rng)
    p = init_m3_block(rng, 6, d_state=3, guidance=guidance, use_fused_branch_output=fused_out)
    out = m3_block(f1, f2, ff, p)
    assert np.max(np.abs(out.data.data - ff.data.data)) == 0.0


def test_deep_fuse_identity_at_init():
    rng = np.random.default_rng(0)
    f1, f2, fs = _seq(rng), _seq(rng), _seq(rng)
    blocks = [init_m3_block(rng, 6, d_state=3) for _ in range(3)]
    out = deep_fuse(f1, f2, fs, blocks)
    assert np.max(np.abs(out.data.data - fs.data.data)) == 0.0


def test_mamba_block_matches_manual_composition():
    rng = np.random.default_rng(1)
    seq = _seq(rng)
    p = init_mamba_block(rng, 6, d_state=3)
    _randomize(p, rng)
    normed = layer_norm(seq.data, p.norm_gamma, p.norm_beta)
    x = p.mlp_x(normed)
    z = p.mlp_z(normed)
    xc = T.silu(causal_depthwise_conv1d(x, p.conv_w, p.conv_b))
    f = selective_scan(xc, p.ssm, chunk=None, fused=False)
    want = p.mlp_f(f * T.silu(z)) + seq.data
    got = mamba_block(seq, p, ScanConfig(chunk=3))
    np.testing.assert_allclose(got.data.data, want.data, atol=1e-12)


def test_mamba_block_trace_exposes_activations():
    rng = np.random.default_rng(2)
    trace = {}
    mamba_block(_seq(rng), init_mamba_block(rng, 6, d_state=3), trace=trace)
    assert set(trace) == {"F_norm", "x", "z", "x_prime", "f", "f_prime"}
    assert trace["x"].shape == (2, 12, 12)


def test_m3_trace_exposes_all_branches():
    rng = np.random.default_rng(3)
    trace = {}
    m3_block(_seq(rng), _seq(rng), _seq(rng), init_m3_block(rng, 6, d_state=3), trace=trace)
    for key in ("x_i1", "x_i2", "x_if", "x_prime_i1", "y_i1", "y_i2", "y_if", "z", "y_prime_i1", "y_prime_i2"):
        assert key in trace


def test_mamba_block_is_causal_over_tokens():
    rng = np.random.default_rng(4)
    p = init_mamba_block(rng, 4, d_state=3)
    _randomize(p, rng)
    x = rng.normal(size=(1, 15, 4))
    a = mamba_block(FeatureSeq(Tensor(x), 3, 5), p).data.data
    x[0, 9:] = rng.normal(size=(6, 4))
    b = mamba_block(FeatureSeq(Tensor(x), 3, 5), p).data.data
    np.testing.assert_array_equal(a[0, :9], b[0, :9])


@pytest.mark.parametrize("tied", [True, False])
def test_m3_swap_equivariance_iff_tied(tied):
    rng = np.random.default_rng(5)
    p = init_m3_block(rng, 6, d_state=3, tie_branches=tied)
    _randomize(p, rng)
    f1, f2, ff = _seq(rng), _seq(rng), _seq(rng)
    a = m3_block(f1, f2, ff, p).data.data
    b = m3_block(f2, f1, ff, p).data.data
    if tied:
        np.testing.assert_allclose(a, b, atol=1e-12)
    else:
        assert not np.allclose(a, b)


def test_one_modal_guidance_differs():
    rng = np.random.default_rng(6)
    both = init_m3_block(np.random.default_rng(0), 6, d_state=3, guidance="both")
    only = init_m3_block(np.random.default_rng(0), 6, d_state=3, guidance="i1")
    for p in (both, only):
        _randomize(p, np.random.default_rng(1))
    assert set(only.branches) == {"i1", "if"}
    f1, f2, ff = _seq(rng), _seq(rng), _seq(rng)
    assert not np.allclose(m3_block(f1, f2, ff, both).data.data, m3_block(f1, f2, ff, only).data.data)


def test_fused_branch_flag_changes_output():
    rng = np.random.default_rng(7)
    p = init_m3_block(rng, 6, d_state=3)
    _randomize(p, rng)
    f1, f2, ff = _seq(rng), _seq(rng), _seq(rng)
    a = m3_block(f1, f2, ff, p).data.data
    p.use_fused_branch_output = True
    b = m3_block(f1, f2, ff, p).data.data
    assert not np.allclose(a, b)


def test_patch_embed_roundtrip_row_major():
    rng = np.random.default_rng(8)
    img = Tensor(rng.normal(size=(2, 3, 4, 5)))
    seq = patch_embed(img)
    assert seq.shape == (2, 20, 3)
    # token t = row * W + col
    np.testing.assert_array_equal(seq.data.data[1, 2 * 5 + 3], img.data[1, :, 2, 3])
    np.testing.assert_array_equal(unpatch_embed(seq).data, img.data)


def test_feature_seq_validates_token_count():
    with pytest.raises(ValueError, match="tokens"):
        FeatureSeq(Tensor(np.zeros((1, 7, 2))), 2, 3)


def test_block_rejects_channel_mismatch():
    rng = np.random.default_rng(9)
    with pytest.raises(ValueError, match="channels"):
        mamba_block(_seq(rng, C=5), init_mamba_block(rng, 6))
    with pytest.raises(ValueError, match="mismatch"):
        m3_block(_seq(rng), _seq(rng, H=2), _seq(rng), init_m3_block(rng, 6))
