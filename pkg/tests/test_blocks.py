import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, settings, strategies as st

from m3sr.blocks import (BRANCHES, LN_EPS, FrequencyBranch, MambaBlock, MPFBlock, SpatialBranch,
                         SpectralBranch, VSSBlock, from_tokens, mamba_block, mpf_block,
                         to_tokens, vss_block)
from m3sr.scan2d import ConfigError
from m3sr.ssm import ShapeError, s6_forward
from m3sr.tensors import grad_check
from m3sr.wavelet import dwt2, idwt2

f64 = torch.float64


def _check(module, x, fn=None, max_coords=None):
    fn = fn or module
    target = torch.randn_like(fn(x).detach())
    f = lambda x_, *ps: ((fn(x_) - target) ** 2).mean()
    return grad_check(f, [x] + list(module.parameters()), max_coords=max_coords)


def _pass_through(branch):
    C = branch.channels
    with torch.no_grad():
        branch.vss.out_proj.weight.zero_()
        branch.vss.out_proj.bias.zero_()
        branch.merge.weight.copy_(torch.cat([torch.zeros(C, C), torch.eye(C)], dim=1))
        branch.merge.bias.zero_()


# ---- VSS


def test_vss_shape_and_kill_switch():
    blk = VSSBlock(4, 4)
    x = torch.randn(4, 4, 4)
    assert vss_block(x, blk).shape == (4, 4, 4)
    with torch.no_grad():
        blk.out_proj.weight.zero_()
        blk.out_proj.bias.zero_()
        assert torch.count_nonzero(vss_block(x, blk)) == 0


def test_vss_grad_check():
    blk = VSSBlock(2, 4).to(f64)
    x = torch.randn(1, 2, 2, 2, dtype=f64)
    assert _check(blk, x, lambda v: from_tokens(blk(to_tokens(v)))).passed


# ---- Mamba


def test_mamba_shape_and_kill_switch():
    blk = MambaBlock(4, 4)
    x = torch.randn(8, 4)
    assert mamba_block(x, blk).shape == (8, 4)
    with torch.no_grad():
        blk.out_proj.weight.zero_()
        blk.out_proj.bias.zero_()
        assert torch.count_nonzero(mamba_block(x, blk)) == 0
    with pytest.raises(ShapeError):
        blk(torch.randn(2, 3, 4, 1))


def test_mamba_without_gate_matches_hand_composition():
    blk = MambaBlock(3, 4).to(f64)
    with torch.no_grad():
        blk.gate_proj.weight.zero_()
        blk.gate_proj.bias.zero_()
    x = torch.randn(2, 7, 3, dtype=f64)
    with torch.no_grad():
        h = x @ blk.in_proj.weight.T + blk.in_proj.bias
        # causal depthwise conv written out: out[t] = sum_k w[k] * h[t - (K-1) + k]
        K = blk.conv_width
        w = blk.conv.weight[:, 0, :]
        conv = torch.zeros_like(h)
        for t in range(h.shape[1]):
            for k in range(K):
                src = t - (K - 1) + k
                if src >= 0:
                    conv[:, t] += w[:, k] * h[:, src]
        conv += blk.conv.bias
        s = torch.stack([s6_forward(F.silu(conv[b]), blk.s6) for b in range(2)])
        ref = s @ blk.out_proj.weight.T + blk.out_proj.bias
        assert torch.allclose(blk(x), ref, atol=1e-13, rtol=0)


def test_mamba_is_causal():
    blk = MambaBlock(2, 4).to(f64)
    x = torch.randn(1, 9, 2, dtype=f64)
    x2 = x.clone()
    x2[0, 6:] += 1.0
    with torch.no_grad():
        assert torch.equal(blk(x)[0, :6], blk(x2)[0, :6])


def test_mamba_grad_check():
    blk = MambaBlock(2, 3).to(f64)
    assert _check(blk, torch.randn(2, 5, 2, dtype=f64)).passed


# ---- branches


@pytest.mark.parametrize("cls", [SpatialBranch, FrequencyBranch])
def test_vss_branch_shape_and_pass_through(cls):
    br = cls(3, 4).to(f64)
    x = torch.randn(2, 3, 4, 6, dtype=f64)
    with torch.no_grad():
        assert br(x).shape == x.shape
        _pass_through(br)
        out = br(x)
    if cls is SpatialBranch:
        assert torch.equal(out, x)
    else:
        assert (out - x).abs().max() < 1e-12
    with pytest.raises(ShapeError):
        br(torch.randn(1, 2, 4, 4, dtype=f64))


def test_frequency_branch_shares_weights_across_subbands():
    br = FrequencyBranch(2, 4).to(f64)
    x = torch.randn(1, 2, 4, 4, dtype=f64)

    def per_band(t):
        f1 = to_tokens(t)
        return from_tokens(br.merge(torch.cat([br.vss(br.norm(f1)), f1], dim=-1)))

    with torch.no_grad():
        ref = idwt2(type(dwt2(x))(*(per_band(b) for b in dwt2(x))))
        assert torch.allclose(br(x), ref, atol=1e-13, rtol=0)


@pytest.mark.parametrize("cls", [SpatialBranch, FrequencyBranch])
def test_vss_branch_grad_check(cls):
    br = cls(2, 3).to(f64)
    assert _check(br, torch.randn(1, 2, 4, 4, dtype=f64)).passed


@pytest.mark.parametrize("G", [2, 4, 8])
def test_spectral_shape_and_kill_switch(G):
    br = SpectralBranch(3, G, 4)
    x = torch.randn(2, 3, 4, 4)
    with torch.no_grad():
        assert br(x).shape == x.shape
        br.reduce_conv.weight.zero_()
        br.reduce_conv.bias.zero_()
        assert torch.count_nonzero(br(x)) == 0


def test_spectral_single_group_is_plain_channel_scan():
    br = SpectralBranch(4, 1, 3).to(f64)
    x = torch.randn(2, 4, 3, 5, dtype=f64)
    with torch.no_grad():
        z = F.conv2d(x, br.expand_conv.weight, br.expand_conv.bias)
        seq = z.permute(0, 2, 3, 1).reshape(-1, 4, 1)
        back = br.mamba(seq).reshape(2, 3, 5, 4).permute(0, 3, 1, 2)
        ref = F.conv2d(back, br.reduce_conv.weight, br.reduce_conv.bias)
        assert torch.allclose(br(x), ref, atol=1e-13, rtol=0)


def test_spectral_sequence_layout_round_trip():
    br = SpectralBranch(3, 2)
    z = torch.randn(2, 6, 4, 5)
    seq = br.to_sequences(z)
    assert seq.shape == (2 * 4 * 5 * 2, 3, 1)
    # group g of pixel (b, i, j) holds channels g*C .. g*C + C-1
    assert torch.equal(seq[((1 * 4 + 2) * 5 + 3) * 2 + 1, :, 0], z[1, 3:6, 2, 3])
    assert torch.equal(br.from_sequences(seq, 2, 4, 5), z)


def test_spectral_bad_groups():
    with pytest.raises(ConfigError):
        SpectralBranch(3, 0)


def test_spectral_grad_check():
    br = SpectralBranch(2, 2, 3).to(f64)
    assert _check(br, torch.randn(1, 2, 4, 4, dtype=f64)).passed


# ---- layer norm


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 16), st.integers(0, 2**31))
def test_layer_norm_standardizes(C, seed):
    norm = torch.nn.LayerNorm(C, eps=LN_EPS).to(f64)
    g = torch.Generator().manual_seed(seed)
    t = torch.randn(5, 3, 4, C, generator=g, dtype=f64)
    # per-token spread of at least 1 keeps the eps bias (eps / var) under the tolerance
    t = (t - t.mean(-1, keepdim=True)) / t.std(-1, unbiased=False, keepdim=True)
    t = t * (1 + 2 * torch.rand(5, 3, 4, 1, generator=g, dtype=f64)) + 5 * torch.randn(5, 3, 4, 1, generator=g, dtype=f64)
    with torch.no_grad():
        y = SpatialBranch(C, 2).to(f64).norm(t) if C == 2 else norm(t)
    assert y.mean(-1).abs().max() < 1e-6
    assert (y.var(-1, unbiased=False) - 1).abs().max() < 1e-6


# ---- MPF


def _mpf(branches=BRANCHES):
    return MPFBlock(2, 4, groups=2, branches=branches).to(f64)


def test_mpf_zero_weights_identity():
    blk = _mpf()
    x = torch.randn(1, 2, 4, 4, dtype=f64)
    with torch.no_grad():
        for w in blk.weights.values():
            w.zero_()
        assert torch.equal(mpf_block(x[0], blk), x[0])


def test_mpf_single_weight_one():
    blk = _mpf()
    x = torch.randn(1, 2, 4, 4, dtype=f64)
    with torch.no_grad():
        outs = blk.branch_outputs(x)
        for name in BRANCHES:
            for other in blk.weights:
                blk.weights[other].fill_(float(other == name))
            assert (blk(x) - (outs[name] + x)).abs().max() <= 1e-12


def test_mpf_affine_in_weights():
    blk = _mpf()
    x = torch.randn(1, 2, 4, 4, dtype=f64)
    g = torch.Generator().manual_seed(1)
    with torch.no_grad():
        outs = blk.branch_outputs(x)

        def at(w):
            for name, v in zip(BRANCHES, w):
                blk.weights[name].fill_(float(v))
            return blk.fuse(x, outs)

        pts = torch.rand(3, 3, generator=g, dtype=f64)
        lam = torch.tensor([0.7, -0.5, 0.8], dtype=f64)  # sums to 1
        vals = [at(p) for p in pts]
        combo = sum(l * v for l, v in zip(lam, vals))
        assert (at(lam @ pts) - combo).abs().max() < 1e-12


@pytest.mark.parametrize("removed", BRANCHES)
def test_mpf_variant_reduces_to_remaining_branches(removed):
    keep = tuple(b for b in BRANCHES if b != removed)
    blk = _mpf(keep)
    full = _mpf()
    assert removed not in blk.weights and removed not in blk.branches
    assert sum(p.numel() for p in blk.parameters()) < sum(p.numel() for p in full.parameters())
    x = torch.randn(1, 2, 4, 4, dtype=f64)
    with torch.no_grad():
        outs = blk.branch_outputs(x)
        ref = x + sum(blk.weights[n] * outs[n] for n in keep)
        assert (blk(x) - ref).abs().max() < 1e-14


def test_mpf_unknown_branch():
    with pytest.raises(ConfigError):
        MPFBlock(2, branches=("spatial", "temporal"))


def test_mpf_init_weights_uniform():
    torch.manual_seed(3)
    vals = torch.stack([w.detach() for _ in range(30) for w in MPFBlock(1, 2, 1).weights.values()])
    assert vals.min() >= 0 and vals.max() < 1


def test_mpf_shape_and_grad_check():
    blk = _mpf()
    x = torch.randn(1, 2, 4, 4, dtype=f64)
    assert blk(x).shape == x.shape
    assert _check(blk, x).passed
