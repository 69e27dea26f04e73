import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from m3sr.ssm import ShapeError
from m3sr.wavelet import HAAR, SubBands, dwt2, idwt2


def test_constant_block():
    s = dwt2(torch.ones(1, 2, 2, dtype=torch.float64))
    assert s.LL.item() == 2.0 and s.LH.item() == 0 and s.HL.item() == 0 and s.HH.item() == 0


def test_hand_computed_block():
    s = dwt2(torch.tensor([[[1.0, 2.0], [3.0, 4.0]]], dtype=torch.float64))
    assert (s.LL.item(), s.HL.item(), s.LH.item(), s.HH.item()) == (5.0, -1.0, -2.0, 0.0)


def test_inverse_examples():
    z = torch.zeros(1, 1, 1, dtype=torch.float64)
    assert torch.equal(idwt2(SubBands(z + 2, z, z, z)), torch.ones(1, 2, 2, dtype=torch.float64))
    assert torch.count_nonzero(idwt2(SubBands(z, z, z, z))) == 0


def test_haar_matrix_orthonormal():
    np.testing.assert_allclose((HAAR @ HAAR.T).numpy(), np.eye(4), atol=1e-15)


def test_errors():
    with pytest.raises(ShapeError):
        dwt2(torch.zeros(1, 3, 4))
    z = torch.zeros(1, 2, 2)
    with pytest.raises(ShapeError):
        idwt2(SubBands(z, z, z, torch.zeros(1, 2, 3)))


def test_matches_loop_oracle():
    g = torch.Generator().manual_seed(0)
    F = torch.randn(3, 6, 4, generator=g, dtype=torch.float64)
    s = dwt2(F)
    a = F.numpy()
    for c in range(3):
        for i in range(3):
            for j in range(2):
                p00, p01 = a[c, 2 * i, 2 * j], a[c, 2 * i, 2 * j + 1]
                p10, p11 = a[c, 2 * i + 1, 2 * j], a[c, 2 * i + 1, 2 * j + 1]
                assert s.LL[c, i, j].item() == pytest.approx((p00 + p01 + p10 + p11) / 2, abs=1e-14)
                assert s.HL[c, i, j].item() == pytest.approx((p00 - p01 + p10 - p11) / 2, abs=1e-14)
                assert s.LH[c, i, j].item() == pytest.approx((p00 + p01 - p10 - p11) / 2, abs=1e-14)
                assert s.HH[c, i, j].item() == pytest.approx((p00 - p01 - p10 + p11) / 2, abs=1e-14)


maps = st.tuples(st.integers(1, 8), st.integers(1, 16), st.integers(1, 16), st.integers(0, 2**31))


@settings(max_examples=50, deadline=None)
@given(maps)
def test_perfect_reconstruction_and_energy(m):
    C, h, w, seed = m
    g = torch.Generator().manual_seed(seed)
    F = torch.randn(C, 2 * h, 2 * w, generator=g, dtype=torch.float64)
    s = dwt2(F)
    assert all(b.shape == (C, h, w) for b in s)
    assert (idwt2(s) - F).abs().max() < 1e-12
    energy = sum((b**2).sum() for b in s)
    assert abs(energy - (F**2).sum()) / (F**2).sum() < 1e-9
    s2 = SubBands(*torch.randn(4, C, h, w, generator=g, dtype=torch.float64))
    back = dwt2(idwt2(s2))
    assert max((a - b).abs().max() for a, b in zip(back, s2)) < 1e-12


@settings(max_examples=30, deadline=None)
@given(maps, st.floats(-3, 3), st.floats(-3, 3))
def test_linearity(m, alpha, beta):
    C, h, w, seed = m
    g = torch.Generator().manual_seed(seed)
    F, G = torch.randn(2, C, 2 * h, 2 * w, generator=g, dtype=torch.float64)
    lhs = dwt2(alpha * F + beta * G)
    for a, f, gg in zip(lhs, dwt2(F), dwt2(G)):
        assert torch.allclose(a, alpha * f + beta * gg, atol=1e-12, rtol=0)


def test_batched_layout():
    F = torch.randn(2, 3, 4, 4, dtype=torch.float64)
    s = dwt2(F)
    for k in range(2):
        sk = dwt2(F[k])
        assert all(torch.equal(a[k], b) for a, b in zip(s, sk))
