import pytest
import torch
from hypothesis import given, settings, strategies as st

from m3sr.scan2d import (DIRECTIONS, SS2D, ConfigError, flatten_direction, ss2d,
                         unflatten_direction)
from m3sr.ssm import S6, ShapeError, s6_forward
from m3sr.tensors import grad_check


def test_flatten_orders_on_2x2():
    F = torch.tensor([[[1.0, 2.0], [3.0, 4.0]]])  # a b / c d
    expect = {0: [1, 2, 3, 4], 1: [1, 3, 2, 4], 2: [4, 3, 2, 1], 3: [4, 2, 3, 1]}
    for d, order in expect.items():
        assert flatten_direction(F, d)[:, 0].tolist() == order


def test_single_pixel_same_under_all_directions():
    F = torch.randn(5, 1, 1)
    seqs = [flatten_direction(F, d) for d in DIRECTIONS]
    assert all(torch.equal(s, seqs[0]) for s in seqs)
    assert seqs[0].shape == (1, 5)


def test_bad_direction():
    with pytest.raises(ValueError):
        flatten_direction(torch.zeros(1, 2, 2), 4)
    with pytest.raises(ShapeError):
        unflatten_direction(torch.zeros(5, 1), 0, 2, 2)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 4), st.integers(1, 7), st.integers(1, 7), st.integers(0, 2**31))
def test_flatten_round_trip_and_rotation_duality(C, H, W, seed):
    g = torch.Generator().manual_seed(seed)
    F = torch.randint(-100, 100, (C, H, W), generator=g).double()
    rot = F.flip(-1).flip(-2)
    for d in DIRECTIONS:
        assert torch.equal(unflatten_direction(flatten_direction(F, d), d, H, W), F)
    for fwd, bwd in ((0, 2), (1, 3)):
        s = flatten_direction(F, fwd)
        assert torch.equal(flatten_direction(rot, fwd), s.flip(0))
        assert torch.equal(flatten_direction(F, bwd), s.flip(0))


@settings(max_examples=15, deadline=None)
@given(st.integers(1, 3), st.integers(1, 8), st.integers(1, 8))
def test_shape_preserved(C, H, W):
    m = SS2D(C, 4).double()
    F = torch.randn(C, H, W, dtype=torch.float64)
    with torch.no_grad():
        assert m(F).shape == F.shape


def test_zero_input_zero_bias_gives_zero():
    m = SS2D(3, 4)
    with torch.no_grad():
        for s in m.scans:
            s.x_proj.bias.zero_()
        assert torch.count_nonzero(m(torch.zeros(3, 4, 5))) == 0


def test_single_pixel_is_sum_of_four_single_steps():
    m = SS2D(3, 4).double()
    F = torch.randn(3, 1, 1, dtype=torch.float64)
    with torch.no_grad():
        ref = sum(s6_forward(F.reshape(1, 3), s) for s in m.scans).reshape(3, 1, 1)
        assert torch.allclose(m(F), ref, atol=1e-14, rtol=0)


def test_grouped_partials_match_hand_composition():
    m = SS2D(2, 3).double()
    F = torch.randn(2, 2, 4, 5, dtype=torch.float64)
    with torch.no_grad():
        total = 0
        for d, layer in zip(DIRECTIONS, m.scans):
            ref = unflatten_direction(layer(flatten_direction(F, d)), d, 4, 5)
            assert torch.allclose(m.partial(F, d), ref, atol=1e-13, rtol=0)
            total = total + ref
        assert torch.allclose(m(F), total, atol=1e-13, rtol=0)
        assert torch.allclose(ss2d(F, list(m.scans)), total, atol=1e-13, rtol=0)
        assert torch.equal(ss2d(F, m), m(F))


def test_wrong_parameter_set_count():
    with pytest.raises(ConfigError):
        ss2d(torch.zeros(2, 2, 2), [S6(2, 4)] * 3)


def test_ss2d_grad_check():
    m = SS2D(2, 3).double()
    F = torch.randn(2, 3, 3, dtype=torch.float64)
    target = torch.randn(2, 3, 3, dtype=torch.float64)
    f = lambda x, *ps: ((m(x) - target) ** 2).sum()
    assert grad_check(f, [F] + list(m.parameters())).passed
