import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

import oracles
from oracles import as_map
from bghnet.errors import ConfigError, InputError
from bghnet.losses import (EPS, BoundaryParams, SsimParams, bce_loss, bf1_loss, extend_boundary,
                           extract_boundary, f1_loss, final_components, final_loss, side_components,
                           side_loss, ssim_loss, total_loss)

D = torch.float64
seeds = st.integers(0, 2 ** 31 - 1)


def _binary(seed, size=8, p=0.5):
    rng = np.random.default_rng(seed)
    g = np.zeros((size, size))
    while g.sum() in (0, g.size):
        g = (rng.random((size, size)) < p).astype(float)
    return g


def _soft(seed, size=8):
    return np.random.default_rng(seed).uniform(0.01, 0.99, (size, size))


# bce

def test_bce_examples():
    one = torch.ones(1, 1, 1, 1, dtype=D)
    assert bce_loss(one * (1 - EPS), one).item() <= 1e-6
    assert bce_loss(one * 0.5, one).item() == pytest.approx(math.log(2), abs=1e-12)
    assert bce_loss(one * 0.5, one * 0).item() == pytest.approx(0.693147, abs=1e-6)


def test_bce_clamps_extremes():
    g = as_map([[1.0, 0.0]])
    val = bce_loss(as_map([[0.0, 1.0]]), g)
    assert val.item() == pytest.approx(-math.log(EPS), rel=1e-6)


def test_shape_errors():
    with pytest.raises(InputError):
        bce_loss(torch.rand(1, 1, 4, 4), torch.rand(1, 1, 4, 5))
    with pytest.raises(InputError):
        f1_loss(torch.rand(1, 2, 4, 4), torch.rand(1, 2, 4, 4))


# f1

def test_f1_examples():
    g = np.zeros((4, 4))
    g[:2] = 1
    assert f1_loss(as_map(g), as_map(g)).item() < 1e-6
    assert f1_loss(torch.ones(1, 1, 4, 4, dtype=D), as_map(g)).item() == pytest.approx(1 / 3, abs=1e-6)
    assert f1_loss(as_map(1 - g), as_map(g)).item() == pytest.approx(1.0, abs=1e-6)


@given(seeds)
@settings(max_examples=30, deadline=None)
def test_f1_permutation_invariant(seed):
    p, g = _soft(seed), _binary(seed + 1)
    perm = np.random.default_rng(seed).permutation(64)
    a = f1_loss(as_map(p), as_map(g)).item()
    b = f1_loss(as_map(p.ravel()[perm].reshape(8, 8)), as_map(g.ravel()[perm].reshape(8, 8))).item()
    assert a == pytest.approx(b, abs=1e-12)


# boundaries

def test_extract_boundary_square_ring():
    m = np.zeros((5, 5))
    m[1:4, 1:4] = 1
    b = extract_boundary(as_map(m), 3)[0, 0].numpy()
    expected = oracles.boundary_set(m, 3)
    assert len(expected) == 8 and (2, 2) not in expected
    assert {tuple(ij) for ij in np.argwhere(b == 1)} == expected
    assert b.sum() == 8


def test_extract_boundary_trivial_maps():
    assert extract_boundary(torch.zeros(1, 1, 6, 6), 3).abs().sum() == 0
    assert extract_boundary(torch.ones(1, 1, 6, 6), 5).abs().sum() == 0
    with pytest.raises(ConfigError):
        extract_boundary(torch.ones(1, 1, 6, 6), 4)
    with pytest.raises(ConfigError):
        BoundaryParams(theta=2)


@given(seeds, st.sampled_from([1, 3, 5, 7]))
@settings(max_examples=40, deadline=None)
def test_extract_boundary_is_chebyshev(seed, theta):
    m = (np.random.default_rng(seed).random((9, 11)) < 0.6).astype(float)
    b = extract_boundary(as_map(m), theta)[0, 0].numpy()
    assert {tuple(ij) for ij in np.argwhere(b == 1)} == oracles.boundary_set(m, theta)
    assert set(np.unique(b)) <= {0.0, 1.0}


def test_extend_boundary_examples():
    b = torch.zeros(1, 1, 5, 5, dtype=D)
    b[0, 0, 2, 2] = 1
    assert torch.equal(extend_boundary(b, 1), b)
    ext = extend_boundary(b, 3)[0, 0]
    assert ext[1:4, 1:4].sum() == 9 and ext.sum() == 9
    with pytest.raises(ConfigError):
        extend_boundary(b, 2)


@given(seeds)
@settings(max_examples=20, deadline=None)
def test_extend_monotone_in_window(seed):
    b = as_map(_soft(seed, 7))
    e3, e5, e7 = (extend_boundary(b, t) for t in (3, 5, 7))
    assert bool((e3 <= e5).all() and (e5 <= e7).all())


# bf1

def test_bf1_identical_maps():
    g = _binary(3)
    assert bf1_loss(as_map(g), as_map(g)).item() < 1e-6


def test_bf1_shifted_square_matches_oracle():
    g = np.zeros((8, 8))
    g[2:6, 2:6] = 1
    p = np.roll(g, 1, axis=1)
    got = bf1_loss(as_map(p), as_map(g), BoundaryParams(3, 3)).item()
    assert got == pytest.approx(oracles.bf1_loss_binary(p, g, 3, 3), abs=1e-12)
    # a one-pixel shift sits inside the theta'=3 tolerance band but not theta'=1
    assert got < 1e-6
    strict = bf1_loss(as_map(p), as_map(g), BoundaryParams(3, 1)).item()
    assert strict == pytest.approx(oracles.bf1_loss_binary(p, g, 3, 1), abs=1e-12)
    assert strict > 0.1


@given(seeds, st.sampled_from([(3, 3), (3, 5), (5, 3), (5, 7)]))
@settings(max_examples=25, deadline=None)
def test_bf1_binary_matches_oracle(seed, params):
    p, g = _binary(seed, 10), _binary(seed + 7, 10)
    got = bf1_loss(as_map(p), as_map(g), BoundaryParams(*params)).item()
    assert got == pytest.approx(oracles.bf1_loss_binary(p, g, *params), abs=1e-12)


@given(seeds)
@settings(max_examples=25, deadline=None)
def test_bf1_nonincreasing_in_extension(seed):
    p, g = as_map(_soft(seed)), as_map(_binary(seed + 1))
    vals = [bf1_loss(p, g, BoundaryParams(3, t)).item() for t in (1, 3, 5, 7)]
    assert all(a >= b - 1e-12 for a, b in zip(vals, vals[1:]))


# ssim

def test_ssim_examples():
    g = as_map(_binary(5, 16))
    assert abs(ssim_loss(g, g).item()) < 1e-12
    half = torch.full((1, 1, 12, 12), 0.5, dtype=D)
    assert abs(ssim_loss(half, half).item()) < 1e-12
    with pytest.raises(InputError):
        ssim_loss(torch.rand(1, 1, 10, 10), torch.rand(1, 1, 10, 10))
    with pytest.raises(ConfigError):
        SsimParams(c1=0)


def test_ssim_half_plane_complement_matches_oracle():
    g = np.zeros((16, 16))
    g[:, 8:] = 1
    got = ssim_loss(as_map(1 - g), as_map(g)).item()
    assert got == pytest.approx(1 - oracles.ssim_windowed(1 - g, g), abs=1e-9)
    assert 1 < got <= 2


@given(seeds)
@settings(max_examples=10, deadline=None)
def test_ssim_soft_matches_oracle(seed):
    p, g = _soft(seed, 13), _binary(seed, 13)
    got = ssim_loss(as_map(p), as_map(g), SsimParams(window=7, sigma=1.2)).item()
    assert got == pytest.approx(1 - oracles.ssim_windowed(p, g, 7, 1.2), abs=1e-9)
    assert 0 <= got <= 2


# composites

def test_side_and_final_are_component_sums():
    p, g = as_map(_soft(1, 16)), as_map(_binary(2, 16))
    s = side_components(p, g)
    assert side_loss(p, g).item() == (s["bce"] + s["f1"] + s["bf1"]).item()
    assert side_loss(p, g).item() == pytest.approx(
        bce_loss(p, g).item() + f1_loss(p, g).item() + bf1_loss(p, g).item(), abs=1e-14)
    f = final_components(p, g)
    assert set(f) == {"bce", "f1", "ssim"}
    assert final_loss(p, g).item() == pytest.approx(
        bce_loss(p, g).item() + f1_loss(p, g).item() + ssim_loss(p, g).item(), abs=1e-14)
    assert set(final_components(p, g, bp=BoundaryParams())) == {"bce", "f1", "bf1", "ssim"}
    for comps, total in ((s, side_loss(p, g)), (f, final_loss(p, g))):
        assert all(total.item() >= v.item() for v in comps.values())


def _logits_of(g, scale=30.0):
    return scale * (2 * g - 1)


def test_total_loss_perfect_outputs():
    g = as_map(_binary(4, 16))
    bd = total_loss([_logits_of(g)] * 4, g)
    assert bd.total.item() < 1e-4
    assert len(bd.outputs) == 4


def test_total_is_sum_of_outputs():
    g = as_map(_binary(4, 16))
    outs = [torch.randn(1, 1, 16, 16, dtype=D, generator=torch.Generator().manual_seed(k)) for k in range(4)]
    bd = total_loss(outs, g)
    probs = [torch.sigmoid(o) for o in outs]
    expected = sum(side_loss(p, g).item() for p in probs[:3]) + final_loss(probs[3], g).item()
    assert bd.total.item() == pytest.approx(expected, abs=1e-12)
    assert sum(bd.per_output()) == pytest.approx(bd.total.item(), abs=1e-12)


def test_total_loss_flavors():
    g = as_map(_binary(6, 16))
    outs = [torch.zeros(1, 1, 16, 16, dtype=D)] * 4
    bce_only = total_loss(outs, g, flavor="bce").component_sums()
    assert bce_only["f1"] == bce_only["bf1"] == bce_only["ssim"] == 0.0
    assert bce_only["bce"] == pytest.approx(4 * math.log(2), abs=1e-12)
    side_all = total_loss(outs, g, flavor="side-all")
    assert all(set(c) == {"bce", "f1", "bf1"} for c in side_all.outputs)
    with_bf1 = total_loss(outs, g, final_bf1=True)
    assert set(with_bf1.outputs[-1]) == {"bce", "f1", "bf1", "ssim"}
    with pytest.raises(ConfigError):
        total_loss(outs, g, flavor="dice")
    with pytest.raises(InputError):
        total_loss(outs[:3], g)


@given(seeds)
@settings(max_examples=25, deadline=None)
def test_losses_nonnegative(seed):
    p, g = as_map(_soft(seed, 12)), as_map(_binary(seed, 12))
    sp = SsimParams(window=7)
    for v in (bce_loss(p, g), f1_loss(p, g), bf1_loss(p, g), ssim_loss(p, g, sp)):
        assert v.item() >= 0


@given(seeds)
@settings(max_examples=25, deadline=None)
def test_losses_vanish_on_ground_truth(seed):
    g = as_map(_binary(seed, 12))
    p = g.clamp(EPS, 1 - EPS)
    for v in (bce_loss(p, g), f1_loss(p, g), bf1_loss(p, g), ssim_loss(p, g, SsimParams(window=7))):
        assert v.item() <= 1e-4
