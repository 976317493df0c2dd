import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from duralign import autodiff as ad
from duralign.checks import fd_grad_wrt_prediction
from duralign.softdtw import (SoftDtwConfig, band_limits, hard_dtw_oracle, path_cost, path_enumeration_oracle,
                              soft_dtw, soft_dtw_grad, soft_dtw_loss, soft_dtw_value_and_grad, soft_min)

BOTH = pytest.mark.parametrize("indexing", ["paper", "symmetric"])


# ---------------------------------------------------------------- soft_min

def test_soft_min_hard_limit():
    assert abs(soft_min([1.0, 2.0, 3.0], 1e-6) - 1.0) <= 1e-5


@given(st.floats(-1e3, 1e3), st.floats(1e-3, 10))
def test_soft_min_of_equal_pair(a, gamma):
    assert soft_min([a, a], gamma) == pytest.approx(a - gamma * math.log(2), abs=1e-9)


def test_soft_min_direct_evaluation():
    expected = -0.05 * math.log(math.exp(-0.0 / 0.05) + math.exp(-1.0 / 0.05))
    assert abs(soft_min([0.0, 1.0], 0.05) - expected) <= 1e-15


def test_soft_min_ignores_infinite_entries():
    assert soft_min([2.0, math.inf], 0.1) == 2.0
    assert soft_min([math.inf, math.inf], 0.1) == math.inf


@given(st.lists(st.floats(-100, 100), min_size=1, max_size=6), st.floats(1e-3, 5))
def test_soft_min_bounded_by_min(values, gamma):
    v = soft_min(values, gamma)
    assert v <= min(values) + 1e-9
    assert v >= min(values) - gamma * math.log(len(values)) - 1e-9


# ---------------------------------------------------------------- soft_dtw values

@BOTH
def test_identical_sequences_near_zero(indexing, rng):
    x = rng.normal(size=(7, 3))
    for warp in (0.0, 1.0, 128.0):
        assert soft_dtw(x, x, SoftDtwConfig(1e-3, warp, 30, indexing))[0] <= 1e-2


@BOTH
def test_single_cell(indexing, rng):
    x, y = rng.normal(size=(1, 4)), rng.normal(size=(1, 4))
    gamma = 0.05
    value = soft_dtw(x, y, SoftDtwConfig(gamma, 128.0, 1, indexing))[0]
    assert abs(value - np.abs(x - y).sum()) <= gamma * math.log(3)


@BOTH
def test_matches_path_enumeration_3x4(indexing, rng):
    x, y = rng.normal(size=(3, 2)), rng.normal(size=(4, 2))
    for warp in (0.0, 0.3, 128.0):
        cfg = SoftDtwConfig(0.05, warp, 4, indexing)
        assert abs(soft_dtw(x, y, cfg)[0] - path_enumeration_oracle(x, y, 0.05, warp, indexing)) <= 1e-10


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 5), st.integers(1, 5), st.integers(1, 3), st.floats(0.01, 2.0), st.floats(0.0, 3.0),
       st.sampled_from(["paper", "symmetric"]), st.integers(0, 2**31))
def test_oracle_equivalence_property(tx, ty, f, gamma, warp, indexing, seed):
    r = np.random.default_rng(seed)
    x, y = r.normal(size=(tx, f)), r.normal(size=(ty, f))
    cfg = SoftDtwConfig(gamma, warp, max(tx, ty), indexing)
    assert abs(soft_dtw(x, y, cfg)[0] - path_enumeration_oracle(x, y, gamma, warp, indexing)) <= 1e-10


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 7), st.integers(1, 7), st.floats(1e-3, 1.0), st.integers(0, 2**31))
def test_soft_below_hard(tx, ty, gamma, seed):
    r = np.random.default_rng(seed)
    x, y = r.normal(size=(tx, 2)), r.normal(size=(ty, 2))
    cfg = SoftDtwConfig(gamma, 1.0, max(tx, ty))
    assert soft_dtw(x, y, cfg)[0] <= hard_dtw_oracle(x, y, 1.0) + 1e-9


# ---------------------------------------------------------------- hard oracle

def test_hard_oracle_identical_is_zero(rng):
    x = rng.normal(size=(5, 3))
    assert hard_dtw_oracle(x, x) == 0.0


def test_hard_oracle_single_frame(rng):
    x, y = rng.normal(size=(1, 3)), rng.normal(size=(1, 3))
    assert hard_dtw_oracle(x, y) == pytest.approx(np.abs(x - y).sum(), abs=1e-14)


@BOTH
def test_hard_limit_six_frames(indexing, rng):
    for _ in range(10):
        x, y = rng.normal(size=(6, 2)), rng.normal(size=(6, 2))
        soft = soft_dtw(x, y, SoftDtwConfig(1e-4, 128.0, 6, indexing))[0]
        assert abs(soft - hard_dtw_oracle(x, y, 128.0, indexing)) <= 1e-2


def test_hard_oracle_equals_min_over_paths(rng):
    from duralign.softdtw import _monotone_paths
    x, y = rng.normal(size=(4, 2)), rng.normal(size=(3, 2))
    best = min(path_cost(x, y, p, 0.5) for p in _monotone_paths(4, 3))
    assert hard_dtw_oracle(x, y, 0.5) == pytest.approx(best, abs=1e-12)


# ---------------------------------------------------------------- band

@pytest.mark.parametrize("tx,ty,w", [(1, 1, 1), (1, 9, 2), (9, 1, 2), (10, 40, 3), (40, 10, 1), (2000, 1500, 30)])
def test_band_contains_corners_and_is_connected(tx, ty, w):
    lo, hi = band_limits(tx, ty, w)
    assert lo[1] == 1 and hi[tx] == ty
    assert np.all(lo[1:] <= hi[1:])
    assert np.all(np.diff(lo[1:]) >= 0)
    assert np.all(lo[2:] <= hi[1:-1] + 1)


@BOTH
def test_band_consistency(indexing, rng):
    for _ in range(20):
        tx, ty = rng.integers(1, 15, size=2)
        x, y = rng.normal(size=(tx, 3)), rng.normal(size=(ty, 3))
        full = soft_dtw(x, y, SoftDtwConfig(0.05, 2.0, max(tx, ty), indexing))[0]
        wider = soft_dtw(x, y, SoftDtwConfig(0.05, 2.0, 5 * max(tx, ty), indexing))[0]
        assert abs(full - wider) <= 1e-12


def test_narrow_band_is_an_upper_bound(rng):
    x, y = rng.normal(size=(12, 2)), rng.normal(size=(9, 2))
    full = soft_dtw(x, y, SoftDtwConfig(0.05, 0.5, 12))[0]
    narrow = soft_dtw(x, y, SoftDtwConfig(0.05, 0.5, 1))[0]
    assert narrow >= full - 1e-12


def test_band_table_lookup(rng):
    x, y = rng.normal(size=(6, 2)), rng.normal(size=(6, 2))
    value, table = soft_dtw(x, y, SoftDtwConfig(band_half_width=1))
    assert table.get(6, 6) == value
    assert table.get(1, 6) == math.inf
    assert table.get(0, 0) == 0.0
    assert table.cell_count < 36


# ---------------------------------------------------------------- gradients

@BOTH
def test_gradient_matches_finite_differences(indexing, rng):
    x, y = rng.normal(size=(5, 3)), rng.normal(size=(5, 3))
    cfg = SoftDtwConfig(0.05, 0.5, 5, indexing)
    assert ad.relative_error(soft_dtw_grad(x, y, cfg), fd_grad_wrt_prediction(x, y, cfg)) <= 1e-4


def test_gradient_on_banded_unequal_lengths(rng):
    x, y = rng.normal(size=(9, 2)), rng.normal(size=(6, 2))
    cfg = SoftDtwConfig(0.1, 0.2, 2)
    assert ad.relative_error(soft_dtw_grad(x, y, cfg), fd_grad_wrt_prediction(x, y, cfg)) <= 1e-4


def test_gradient_small_at_identity(rng):
    x = rng.normal(size=(6, 3))
    assert np.max(np.abs(soft_dtw_grad(x, x.copy(), SoftDtwConfig(gamma=1e-3)))) <= 1e-3


@BOTH
def test_doubling_scales_fixed_path_linearly(indexing, rng):
    # with a huge warp only the diagonal path survives, so the loss is a sum of L1 costs
    x, y = rng.normal(size=(6, 3)), rng.normal(size=(6, 3))
    cfg = SoftDtwConfig(0.05, 1e6, 1, indexing)
    diag = tuple((i, i) for i in range(1, 7))
    one = soft_dtw(x, y, cfg)[0]
    two = soft_dtw(2 * x, 2 * y, cfg)[0]
    assert one == pytest.approx(path_cost(x, y, diag, 0.0, indexing), abs=1e-12)
    assert two == pytest.approx(2 * one, abs=1e-12)


def test_scaling_identity_with_gamma_and_warp(rng):
    # sdtw_gamma(c x, c y; c warp) = c * sdtw_{gamma/c}(x, y; warp) holds for any path set
    x, y = rng.normal(size=(5, 2)), rng.normal(size=(7, 2))
    a = soft_dtw(3 * x, 3 * y, SoftDtwConfig(0.3, 1.5, 7))[0]
    b = soft_dtw(x, y, SoftDtwConfig(0.1, 0.5, 7))[0]
    assert a == pytest.approx(3 * b, abs=1e-10)


def test_graph_node_backward(f64, rng):
    x, y = rng.normal(size=(4, 2)), rng.normal(size=(5, 2))
    cfg = SoftDtwConfig(0.05, 0.5, 5)
    pred = ad.Tensor(y)
    loss = soft_dtw_loss(x, pred, cfg)
    ad.backward(ad.mul(loss, 2.0))
    value, grad = soft_dtw_value_and_grad(x, y, cfg)
    assert float(loss.data) == value
    np.testing.assert_allclose(pred.grad, 2 * grad, atol=1e-14)


def test_swapping_roles_keeps_structure(rng):
    x, y = rng.normal(size=(4, 2)), rng.normal(size=(6, 2))
    cfg = SoftDtwConfig(0.05, 0.5, 6, "symmetric")
    # symmetric costs make the DP transpose-invariant
    assert soft_dtw(x, y, cfg)[0] == pytest.approx(soft_dtw(y, x, cfg)[0], abs=1e-12)
    assert soft_dtw_grad(y, x, cfg).shape == x.shape


def test_input_validation():
    with pytest.raises(ValueError):
        soft_dtw(np.zeros((3, 2)), np.zeros((3, 3)))
    with pytest.raises(ValueError):
        soft_dtw(np.zeros((0, 2)), np.zeros((3, 2)))
    with pytest.raises(ValueError):
        SoftDtwConfig(gamma=0.0)
    with pytest.raises(ValueError):
        SoftDtwConfig(cost_indexing="other")
