import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from numpy.polynomial import polynomial as P

from roughsde.roughpath import (ChenField, RoughPath, chen_defect, check_declared_alpha, lift_brownian,
                                lift_fbm, lift_smooth, restrict, rough_distance, stop_rough_path,
                                symmetrization_defect)
from roughsde.timegrid import FunctionField, holder_seminorm, make_grid

from conftest import sin_path


def poly_iterated_integral(ca, cb, s, t):
    """int_s^t (X^a_r - X^a_s) dX^b_r for polynomial coordinates, by exact antiderivatives."""
    xa_s = P.polyval(s, ca)
    integrand = P.polymul(P.polysub(ca, [xa_s]), P.polyder(cb))
    anti = P.polyint(integrand)
    return P.polyval(t, anti) - P.polyval(s, anti)


def test_smooth_lift_polynomial_oracle():
    g = make_grid(1.0, 4)
    rp = lift_smooth(lambda t: np.stack([t, t ** 2], -1), g, refine=256)
    coeffs = [[0, 1], [0, 0, 1]]
    oracle = np.array([[poly_iterated_integral(coeffs[a], coeffs[b], 0.0, 1.0) for b in range(2)]
                       for a in range(2)])
    np.testing.assert_allclose(oracle, [[0.5, 2 / 3], [1 / 3, 0.5]], atol=1e-15)
    np.testing.assert_allclose(rp.XX(0, 4), oracle, atol=1e-12)
    np.testing.assert_allclose(rp.XX(1, 3), [[poly_iterated_integral(coeffs[a], coeffs[b], 0.25, 0.75)
                                              for b in range(2)] for a in range(2)], atol=1e-12)


@pytest.mark.parametrize("refine", [1, 3, 16])
def test_smooth_lift_refine_variants(refine):
    g = make_grid(1.0, 8)
    rp = lift_smooth(sin_path(dim=2), g, refine=refine)
    assert chen_defect(rp) <= 1e-12
    assert symmetrization_defect(rp) <= 1e-12


def test_constant_path_lift_vanishes():
    g = make_grid(1.0, 8)
    rp = lift_smooth(lambda t: np.ones((t.size, 2)), g, refine=4)
    assert np.all(rp.XX.dense() == 0)


def test_smooth_lift_bad_refine(grid64):
    with pytest.raises(ValueError):
        lift_smooth(sin_path(), grid64, refine=0)


def test_chen_defect_detects_shift(smooth_rp2):
    c = np.array([[0.0, 0.3], [0.4, 0.0]])
    bad = RoughPath(smooth_rp2.grid, smooth_rp2.X,
                    FunctionField(lambda i, j: smooth_rp2.XX(i, j) + c, smooth_rp2.grid, (2, 2)))
    assert chen_defect(bad) == pytest.approx(0.5)


def test_ito_lift_scalar_exact():
    g = make_grid(1.0, 32)
    rp = lift_brownian(1, g, seed=4, calculus="ito", n_samples=8)
    i, j = np.triu_indices(33, 1)
    dB = rp.dX(i, j)[..., 0]
    h = g.t[j] - g.t[i]
    np.testing.assert_allclose(rp.XX(i, j)[..., 0, 0], 0.5 * (dB ** 2 - h), atol=1e-12)


@pytest.mark.parametrize("calculus,target", [("ito", 0.0), ("stratonovich", 0.5)])
def test_brownian_scalar_mean(calculus, target):
    g = make_grid(1.0, 16)
    rp = lift_brownian(1, g, seed=1, calculus=calculus, n_samples=4000)
    x = rp.XX(0, 16)[:, 0, 0]
    assert abs(x.mean() - target) <= 3 * x.std(ddof=1) / np.sqrt(x.size)


def test_brownian_area_mean_and_ito_symmetric_part():
    g = make_grid(1.0, 8)
    rp = lift_brownian(2, g, seed=2, calculus="ito", subgrid=16, n_samples=2000)
    xx = rp.XX(0, 8)
    area = 0.5 * (xx[:, 0, 1] - xx[:, 1, 0])
    assert abs(area.mean()) <= 3 * area.std(ddof=1) / np.sqrt(area.size)
    dB = rp.dX(0, 8)
    sym = 0.5 * (xx + np.swapaxes(xx, -1, -2))
    gap = sym + 0.5 * np.eye(2) - 0.5 * dB[:, :, None] * dB[:, None, :]
    assert np.max(np.abs(gap.mean(axis=0))) <= 1e-12


@pytest.mark.parametrize("calculus", ["ito", "stratonovich"])
def test_brownian_chen(calculus):
    g = make_grid(1.0, 32)
    rp = lift_brownian(3, g, seed=3, calculus=calculus, subgrid=8, n_samples=4)
    assert chen_defect(rp) <= 1e-12
    if calculus == "stratonovich":
        assert symmetrization_defect(rp) <= 1e-12


def test_brownian_errors(grid64):
    with pytest.raises(ValueError):
        lift_brownian(0, grid64)
    with pytest.raises(ValueError):
        lift_brownian(1, grid64, calculus="marcus")


def test_fbm_half_matches_brownian_variance():
    g = make_grid(1.0, 16)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        rp = lift_fbm(0.5, 1, g, seed=7, fine_factor=4, n_samples=6000, alpha=0.45)
    x1 = rp.X[:, -1, 0]
    v = x1 ** 2
    assert abs(v.mean() - 1.0) <= 3 * v.std(ddof=1) / np.sqrt(v.size)


@pytest.mark.parametrize("H", [0.4, 0.5, 0.75])
def test_fbm_chen_and_geometric(H):
    g = make_grid(1.0, 32)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        rp = lift_fbm(H, 2, g, seed=1, n_samples=3)
    assert chen_defect(rp) <= 1e-12
    assert symmetrization_defect(rp) <= 1e-12


def test_fbm_declared_alpha_stable():
    g = make_grid(1.0, 512)
    rp = lift_fbm(0.4, 1, g, seed=5, n_samples=1, alpha=0.35)
    ratio = check_declared_alpha(rp.sample(0))
    assert 0.8 <= ratio <= 1.25


def test_declared_alpha_warning():
    g = make_grid(1.0, 512)
    # sqrt(t) is exactly 1/2-Holder at 0, so declaring 0.9 blows up at small scales
    rp = lift_smooth(lambda t: np.sqrt(t)[:, None], g, refine=4, alpha=0.9)
    with pytest.warns(RuntimeWarning):
        ratio = check_declared_alpha(rp)
    assert ratio == pytest.approx(2 ** 0.4, rel=0.02)


@pytest.mark.parametrize("H", [0.3, 1.0, 1.2])
def test_fbm_hurst_range(H, grid64):
    with pytest.raises(ValueError):
        lift_fbm(H, 1, grid64)


def test_rough_distance_dilation(smooth_rp):
    eps = 0.1
    alpha = 0.4
    d = rough_distance(smooth_rp, smooth_rp.dilate(1 + eps), alpha)
    expect = eps * holder_seminorm(smooth_rp.dX, alpha) + (2 * eps + eps ** 2) * holder_seminorm(
        smooth_rp.XX, 2 * alpha)
    assert d == pytest.approx(expect, rel=1e-12)
    assert rough_distance(smooth_rp, smooth_rp, alpha) == 0.0


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_rough_distance_metric(seed):
    g = make_grid(1.0, 16)
    rps = [lift_brownian(2, g, seed=seed + k, subgrid=4).sample(0) for k in range(3)]
    a, b, c = rps
    d = lambda x, y: rough_distance(x, y, 0.4)
    assert d(a, b) >= 0 and d(a, b) == pytest.approx(d(b, a))
    assert d(a, c) <= d(a, b) + d(b, c) + 1e-12


def test_stop_examples(grid64):
    rp = lift_brownian(2, grid64, seed=9, subgrid=4, n_samples=3)
    full = stop_rough_path(rp, np.full(3, 1.0))
    np.testing.assert_array_equal(full.X, rp.X)
    np.testing.assert_allclose(full.XX.dense(), rp.XX.dense(), atol=1e-14)
    zero = stop_rough_path(rp, np.zeros(3))
    assert np.all(zero.X == zero.X[:, :1]) and np.all(zero.XX.dense() == 0)


def test_stop_norm_and_idempotent(grid64):
    rp = lift_brownian(1, grid64, seed=10, n_samples=20)
    tau = grid64.t[np.random.default_rng(0).integers(0, 65, 20)]
    stopped = stop_rough_path(rp, tau)
    assert np.all(stopped.holder_norm(0.4) <= rp.holder_norm(0.4) + 1e-12)
    twice = stop_rough_path(stopped, tau)
    np.testing.assert_array_equal(twice.X, stopped.X)
    np.testing.assert_array_equal(twice.XX.dense(), stopped.XX.dense())
    # direct recomputation: X^tau_t = X_{t ^ tau}
    k = grid64.index_of(tau)
    for m in range(3):
        np.testing.assert_array_equal(stopped.X[m, k[m]:], np.broadcast_to(rp.X[m, k[m]], stopped.X[m, k[m]:].shape))


def test_stop_off_grid(grid64, smooth_rp):
    with pytest.raises(Exception):
        stop_rough_path(lift_brownian(1, grid64, n_samples=1), [0.123456])


def test_restrict_consistent(smooth_rp2):
    coarse = restrict(smooth_rp2, 4)
    assert coarse.grid.N == 16
    np.testing.assert_allclose(coarse.XX(1, 7), smooth_rp2.XX(4, 28), atol=1e-14)
