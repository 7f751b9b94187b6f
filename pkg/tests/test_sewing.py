import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from roughsde.controlled import ControlledPath
from roughsde.roughpath import lift_brownian, lift_smooth
from roughsde.sewing import (Germ, SewingError, backward_germ, dyadic_defect_decomposition,
                             forward_germ, germ_coherence, riemann_path, rsi_backward, rsi_forward,
                             sew, sew_uniqueness_check)
from roughsde.stats import loglog_fit
from roughsde.timegrid import FunctionField, IncrementField, make_grid



def test_additive_germ_sews_exactly(grid64):
    f = np.cos(3 * grid64.t)
    rep = sew(IncrementField(f, grid64, 0), levels=6)
    np.testing.assert_allclose(rep.path, f - f[0], atol=1e-14)
    assert all(c["diff_sup"] <= 1e-14 for c in rep.cauchy)


def test_riemann_path_cells(grid64):
    germ = Germ(lambda i, j: grid64.t[j] - grid64.t[i], grid64)
    np.testing.assert_allclose(riemann_path(germ, 16), [0, 0.25, 0.5, 0.75, 1.0], atol=1e-15)


def test_germ_diagonal_check(grid64):
    with pytest.raises(SewingError):
        Germ(lambda i, j: np.ones(np.shape(i)), grid64)


def test_sew_errors(grid64):
    g12 = make_grid(1.0, 12)
    with pytest.raises(SewingError):
        sew(Germ(lambda i, j: g12.t[j] - g12.t[i], g12))
    with pytest.raises(SewingError):
        sew(IncrementField(grid64.t, grid64, 0), levels=7)


def test_ito_integral_telescopes():
    g = make_grid(1.0, 256)
    rp = lift_brownian(1, g, seed=5, calculus="ito", n_samples=32)
    X = rp.X[..., 0]
    cp = ControlledPath(g, X[..., None], np.ones(X.shape + (1, 1)))
    out, rep = rsi_forward(cp, rp, diagnostics=False)
    oracle = 0.5 * (X ** 2 - X[:, :1] ** 2) - 0.5 * g.t
    np.testing.assert_allclose(out.Z, oracle, atol=1e-12)


def test_forward_backward_agree_for_geometric_self_integral():
    g = make_grid(1.0, 128)
    rp = lift_brownian(2, g, seed=6, calculus="stratonovich", subgrid=8, n_samples=4)
    X = rp.X
    # Z_t = X_t as a linear form on R^2 (row vector), Z' = identity
    cp = ControlledPath(g, X[..., None, :], np.broadcast_to(np.eye(2), X.shape + (2,))[..., None, :, :],
                        value_ndim=2)
    fwd, _ = rsi_forward(cp, rp, diagnostics=False)
    bwd, _ = rsi_backward(cp, rp, diagnostics=False)
    oracle = 0.5 * (np.sum(X ** 2, -1) - np.sum(X[:, :1] ** 2, -1))
    np.testing.assert_allclose(fwd.Z[..., 0], oracle, atol=1e-10)
    np.testing.assert_allclose(bwd[..., 0], oracle, atol=1e-10)


@pytest.mark.parametrize("second_order,rate", [(False, 1.0), (True, 2.0)])
def test_smooth_sewing_cauchy_rate(second_order, rate):
    g = make_grid(1.0, 1024)
    rp = lift_smooth(lambda t: np.sin(2 * t)[:, None], g, refine=8)
    Z = np.cos(g.t)[:, None, None]
    Zp = (-np.sin(g.t) / (2 * np.cos(2 * g.t)))[:, None, None, None] if second_order else np.zeros((1025, 1, 1, 1))
    cp = ControlledPath(g, Z, Zp, value_ndim=2)
    out, rep = rsi_forward(cp, rp, diagnostics=False)
    # int_0^1 cos t * 2 cos 2t dt = sin 1 + sin(3)/3
    exact = np.sin(1.0) + np.sin(3.0) / 3.0
    assert out.Z[-1, 0] == pytest.approx(exact, abs=2e-3 if not second_order else 1e-5)
    fine = rep.cauchy[-6:]
    fit = loglog_fit([c["mesh"] for c in fine], [c["diff_sup"] for c in fine])
    assert fit.slope == pytest.approx(rate, abs=0.1)


def test_integrand_shape_errors(smooth_rp2):
    g = smooth_rp2.grid
    bad = ControlledPath(g, np.zeros((g.N + 1, 3)), np.zeros((g.N + 1, 3, 2)))
    with pytest.raises(ValueError):
        forward_germ(bad, smooth_rp2)
    with pytest.raises(ValueError):
        backward_germ(bad, smooth_rp2)


def test_coherence_of_riemann_germ():
    g = make_grid(1.0, 256)
    rp = lift_brownian(1, g, seed=2, calculus="ito", n_samples=400)
    X = rp.X
    germ = Germ(lambda i, j: X[:, i, 0] * (X[:, j, 0] - X[:, i, 0]), g, (), (400,))
    coh = germ_coherence(germ)
    # dA_{s,u,t} = -dB_{s,u} dB_{u,t}: L2 norm (t - s)/2
    assert coh["fit_cond"].slope == pytest.approx(1.0, abs=0.1)
    assert coh["eps2"] == pytest.approx(0.5, abs=0.1)
    assert coh["enough_scales"]


@pytest.mark.parametrize("power,verdict", [(1.5, "pass"), (0.5, "fail"), (1.02, "inconclusive")])
def test_uniqueness_check_verdicts(power, verdict, grid64):
    R = FunctionField(lambda i, j: (grid64.t[j] - grid64.t[i]) ** power, grid64)
    out = sew_uniqueness_check(R)
    assert out["verdict"] == verdict
    if power == 1.5:
        assert out["eps"] == pytest.approx(0.5, abs=1e-9)


def test_uniqueness_check_zero(grid64):
    out = sew_uniqueness_check(FunctionField(lambda i, j: np.zeros(np.shape(i)), grid64))
    assert out["eps"] == np.inf and out["verdict"] == "pass"


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10 ** 6), st.integers(0, 6))
def test_dyadic_defect_identity(seed, j):
    g = make_grid(1.0, 64)
    table = np.random.default_rng(seed).standard_normal((65, 65, 3))
    J = FunctionField(lambda i, k: table[i, k], g, (3,))
    out = dyadic_defect_decomposition(J, 0, 64, j)
    assert out["max_residual"] <= 1e-12


def test_dyadic_defect_errors(grid64):
    J = IncrementField(grid64.t, grid64, 0)
    with pytest.raises(SewingError):
        dyadic_defect_decomposition(J, 0, 6, 2)
