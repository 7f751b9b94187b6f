import warnings

import numpy as np
import pytest

from roughsde import rng
from roughsde.branching import BranchedEnsemble
from roughsde.controlled import ControlledPath, make_field
from roughsde.roughpath import lift_brownian, lift_smooth
from roughsde.solver import (RSDECoefficients, StoppingPolicy, coefficients_from_config, doob_meyer_split,
                             remainder_diagnostics, solve_local, solve_rsde, step_davie)
from roughsde.stats import loglog_fit
from roughsde.timegrid import make_grid

from conftest import sin_path


def linear(a=None, c=None, lam=None):
    mk = lambda v, k: None if v is None else make_field("linear", 1, k, A=v)
    return RSDECoefficients(1, 1, 1, mk(a, None), mk(c, 1), mk(lam, 1))


def test_step_davie_linear_by_hand():
    co = linear(0.5, 0.3, 0.7)
    y = np.array([[2.0]])
    out = step_davie(y, co, np.array([[0.1]]), np.array([0.2]), np.array([[0.05]]), 0.01)
    assert out[0, 0] == pytest.approx(2.0 * (1 + 0.5 * 0.01 + 0.3 * 0.1 + 0.7 * 0.2 + 0.49 * 0.05))
    with pytest.raises(ValueError):
        step_davie(y, co, None, np.zeros(1), np.zeros((1, 1)), 0.0)


def test_zero_rough_field_is_euler_maruyama():
    g = make_grid(1.0, 64)
    co = RSDECoefficients(2, 2, 1, make_field("sin", 2, None, amp=0.5),
                          make_field("tanh_poly", 2, 2), None)
    dB = rng.brownian_increments(g, 50, 2, 3)
    Y = solve_rsde(co, None, dB, np.array([0.3, -0.2]), g).Y
    # independent Euler-Maruyama loop
    ref = np.empty_like(Y)
    ref[:, 0] = [0.3, -0.2]
    for k in range(g.N):
        y = ref[:, k]
        ref[:, k + 1] = y + 0.5 * np.sin(y) * g.steps[k] \
            + np.einsum("mij,mj->mi", co.sigma(0.0, y), dB[:, k])
    assert np.array_equal(Y, ref)


def test_additive_problem_is_exact():
    g = make_grid(1.0, 128)
    rp = lift_smooth(sin_path(), g, refine=4)
    co = RSDECoefficients(1, 1, 1, None, make_field("constant", 1, 1, c=0.4),
                          make_field("constant", 1, 1, c=-1.5))
    dB = rng.brownian_increments(g, 20, 1, 0)
    Y = solve_rsde(co, rp, dB, 1.0).Y[..., 0]
    B = rng.cumulative(dB)[..., 0]
    np.testing.assert_allclose(Y, 1.0 + 0.4 * B - 1.5 * (rp.X[:, 0] - rp.X[0, 0]), atol=1e-12)


def test_rough_linear_ode_second_order():
    errs = []
    for N in (64, 128, 256):
        g = make_grid(1.0, N)
        rp = lift_smooth(sin_path(freq=3.0), g, refine=16)
        Y = solve_rsde(linear(lam=0.8), rp, None, 1.0, g).Y[0, :, 0]
        errs.append(np.max(np.abs(Y - np.exp(0.8 * (rp.X[:, 0] - rp.X[0, 0])))))
    rates = np.log2(np.array(errs[:-1]) / errs[1:])
    assert np.all(rates > 1.8)


def test_workers_do_not_change_results():
    g = make_grid(1.0, 64)
    rp = lift_brownian(1, g, seed=1, calculus="stratonovich", subgrid=4, n_samples=100)
    dB = rng.brownian_increments(g, 100, 1, 2)
    co = RSDECoefficients(1, 1, 1, None, make_field("sin", 1, 1), make_field("sin", 1, 1, amp=0.5))
    a = solve_rsde(co, rp, dB, 0.5, workers=1).Y
    b = solve_rsde(co, rp, dB, 0.5, workers=8).Y
    assert np.array_equal(a, b)


def test_picard_matches_davie():
    g = make_grid(1.0, 64)
    rp = lift_smooth(sin_path(), g, refine=8)
    dB = rng.brownian_increments(g, 16, 1, 4)
    co = RSDECoefficients(1, 1, 1, make_field("linear", 1, None, A=-0.3),
                          make_field("sin", 1, 1, amp=0.4), make_field("sin", 1, 1, amp=0.6))
    d = solve_rsde(co, rp, dB, 0.2).Y
    p = solve_rsde(co, rp, dB, 0.2, method="picard", tol=1e-12, max_iter=40)
    assert p.info["converged"]
    np.testing.assert_allclose(p.Y, d, atol=1e-9)


def test_solver_input_errors(grid64):
    co = linear(c=1.0)
    with pytest.raises(ValueError):
        solve_rsde(co, None, None, 1.0, grid64)
    with pytest.raises(ValueError):
        solve_rsde(co, None, np.zeros((3, 10, 1)), 1.0, grid64)
    with pytest.raises(ValueError):
        solve_rsde(linear(a=1.0), None, None, 1.0, grid64, method="rk4")
    with pytest.raises(ValueError):
        RSDECoefficients(1, 2, 1, None, make_field("sin", 1, 1))


def test_coefficients_from_config():
    co = coefficients_from_config(dict(w=1, b=dict(name="linear", A=0.5), f=dict(name="sin", amp=2.0)))
    assert co.sigma is None and co.f.out_shape == (1, 1)
    assert co.b(0.0, np.array([[2.0]]))[0, 0] == 1.0


def test_stopping_policy_validation():
    with pytest.raises(ValueError):
        StoppingPolicy((2.0, 1.0))
    assert StoppingPolicy.default(np.array([3.0]), 3).radii == (4.0, 5.0, 7.0)


def test_local_solve_matches_global_when_bounded(grid64):
    rp = lift_smooth(sin_path(), grid64, refine=4)
    co = RSDECoefficients(1, 1, 1, None, None, make_field("sin", 1, 1, amp=0.5))
    traj, tau = solve_local(co, rp, None, 0.1, grid64, StoppingPolicy((5.0, 10.0)))
    assert np.all(tau == 1.0) and not traj.blown_up.any()
    np.testing.assert_array_equal(traj.Y, solve_rsde(co, rp, None, 0.1, grid64).Y)


def test_local_solve_blow_up_time_converges():
    co = RSDECoefficients(1, 1, 1, make_field("polynomial", 1, None, coeffs=[0, 0, 1]), None, None)
    gaps = []
    for N in (256, 1024):
        g = make_grid(1.0, N)
        traj, tau = solve_local(co, None, None, 2.0, g)
        assert traj.blown_up.all() and traj.info["splice_max_gap"] == 0.0
        assert traj.info["tau_monotone"]
        gaps.append(tau[0] - 0.5)
    assert 0 < gaps[1] < gaps[0] < 0.05


def test_trajectory_summary(grid64):
    traj = solve_rsde(linear(a=1.0), None, None, 1.0, grid64)
    s = traj.summary()
    assert s["n_samples"] == 1
    cp = traj.controlled_path()
    assert cp.Zp.shape == (1, 65, 1, 1)


def test_remainder_diagnostics_additive_vanishes():
    g = make_grid(1.0, 128)
    rp = lift_smooth(sin_path(), g, refine=4)
    be = BranchedEnsemble(g, 8, 8, seed=1, branch_points=[0, 64])
    co = RSDECoefficients(1, 1, 1, None, make_field("constant", 1, 1, c=0.5),
                          make_field("constant", 1, 1, c=1.0))
    rep = remainder_diagnostics(None, co, rp, fine_factor=4, be=be, xi=0.0).report
    assert max(rep["cond_J"]) <= 1e-12 and max(rep["plain_J"]) <= 1e-12


def test_remainder_diagnostics_rates():
    g = make_grid(1.0, 256)
    rp = lift_smooth(sin_path(freq=4.0), g, refine=4)
    be = BranchedEnsemble(g, 16, 16, seed=2, branch_points=[0, 128])
    co = RSDECoefficients(1, 1, 1, None, make_field("sin", 1, 1, amp=0.5),
                          make_field("sin", 1, 1, amp=0.8))
    rep = remainder_diagnostics(None, co, rp, fine_factor=4, be=be, xi=0.3).report
    # small spans, before the horizon saturates the growth
    fit = loglog_fit(rep["spans"][:4], rep["cond_J"][:4])
    assert fit.slope > 2 * rp.alpha
    assert rep["target_cond"] == 2 * rp.alpha


def test_doob_meyer_square_of_brownian():
    g = make_grid(1.0, 32)
    be = BranchedEnsemble(g, 400, 64, seed=3, branch_points=np.arange(32))
    rp = lift_smooth(sin_path(), g, refine=4)
    B = be.outer_paths()[..., 0]
    cp = ControlledPath(g, (B ** 2)[..., None], np.zeros(B.shape + (1, 1)),
                        state_fn=lambda k, b: b ** 2)
    out = doob_meyer_split(cp, rp, be)
    # E_s[(B_t)^2 - B_s^2] = t - s, so J_t = t up to inner Monte Carlo error
    np.testing.assert_allclose(out["J"].mean(axis=0)[..., 0], g.t, atol=0.05)
    assert out["martingale_max_z"] < 4.5
    np.testing.assert_allclose(out["M"] + out["J"], out["Z"] - out["Z"][:, :1], atol=1e-13)
    bad = BranchedEnsemble(g, 4, 4, branch_points=[0])
    with pytest.raises(ValueError):
        doob_meyer_split(cp, rp, bad)
