"""Acceptance gate: one test (or group) per criterion, at the stated tolerances.

The terminal summary prints one PASS/FAIL line per criterion.
"""
import warnings

import numpy as np
import pytest

from roughsde import rng
from roughsde.branching import BranchedEnsemble, cond_norm
from roughsde.cli import main
from roughsde.controlled import ControlledPath, make_field
from roughsde.harness import (ExperimentConfig, oracle_euler_maruyama, run_convergence_study,
                              run_stability_study)
from roughsde.roughpath import chen_defect, lift_brownian, lift_fbm, lift_smooth, symmetrization_defect
from roughsde.sewing import Germ, dyadic_defect_decomposition, rsi_backward, rsi_forward, sew
from roughsde.solver import (RSDECoefficients, StoppingPolicy, doob_meyer_split, remainder_diagnostics,
                             solve_local, solve_rsde)
from roughsde.stats import loglog_fit
from roughsde.timegrid import FunctionField, make_grid

from conftest import sin_path

LINEAR = dict(w=1, dim_B=1, dim_X=1, b=dict(name="linear", lam=0.5), sigma=dict(name="linear", lam=0.3),
              f=dict(name="linear", lam=0.5))
GBM = dict(w=1, dim_B=1, dim_X=1, b=dict(name="linear", lam=0.5), sigma=dict(name="linear", lam=0.3))
STRAT = dict(kind="brownian", calculus="stratonovich", alpha=0.45, seed=11)


# --------------------------------------------------------------------- 1. Chen exactness

def _lifts():
    g = make_grid(1.0, 128)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        yield "smooth", lift_smooth(sin_path(dim=3), g, refine=16)
        yield "brownian-ito", lift_brownian(3, g, seed=1, calculus="ito", subgrid=16, n_samples=8)
        yield "brownian-strat", lift_brownian(3, g, seed=2, calculus="stratonovich", subgrid=16, n_samples=8)
        for H in (0.35, 0.5, 0.7):
            yield f"fbm-{H}", lift_fbm(H, 2, g, seed=3, fine_factor=8, n_samples=8)


@pytest.mark.criterion(1)
@pytest.mark.parametrize("name,rp", list(_lifts()), ids=lambda v: v if isinstance(v, str) else "")
def test_c01_chen_exactness(name, rp):
    assert chen_defect(rp) <= 1e-10
    if rp.flavor == "geometric":
        assert symmetrization_defect(rp) <= 1e-10


# --------------------------------------------------------------------- 2. smooth lift values

@pytest.mark.criterion(2)
def test_c02_smooth_lift_values():
    g = make_grid(1.0, 16)
    rp = lift_smooth(lambda t: np.stack([t, t ** 2], -1), g, refine=256)
    np.testing.assert_allclose(rp.XX(0, 16), [[0.5, 2 / 3], [1 / 3, 0.5]], atol=1e-6)


# --------------------------------------------------------------------- 3. conditional norms

@pytest.mark.criterion(3)
@pytest.mark.parametrize("s,t", [(0, 1), (0, 8), (8, 16), (16, 48)])
def test_c03_conditional_norm_chain(s, t):
    g = make_grid(1.0, 64)
    be = BranchedEnsemble(g, n_outer=256, n_inner=256, seed=17, branch_points=[0, 8, 16])
    est = cond_norm(be, lambda B, a, b: B[:, :, b, 0] - B[:, :, a, 0], s, t, 2.0, 4.0)
    rh = np.sqrt(g.t[t] - g.t[s])
    assert rh - 3 * est.stderr <= est.value <= 3 ** 0.25 * rh + 3 * est.stderr


# --------------------------------------------------------------------- 4. sewing convergence

@pytest.mark.criterion(4)
def test_c04_ito_sewing_convergence():
    g = make_grid(1.0, 1 << 12)
    B = rng.cumulative(rng.brownian_increments(g, 256, 1, 4))[..., 0]
    germ = Germ(lambda i, j: B[:, i] * (B[:, j] - B[:, i]), g, (), (256,))
    rep = sew(germ)
    target = 0.5 * (B[:, -1] ** 2 - 1.0)
    levels = list(range(4, 13))
    errs = [np.sqrt(np.mean((rep.level_totals[k] - target) ** 2)) for k in levels]
    assert all(b < a for a, b in zip(errs, errs[1:]))
    fit = loglog_fit([2.0 ** -k for k in levels], errs)
    assert fit.n_scales >= 5 and fit.slope > 0 and fit.r2 >= 0.9
    assert rep.cauchy_fit.slope > 0
    ones = sew(Germ(lambda i, j: B[:, j] - B[:, i], g, (), (256,)))
    # Z = 1 telescopes to B_1 at every level, up to rounding in the running sums
    for total in ones.level_totals:
        np.testing.assert_allclose(total, B[:, -1], rtol=0, atol=1e-12)


# --------------------------------------------------------------------- 5. integral identities

@pytest.mark.criterion(5)
def test_c05_smooth_self_integral():
    g = make_grid(1.0, 1024)
    rp = lift_smooth(sin_path(dim=2), g, refine=8)
    X = rp.X
    cp = ControlledPath(g, X[:, None, :], np.broadcast_to(np.eye(2), X.shape + (2,))[:, None], 2)
    fwd, rep_f = rsi_forward(cp, rp, diagnostics=False)
    bwd, rep_b = rsi_backward(cp, rp, diagnostics=False)
    oracle = 0.5 * (np.sum(X ** 2, -1) - np.sum(X[0] ** 2))
    tol = 1e-10
    for k in range(rep_f.levels[-1] + 1):
        assert abs(rep_f.level_totals[k][0] - oracle[-1]) <= tol
    np.testing.assert_allclose(fwd.Z[:, 0], oracle, atol=tol)
    assert np.max(np.abs(fwd.Z[:, 0] - bwd[:, 0])) <= 1e-8


@pytest.mark.criterion(5)
def test_c05_random_forward_backward():
    g = make_grid(1.0, 1 << 12)
    rp = lift_brownian(1, g, seed=21, calculus="stratonovich", subgrid=4).sample(0)
    M = 2000
    Bp = rng.cumulative(rng.brownian_increments(g, M, 1, 22))
    # Z_t = B_t: adapted, independent of X, no Gubinelli derivative
    cp = ControlledPath(g, Bp, np.zeros(Bp.shape + (1,)), 1, 0.5, 0.5)
    fwd, _ = rsi_forward(cp, rp, diagnostics=False)
    bwd, _ = rsi_backward(cp, rp, diagnostics=False)
    gap = bwd[:, -1] - fwd.Z[:, -1]
    # gap = sum dB dX, mean 0 and variance sum h dX^2
    se = gap.std(ddof=1) / np.sqrt(M)
    assert abs(gap.mean()) <= 3 * se
    var = float(np.sum(g.steps * np.diff(rp.X[:, 0]) ** 2))
    sq = gap ** 2
    assert abs(sq.mean() - var) <= 3 * sq.std(ddof=1) / np.sqrt(M)


# --------------------------------------------------------------------- 6. reduction to SDEs

@pytest.mark.criterion(6)
@pytest.mark.parametrize("zero_field", ["absent", "constant-zero"])
def test_c06_euler_maruyama_bit_identity(zero_field):
    g = make_grid(1.0, 256)
    dB = rng.brownian_increments(g, 128, 2, 9)
    b = make_field("sin", 2, None, amp=0.7, freq=1.3)
    sigma = make_field("tanh_poly", 2, 2)
    f = None if zero_field == "absent" else make_field("constant", 2, 1, c=0.0)
    rp = None if f is None else lift_brownian(1, g, seed=1, subgrid=4).sample(0)
    co = RSDECoefficients(2, 2, 1, b, sigma, f)
    xi = np.array([0.4, -1.1])
    Y = solve_rsde(co, rp, dB, xi, g, workers=4).Y
    ref = oracle_euler_maruyama(b.f, sigma.f, xi, dB, g)
    assert np.array_equal(Y, ref)


@pytest.mark.criterion(6)
def test_c06_gbm_strong_order():
    cfg = ExperimentConfig.from_dict(dict(coefficients=GBM, ladder=[64, 128, 256, 512, 1024],
                                          n_samples=1024, oracle="gbm", seed=0))
    rep = run_convergence_study(cfg)
    assert abs(rep["fit"]["slope"] - 0.5) <= 0.15


# --------------------------------------------------------------------- 7. deterministic RDE

@pytest.mark.criterion(7)
def test_c07_deterministic_rde():
    rde = dict(w=1, dim_B=1, dim_X=1, f=dict(name="linear", lam=0.8))
    cfg = ExperimentConfig.from_dict(dict(coefficients=rde, rough=dict(kind="smooth", path="sin"),
                                          ladder=[16, 32, 64, 128, 256], n_samples=1, oracle="linear"))
    rep = run_convergence_study(cfg)
    assert len(rep["rows"]) == 5 and rep["fit"]["slope"] >= 0.85


# --------------------------------------------------------------------- 8. hybrid linear problem

@pytest.mark.criterion(8)
def test_c08_hybrid_linear():
    cfg = ExperimentConfig.from_dict(dict(coefficients=LINEAR, rough=STRAT, ladder=[64, 128, 256, 512, 1024],
                                          n_samples=1024, oracle="linear", seed=0))
    rep = run_convergence_study(cfg)
    errs = [r["error"] for r in rep["rows"]]
    assert all(b < a for a, b in zip(errs, errs[1:]))
    assert rep["rows"][-1]["N"] == 1024 and rep["rows"][-1]["rel_error"] <= 1e-2


# --------------------------------------------------------------------- 9. remainder scaling

@pytest.mark.criterion(9)
def test_c09_remainder_scaling():
    g = make_grid(1.0, 1024)
    # Brownian-regularity driver declared at alpha = 0.45
    rp = lift_brownian(1, g, seed=3, calculus="stratonovich", alpha=0.45).sample(0)
    co = RSDECoefficients(1, 1, 1, make_field("linear", 1, None, lam=0.5), make_field("linear", 1, 1, lam=0.3),
                          make_field("linear", 1, 1, lam=0.5))
    be = BranchedEnsemble(g, n_outer=64, n_inner=64, seed=5)
    rep = remainder_diagnostics(None, co, rp, fine_factor=4, be=be, xi=1.0).report
    alpha = 0.45
    assert len(rep["spans"]) >= 4
    assert rep["fits"]["cond_J"]["slope"] >= 2 * alpha - 0.1
    assert rep["fits"]["mean_J"]["slope"] >= (2 * alpha + alpha) - 0.15


# --------------------------------------------------------------------- 10. Doob-Meyer split

@pytest.mark.criterion(10)
def test_c10_doob_meyer():
    g = make_grid(1.0, 1024)
    rp = lift_smooth(lambda t: np.sin(2 * np.pi * t)[:, None], g, refine=4)
    be = BranchedEnsemble(g, n_outer=128, n_inner=128, seed=2, branch_points=np.arange(g.N))
    X = rp.X[:, 0]
    B = be.outer_paths()[..., 0]
    cp = ControlledPath(g, (B + X)[..., None], np.ones((128, g.N + 1, 1, 1)), 1,
                        state_fn=lambda k, b: (b[..., 0] + X[k])[..., None])
    out = doob_meyer_split(cp, rp, be)
    scale = np.max(np.abs(X))
    errJ = np.max(np.sqrt(np.mean((out["J"][..., 0] - (X - X[0])) ** 2, axis=0)))
    errM = np.max(np.sqrt(np.mean((out["M"][..., 0] - (B - B[:, :1])) ** 2, axis=0)))
    assert errJ <= 0.05 * scale and errM <= 0.05 * scale
    assert out["martingale_max_z"] <= 3.0


# --------------------------------------------------------------------- 11. stability

@pytest.fixture(scope="module")
def stability_report():
    cfg = ExperimentConfig.from_dict(dict(coefficients=LINEAR, rough=STRAT, ladder=[256], n_samples=512))
    return run_stability_study(cfg, ["xi", "rough", "sigma", "f"])


@pytest.mark.criterion(11)
def test_c11_stability_zero_arm(stability_report):
    assert stability_report["zero_output_exact"]
    assert stability_report["eps"] == pytest.approx([10 ** (-3 + 0.5 * k) for k in range(5)])


@pytest.mark.criterion(11)
@pytest.mark.parametrize("channel", ["xi", "rough", "sigma", "f"])
def test_c11_stability_ratio_spread(stability_report, channel):
    s = stability_report["summary"][channel]
    assert s["spread"] <= 4.0


# --------------------------------------------------------------------- 12. blow-up

@pytest.mark.criterion(12)
def test_c12_blow_up_time():
    co = RSDECoefficients(1, 1, 1, make_field("polynomial", 1, None, coeffs=[0.0, 0.0, 1.0]))
    taus, misses = [], []
    for N in (256, 1024, 4096):
        g = make_grid(1.0, N)
        h = 1.0 / N
        traj, tau = solve_local(co, None, None, 2.0, g, StoppingPolicy.default(2.0))
        assert traj.info["splice_max_gap"] == 0.0
        taus.append(float(tau[0]))
        if not 0.5 - 2 * h <= tau[0] <= 0.5 + 2 * h:
            misses.append((N, float(tau[0]), (float(tau[0]) - 0.5) / h))
    assert all(abs(b - 0.5) < abs(a - 0.5) for a, b in zip(taus, taus[1:]))
    assert not misses, f"tau outside [1/2 - 2h, 1/2 + 2h] (N, tau, lag in steps): {misses}"


# --------------------------------------------------------------------- 13. dyadic defect identity

@pytest.mark.criterion(13)
@pytest.mark.parametrize("seed", range(5))
def test_c13_dyadic_defect(seed):
    g = make_grid(1.0, 128)
    table = np.random.default_rng(seed).standard_normal((4, 129, 129, 2))
    J = FunctionField(lambda i, j: table[:, i, j], g, (2,), (4,))
    for s, t in [(0, 64), (0, 128), (64, 128)]:
        assert dyadic_defect_decomposition(J, s, t, 6)["max_residual"] <= 1e-12


# --------------------------------------------------------------------- 14. determinism

DEMOS = [("lift", "lift"), ("integrate", "integrate"), ("sew-diagnose", "sew"), ("solve", "hybrid"),
         ("solve", "blowup"), ("converge", "gbm"), ("converge", "hybrid"), ("stability", "hybrid"),
         ("split", "split")]


@pytest.mark.criterion(14)
@pytest.mark.parametrize("command,config", DEMOS)
def test_c14_cli_determinism(command, config, tmp_path, request):
    path = request.config.rootpath / "demos" / "configs" / f"{config}.toml"
    outs = []
    for w in (16, 1):
        out = tmp_path / f"w{w}"
        assert main([command, "--config", str(path), "--output", str(out), "--workers", str(w)]) == 0
        outs.append(out)
    files = sorted(p.name for p in outs[0].iterdir())
    assert files == sorted(p.name for p in outs[1].iterdir())
    for name in files:
        assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes(), name
