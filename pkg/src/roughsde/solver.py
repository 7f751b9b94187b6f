"""Rough SDE solvers ``dY = b(Y) dt + sigma(Y) dB + (f, f')(Y) dX``.

* ``step_davie`` / ``solve_rsde(method="davie")``: the explicit one-step
  expansion ``y + b h + sigma dB + f dX + (Df f + f') XX``.
* ``solve_rsde(method="picard")``: iteration of the map
  ``(Y, Y') -> (xi + int b + int sigma dB + int f(Y) dX, f(Y))`` with the rough
  integral sewn at the grid level.
* ``solve_local``: clamped coefficients on a radius schedule, exit detection
  and splicing.
* ``remainder_diagnostics`` and ``doob_meyer_split``.

States have shape ``(M, w)``; Brownian increments ``(M, N, d_B)``.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

from ._parallel import map_chunks
from .branching import BranchedEnsemble, conditional_mean, conditional_norm, outer_norm
from .controlled import (ControlledPath, ControlledVectorField, _expand_driver, apply_jacobian, contract,
                         make_field)
from .sewing import Germ, _second_order_term, forward_germ, riemann_path, sew
from .stats import MIN_SCALES, loglog_fit
from .timegrid import FunctionField, GridError, IncrementField, TimeGrid, holder_norm_lm, tensor_norm

log = logging.getLogger(__name__)


class SolverError(RuntimeError):
    pass


class PicardError(SolverError):
    """Raised when the Picard metric grows on three consecutive sweeps."""

    def __init__(self, msg, history):
        super().__init__(msg)
        self.history = history


# --------------------------------------------------------------------- coefficients

@dataclass(frozen=True, eq=False)
class RSDECoefficients:
    """Drift ``b: W -> W``, diffusion ``sigma: W -> L(R^dB, W)`` and rough field ``f: W -> L(R^dX, W)``.

    Any of the three may be None (identically zero).
    """

    w: int
    dim_B: int
    dim_X: int
    b: ControlledVectorField | None = None
    sigma: ControlledVectorField | None = None
    f: ControlledVectorField | None = None
    declared: dict = field(default_factory=dict)

    def __post_init__(self):
        shapes = dict(b=(self.w,), sigma=(self.w, self.dim_B), f=(self.w, self.dim_X))
        for name, shape in shapes.items():
            fld = getattr(self, name)
            if fld is not None and tuple(fld.out_shape) != shape:
                raise ValueError(f"{name} must be valued in shape {shape}, got {fld.out_shape}")

    @property
    def gamma(self) -> float:
        return np.inf if self.f is None else self.f.gamma

    def localized(self, K: float) -> "RSDECoefficients":
        loc = lambda fld: None if fld is None else fld.localized(K)
        return RSDECoefficients(self.w, self.dim_B, self.dim_X, loc(self.b), loc(self.sigma),
                                loc(self.f), dict(self.declared, clamp=K))

    def spot_check(self, probe: np.ndarray, t: float = 0.0) -> dict:
        """Measured sup norms and Lipschitz ratios on a probe lattice, next to declared bounds."""
        probe = np.atleast_2d(np.asarray(probe, dtype=np.float64))
        out = {}
        for name in ("b", "sigma", "f"):
            fld = getattr(self, name)
            if fld is None:
                continue
            v = fld(t, probe)
            nv = v.ndim - 1
            mags = tensor_norm(v, nv)
            diffs = tensor_norm(v[:, None] - v[None, :], nv)
            dist = tensor_norm(probe[:, None] - probe[None, :], 1)
            with np.errstate(divide="ignore", invalid="ignore"):
                lip = np.where(dist > 0, diffs / dist, 0.0)
            rec = dict(sup=float(mags.max()), lip=float(lip.max()))
            for key in ("sup", "lip"):
                bound = self.declared.get(f"{name}_{key}")
                if bound is not None:
                    rec[f"declared_{key}"] = float(bound)
                    rec[f"{key}_ok"] = bool(rec[key] <= bound * (1 + 1e-12))
            out[name] = rec
        return out


def coefficients_from_config(cfg: dict) -> RSDECoefficients:
    """Build coefficients from ``{"w", "dim_B", "dim_X", "b": {"name", ...}, ...}``."""
    w = int(cfg.get("w", 1))
    dB = int(cfg.get("dim_B", 1))
    dX = int(cfg.get("dim_X", 1))

    def build(key, k):
        opts = cfg.get(key)
        if opts is None:
            return None
        opts = dict(opts)
        name = opts.pop("name")
        return make_field(name, w, k, **opts)
    return RSDECoefficients(w, dB, dX, build("b", None), build("sigma", dB), build("f", dX),
                            dict(cfg.get("declared", {})))


# --------------------------------------------------------------------- trajectories

@dataclass
class Trajectory:
    grid: TimeGrid
    Y: np.ndarray
    coeffs: RSDECoefficients
    method: str
    blown_up: np.ndarray
    seed: int | None = None
    info: dict = field(default_factory=dict)

    @property
    def Yp(self) -> np.ndarray:
        """Gubinelli derivative ``f(Y)``, shape ``(M, N+1, w, d_X)``."""
        if self.coeffs.f is None:
            return np.zeros(self.Y.shape + (self.coeffs.dim_X,))
        return self.coeffs.f(self.grid.t[None, :], self.Y)

    def controlled_path(self) -> ControlledPath:
        return ControlledPath(self.grid, self.Y, self.Yp, 1)

    @property
    def terminal(self) -> np.ndarray:
        return self.Y[:, -1]

    def summary(self) -> dict:
        yT = self.terminal[~self.blown_up]
        res = dict(method=self.method, n_samples=int(self.Y.shape[0]), N=self.grid.N,
                   n_blown_up=int(self.blown_up.sum()))
        if yT.size:
            res["terminal_mean"] = yT.mean(axis=0).tolist()
            res["terminal_second_moment"] = (yT ** 2).mean(axis=0).tolist()
        res.update({k: v for k, v in self.info.items() if isinstance(v, (int, float, str, bool, list))})
        return res


def _as_states(xi, M: int, w: int) -> np.ndarray:
    xi = np.asarray(xi, dtype=np.float64)
    if xi.ndim == 0:
        xi = np.full((w,), float(xi))
    if xi.ndim == 1:
        if xi.shape != (w,):
            raise ValueError(f"initial value must have shape ({w},)")
        xi = np.broadcast_to(xi, (M, w))
    if xi.shape != (M, w):
        raise ValueError(f"initial values must have shape ({M}, {w})")
    return np.array(xi)


def _sample_count(noise, xi, rp) -> int:
    if noise is not None:
        return noise.shape[0]
    xi = np.asarray(xi)
    if xi.ndim == 2:
        return xi.shape[0]
    if rp is not None and rp.is_random:
        return rp.batch_shape[0]
    return 1


def step_davie(y, coeffs: RSDECoefficients, dB, dX, XX, h: float, t: float = 0.0) -> np.ndarray:
    """One explicit step ``y + b h + sigma dB + f dX + (Df f + f') XX``."""
    if not h > 0:
        raise ValueError("step size must be positive")
    y = np.asarray(y, dtype=np.float64)
    out = y
    if coeffs.b is not None:
        out = out + coeffs.b(t, y) * h
    if coeffs.sigma is not None:
        out = out + contract(coeffs.sigma(t, y), np.asarray(dB)[..., None, :])
    if coeffs.f is not None:
        fy = coeffs.f(t, y)
        out = out + contract(fy, np.asarray(dX)[..., None, :])
        Zp = apply_jacobian(coeffs.f.jac(t, y), fy) + coeffs.f.deriv(t, y, coeffs.dim_X)
        out = out + _second_order_term(Zp, np.asarray(XX), 1)
    return out


def _driver_cells(rp, grid: TimeGrid, dim_X: int):
    """Per-step ``dX`` ``batch + (N, d)`` and ``XX`` ``batch + (N, d, d)``."""
    if rp is None:
        return np.zeros((grid.N, dim_X)), np.zeros((grid.N, dim_X, dim_X))
    if not rp.grid.same_as(grid):
        raise GridError("rough path and solver grid differ")
    if rp.dim != dim_X:
        raise ValueError("rough path dimension does not match f")
    k = np.arange(grid.N)
    return np.diff(rp.X, axis=-2), rp.XX(k, k + 1)


def _march(coeffs, y0, noise, dX, XX, grid) -> np.ndarray:
    M = y0.shape[0]
    Y = np.empty((M, grid.N + 1, coeffs.w))
    Y[:, 0] = y0
    h, t = grid.steps, grid.t
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(grid.N):
            dB = None if noise is None else noise[:, k]
            Y[:, k + 1] = step_davie(Y[:, k], coeffs, dB, dX[..., k, :], XX[..., k, :, :], h[k], t[k])
    return Y


def _slice_driver(arr, a, b, random: bool):
    return arr[a:b] if random else arr


def solve_rsde(coeffs: RSDECoefficients, rp, noise, xi, grid: TimeGrid | None = None,
               method: str = "davie", workers: int = 1, seed: int | None = None, m: float = 2.0,
               beta: float | None = None, beta_prime: float | None = None, tol: float = 1e-8,
               max_iter: int = 25, pair_budget: int = 0) -> Trajectory:
    """Solve on ``grid`` with Brownian increments ``noise`` ``(M, N, d_B)`` and initial value ``xi``."""
    grid = grid or (rp.grid if rp is not None else None)
    if grid is None:
        raise ValueError("need a grid")
    if coeffs.sigma is not None:
        if noise is None:
            raise ValueError("diffusion coefficient given without Brownian increments")
        noise = np.asarray(noise, dtype=np.float64)
        if noise.shape[1:] != (grid.N, coeffs.dim_B):
            raise ValueError(f"noise must have shape (M, {grid.N}, {coeffs.dim_B})")
    M = _sample_count(noise, xi, rp)
    if rp is not None and rp.is_random and rp.batch_shape != (M,):
        raise ValueError("random rough path ensemble does not match the sample count")
    y0 = _as_states(xi, M, coeffs.w)
    if coeffs.f is not None and rp is not None and np.isfinite(coeffs.gamma) \
            and abs(coeffs.gamma - 1.0 / rp.alpha) < 1e-12:
        warnings.warn("critical regularity gamma = 1/alpha: uniqueness diagnostics are not "
                      "certifying", RuntimeWarning, stacklevel=2)
    dX, XX = _driver_cells(rp, grid, coeffs.dim_X)
    random = rp is not None and rp.is_random
    if method == "davie":
        parts = map_chunks(lambda a, b: _march(coeffs, y0[a:b], None if noise is None else noise[a:b],
                                               _slice_driver(dX, a, b, random),
                                               _slice_driver(XX, a, b, random), grid), M, workers)
        Y = np.concatenate(parts, axis=0)
        info = {}
    elif method == "picard":
        Y, info = _picard(coeffs, rp, noise, y0, grid, m, beta, beta_prime, tol, max_iter, pair_budget)
    else:
        raise ValueError(f"unknown method {method!r}")
    blown = ~np.all(np.isfinite(Y), axis=(1, 2))
    return Trajectory(grid, Y, coeffs, method, blown, seed, info)


def _picard_metric(Y1, Yp1, Y0, Yp0, dX_field, grid, m, beta, beta_prime, pair_budget):
    dY = IncrementField(Y1 - Y0, grid, 1)
    dYp = IncrementField(Yp1 - Yp0, grid, 2)
    Ydiff, Ypdiff = Y1 - Y0, Yp1 - Yp0

    def rem(i, j):
        # R^Y - R^Ybar = d(Y - Ybar) - (Y' - Ybar')_s dX
        return (np.take(Ydiff, j, axis=1) - np.take(Ydiff, i, axis=1)
                - contract(np.take(Ypdiff, i, axis=1), dX_field(i, j)[..., None, :]))
    R = FunctionField(rem, grid, (Y1.shape[-1],), Y1.shape[:1])
    parts = dict(dY=holder_norm_lm(dY, beta, m, pair_budget=pair_budget),
                 dYp=holder_norm_lm(dYp, beta_prime, m, pair_budget=pair_budget),
                 R=holder_norm_lm(R, min(beta + beta_prime, 1.0), m, pair_budget=pair_budget))
    return sum(parts.values()), parts


def _picard(coeffs, rp, noise, y0, grid, m, beta, beta_prime, tol, max_iter, pair_budget):
    """Fixed-point sweeps; the rough integral is the grid-level sewing of its germ."""
    if rp is None or coeffs.f is None:
        raise ValueError("Picard iteration needs a rough driver and f")
    alpha = rp.alpha
    beta = alpha if beta is None else beta
    beta_prime = alpha if beta_prime is None else beta_prime
    M, w, d = y0.shape[0], coeffs.w, coeffs.dim_X
    t = grid.t
    tt = t[None, :]
    f = coeffs.f
    X = rp.X if rp.is_random else np.broadcast_to(rp.X, (M,) + rp.X.shape)
    dX0t = X - X[:, :1]
    f0 = f(0.0, y0)                                           # (M, w, d)
    Y = y0[:, None, :] + contract(f0[:, None], dX0t[:, :, None, :])
    Yp = np.broadcast_to(f0[:, None], (M, grid.N + 1, w, d)).copy()
    h = grid.steps
    lebesgue = np.zeros((M, grid.N + 1, w))
    history, worse = [], 0
    converged = False
    for it in range(1, max_iter + 1):
        Yl = Y[:, :-1]
        incr = np.zeros((M, grid.N, w))
        if coeffs.b is not None:
            incr = incr + coeffs.b(tt[:, :-1], Yl) * h[None, :, None]
        if coeffs.sigma is not None:
            incr = incr + contract(coeffs.sigma(tt[:, :-1], Yl), noise[:, :, None, :])
        np.cumsum(incr, axis=1, out=lebesgue[:, 1:])
        Z = f(tt, Y)
        Zp = apply_jacobian(f.jac(tt, Y), Yp) + f.deriv(tt, Y, d)
        integrand = ControlledPath(grid, Z, Zp, 2)
        rough = riemann_path(forward_germ(integrand, rp), 1)
        Y_new = y0[:, None, :] + lebesgue + rough
        Yp_new = Z
        dist, parts = _picard_metric(Y_new, Yp_new, Y, Yp, rp.dX, grid, m, beta, beta_prime,
                                     pair_budget)
        history.append(dict(iteration=it, d=dist, **parts))
        log.debug("picard sweep %d: d = %.3e", it, dist)
        if history[-2:-1] and dist > history[-2]["d"]:
            worse += 1
        else:
            worse = 0
        Y, Yp = Y_new, Yp_new
        if worse >= 3:
            raise PicardError(f"Picard metric increased on 3 consecutive sweeps (d = {dist:.3e})",
                              history)
        if not np.isfinite(dist):
            raise PicardError("Picard metric is not finite", history)
        if dist < tol:
            converged = True
            break
    if not converged:
        warnings.warn(f"Picard iteration stopped after {max_iter} sweeps with d = {dist:.3e}",
                      RuntimeWarning, stacklevel=3)
    return Y, dict(iterations=len(history), converged=converged, final_metric=history[-1]["d"],
                   history=history)


# --------------------------------------------------------------------- local solutions

@dataclass(frozen=True)
class StoppingPolicy:
    """Increasing clamp/exit radii; the exit rule is the first grid index with ``|y| > K``."""

    radii: tuple

    def __post_init__(self):
        r = np.asarray(self.radii, dtype=np.float64)
        if r.size == 0 or np.any(np.diff(r) <= 0) or np.any(r <= 0):
            raise ValueError("radii must be positive and strictly increasing")

    @classmethod
    def default(cls, xi, n_levels: int = 24) -> "StoppingPolicy":
        """``K_n = sup|xi| + 2^n`` for ``n = 0 .. n_levels - 1``."""
        base = float(np.max(tensor_norm(np.atleast_2d(np.asarray(xi, dtype=np.float64)), 1)))
        return cls(tuple(base + 2.0 ** n for n in range(n_levels)))


def _exit_index(Y: np.ndarray, K: float) -> np.ndarray:
    """First grid index with ``|Y| > K`` (non-finite counts as outside); ``N + 1`` if none."""
    r = tensor_norm(Y, 1)
    out = ~(r <= K)
    hit = out.any(axis=1)
    return np.where(hit, np.argmax(out, axis=1), Y.shape[1])


def solve_local(coeffs: RSDECoefficients, rp, noise, xi, grid: TimeGrid | None = None,
                policy: StoppingPolicy | None = None, workers: int = 1):
    """Maximal-solution proxy: clamped solves on increasing radii, spliced at exit times.

    Returns ``(trajectory, tau)``. The trajectory is stopped at ``tau`` (held at
    the exit value). Samples still exiting at the last radius are flagged as
    blown up; samples that never exit have ``tau = T``.
    """
    grid = grid or rp.grid
    policy = policy or StoppingPolicy.default(xi)
    exits, splice_gap = [], 0.0
    prev_Y, prev_e = None, None
    for K in policy.radii:
        traj = solve_rsde(coeffs.localized(K), rp, noise, xi, grid, "davie", workers)
        e = _exit_index(traj.Y, K)
        if prev_Y is not None:
            upto = np.minimum(np.minimum(prev_e, e), grid.N)
            idx = np.arange(grid.N + 1)[None, :] <= upto[:, None]
            gap = np.abs(np.where(idx[..., None], traj.Y - prev_Y, 0.0))
            splice_gap = max(splice_gap, float(np.nanmax(gap)) if gap.size else 0.0)
        exits.append(e)
        prev_Y, prev_e = traj.Y, e
    exits = np.stack(exits)                                    # (n_radii, M)
    last = exits[-1]
    never = last > grid.N
    idx = np.minimum(last, grid.N)
    tau = np.where(never, grid.T, grid.t[idx])
    held = np.arange(grid.N + 1)[None, :] > idx[:, None]
    Y = np.where(held[..., None], prev_Y[np.arange(prev_Y.shape[0]), idx][:, None, :], prev_Y)
    exit_times = np.where(exits > grid.N, np.inf, grid.t[np.minimum(exits, grid.N)])
    # never-exiting samples carry inf at every radius; compare raw indices instead
    info = dict(radii=[float(r) for r in policy.radii], splice_max_gap=splice_gap,
                tau_monotone=bool(np.all(np.diff(exits, axis=0) >= 0)),
                exit_times=exit_times)
    out = Trajectory(grid, Y, coeffs, "davie-local", ~never, None, info)
    return out, tau


# --------------------------------------------------------------------- remainder diagnostics

@dataclass
class RemainderJ:
    """Forward ``J`` and backward ``Jbar`` on the outer ensemble plus scaling fits."""

    grid: TimeGrid
    J: FunctionField
    Jbar: FunctionField
    report: dict


def _germ_parts(coeffs, t, Y, d):
    f = coeffs.f
    if f is None:
        z = np.zeros(Y.shape + (d,))
        return z, np.zeros(Y.shape + (d, d))
    Z = f(t, Y)
    Zp = apply_jacobian(f.jac(t, Y), Z) + f.deriv(t, Y, d)
    return Z, Zp


def _J_from_path(coeffs, Y, t_idx, grid, dX, XX, d, index_axis):
    """Fine-cell sums of the rough germ along ``Y`` plus the coarse forward/backward germs."""
    tt = grid.t[t_idx]
    Z, Zp = _germ_parts(coeffs, tt.reshape((1,) * index_axis + (-1,)), Y, d)
    cells = contract(Z[..., :-1, :, :], dX[..., None, :]) + _second_order_term(Zp[..., :-1, :, :, :],
                                                                               XX, 1)
    S = np.concatenate([np.zeros_like(cells[..., :1, :]), np.cumsum(cells, axis=index_axis)],
                       axis=index_axis)
    return S, Z, Zp


def remainder_diagnostics(traj: Trajectory | None, coeffs: RSDECoefficients, rp, noise=None,
                          fine_factor: int = 8, be: BranchedEnsemble | None = None, m: float = 2.0,
                          n: float = np.inf, xi=None, alpha: float | None = None,
                          alpha_bar_prime: float | None = None) -> RemainderJ:
    """Scaling of ``J_{s,t}`` and ``Jbar_{s,t}`` over dyadic spans of ``fine_factor * 2^q`` cells.

    ``rp`` and ``be`` live on the fine grid; the Lebesgue and Itô integrals in
    ``J`` are the fine-grid sums of the Davie march, so on every pair
    ``J_{s,t} = sum of fine rough germs - coarse rough germ``. Conditional
    norms use futures re-marched from ``Y_s`` at every branch point. ``traj``
    must be the solution on the outer noise of ``be`` (solved here when None).
    """
    if be is None:
        raise ValueError("remainder diagnostics need a branched ensemble")
    grid = be.grid
    if rp.is_random:
        raise ValueError("branched remainder diagnostics need a deterministic driver")
    d = coeffs.dim_X
    dX_all, XX_all = _driver_cells(rp, grid, d)
    if noise is None and coeffs.sigma is not None:
        noise = be.outer_increments()
    if traj is None:
        if xi is None:
            raise ValueError("need a trajectory or an initial value")
        y0 = _as_states(xi, be.n_outer, coeffs.w)
        traj = Trajectory(grid, _march(coeffs, y0, noise, dX_all, XX_all, grid), coeffs, "davie",
                          np.zeros(be.n_outer, bool))
    if traj.Y.shape[0] != be.n_outer or not traj.grid.same_as(grid):
        raise ValueError("trajectory must be solved on the outer paths of the branched ensemble")
    Y = traj.Y
    S, Z, Zp = _J_from_path(coeffs, Y, np.arange(grid.N + 1), grid, dX_all, XX_all, d, 1)

    def J_fn(i, j):
        A = (contract(np.take(Z, i, axis=1), rp.dX(i, j)[..., None, :])
             + _second_order_term(np.take(Zp, i, axis=1), rp.XX(i, j), 1))
        return np.take(S, j, axis=1) - np.take(S, i, axis=1) - A

    def Jbar_fn(i, j):
        dXij = rp.dX(i, j)
        corr = rp.XX(i, j) - dXij[..., :, None] * dXij[..., None, :]
        A = (contract(np.take(Z, j, axis=1), dXij[..., None, :])
             + _second_order_term(np.take(Zp, j, axis=1), corr, 1))
        return np.take(S, j, axis=1) - np.take(S, i, axis=1) - A

    J = FunctionField(J_fn, grid, (coeffs.w,), (Y.shape[0],))
    Jbar = FunctionField(Jbar_fn, grid, (coeffs.w,), (Y.shape[0],))

    spans = []
    g = fine_factor
    while any(s + g <= grid.N for s in be.branch_points):
        spans.append(g)
        g *= 2
    if len(spans) < MIN_SCALES:
        raise SolverError(f"only {len(spans)} dyadic span scales available, need {MIN_SCALES}")
    keys = ("cond_J", "mean_J", "cond_Jbar", "mean_Jbar", "plain_J")
    res = {k: np.zeros(len(spans)) for k in keys}
    for s in be.branch_points:
        s = int(s)
        usable = [q for q, g in enumerate(spans) if s + g <= grid.N]
        if not usable:
            continue
        gmax = spans[usable[-1]]
        y0 = np.broadcast_to(Y[:, None, s], (be.n_outer, be.n_inner, coeffs.w)).reshape(-1, coeffs.w)
        nz = None
        if coeffs.sigma is not None:
            nz = be.future_increments(s, gmax).reshape(-1, gmax, coeffs.dim_B)
        dXs, XXs = dX_all[s:s + gmax], XX_all[s:s + gmax]
        Yb = _shifted_march(coeffs, y0, nz, dXs, XXs, grid, s, gmax)
        Yb = Yb.reshape(be.n_outer, be.n_inner, gmax + 1, coeffs.w)
        Sb, Zb, Zpb = _J_from_path(coeffs, Yb, np.arange(s, s + gmax + 1), grid, dXs, XXs, d, 2)
        for q in usable:
            g = spans[q]
            dXg = rp.X[s + g] - rp.X[s]
            XXg = rp.XX(s, s + g)
            corr = XXg - dXg[:, None] * dXg[None, :]
            Jq = Sb[:, :, g] - contract(Zb[:, :, 0], dXg) - _second_order_term(Zpb[:, :, 0], XXg, 1)
            Jbq = Sb[:, :, g] - contract(Zb[:, :, g], dXg) - _second_order_term(Zpb[:, :, g], corr, 1)
            for key, v in (("J", Jq), ("Jbar", Jbq)):
                res["cond_" + key][q] = max(res["cond_" + key][q], conditional_norm(v, m, n, 1).value)
                res["mean_" + key][q] = max(res["mean_" + key][q], outer_norm(conditional_mean(v), m, 1))
    for q, g in enumerate(spans):
        starts = np.arange(0, grid.N - g + 1, g)
        mags = tensor_norm(J(starts, starts + g), 1)              # (Mo, P)
        res["plain_J"][q] = float(np.max(np.mean(mags ** m, axis=0) ** (1 / m)))
    h = np.array([grid.t[g] - grid.t[0] for g in spans])
    alpha = rp.alpha if alpha is None else alpha
    abp = alpha if alpha_bar_prime is None else alpha_bar_prime
    fits = {k: loglog_fit(h, v) for k, v in res.items()}
    report = dict(spans=h.tolist(), **{k: v.tolist() for k, v in res.items()},
                  fits={k: f.as_dict() for k, f in fits.items()},
                  target_cond=2 * alpha, target_mean=2 * alpha + abp,
                  n_outer=be.n_outer, n_inner=be.n_inner, m=m, n=n)
    return RemainderJ(grid, J, Jbar, report)


def _shifted_march(coeffs, y0, noise, dX, XX, grid, s, n_cells):
    """March ``n_cells`` steps starting at grid index ``s`` (times and steps of the full grid)."""
    M = y0.shape[0]
    Y = np.empty((M, n_cells + 1, coeffs.w))
    Y[:, 0] = y0
    h, t = grid.steps, grid.t
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(n_cells):
            dB = None if noise is None else noise[:, k]
            Y[:, k + 1] = step_davie(Y[:, k], coeffs, dB, dX[k], XX[k], h[s + k], t[s + k])
    return Y


# --------------------------------------------------------------------- Doob-Meyer split

def doob_meyer_split(cp: ControlledPath, rp, be: BranchedEnsemble, levels: int | None = None,
                     m: float = 2.0) -> dict:
    """Split ``Z = Z_0 + M + J`` with ``J`` sewn from the germ ``E_s dZ_{s,t}``.

    ``cp.state_fn(k, b)`` must give ``Z`` at grid index ``k`` from the Brownian
    value ``B_k = b``; conditional means use the inner futures of ``be``, whose
    branch points must contain every grid point of the finest partition.
    Returns the outer-path ensembles ``M`` and ``J`` with diagnostics.
    """
    if cp.state_fn is None:
        raise ValueError("doob_meyer_split needs a controlled path with a state function")
    grid = be.grid
    L = grid.level
    if L is None:
        raise GridError("Doob-Meyer split needs a dyadic grid")
    levels = L if levels is None else int(levels)
    cell = 1 << (L - levels)
    need = np.arange(0, grid.N, cell)
    if not np.all(np.isin(need, be.branch_points)):
        raise ValueError("branching insufficient: every partition point must be a branch point")
    Bout = be.outer_paths()
    phi = cp.state_fn
    Z_outer = np.stack([phi(k, Bout[:, k]) for k in range(grid.N + 1)], axis=1)
    cache: dict[tuple[int, int], np.ndarray] = {}

    def cond_increment(u, c):
        key = (int(u), int(c))
        if key not in cache:
            fut = be.future_increments(int(u), int(c)).sum(axis=2)          # (Mo, Mi, d)
            b_end = Bout[:, None, u] + fut
            vals = phi(int(u) + int(c), b_end)
            cache[key] = conditional_mean(vals) - Z_outer[:, u]
        return cache[key]

    def germ_fn(i, j):
        shape = np.shape(i)
        vals = [cond_increment(a, b - a) if b > a else np.zeros_like(Z_outer[:, 0])
                for a, b in zip(np.ravel(i), np.ravel(j))]
        out = np.stack(vals, axis=1)
        return out.reshape(out.shape[:1] + shape + out.shape[2:])

    vnd = Z_outer.ndim - 2
    germ = Germ(germ_fn, grid, Z_outer.shape[2:], (be.n_outer,), check=False)
    rep = sew(germ, grid, levels, m)
    J = rep.path
    Zc = Z_outer[:, ::cell]
    Mart = Zc - Zc[:, :1] - J
    out_grid = rep.grid
    # martingale check: E[dM_{s,t} g(F_s)] = 0 for test functions g of the past
    checks = []
    Bc = Bout[:, ::cell]
    gap = 1
    while gap <= out_grid.N:
        for s in range(0, out_grid.N - gap + 1, max(gap, out_grid.N // 8)):
            dM = Mart[:, s + gap] - Mart[:, s]
            for name, g in (("1", np.ones(be.n_outer)), ("B_s", Bc[:, s, 0]),
                            ("B_s^2-s", Bc[:, s, 0] ** 2 - out_grid.t[s])):
                prod = dM.reshape(be.n_outer, -1) * g[:, None]
                mean = prod.mean(axis=0)
                se = prod.std(axis=0, ddof=1) / np.sqrt(be.n_outer)
                z = np.where(se > 0, np.abs(mean) / np.where(se > 0, se, 1.0),
                             np.where(np.abs(mean) > 0, np.inf, 0.0))
                checks.append(dict(s=float(out_grid.t[s]), t=float(out_grid.t[s + gap]), test=name,
                                   mean=float(np.max(np.abs(mean))), stderr=float(np.max(se)),
                                   z=float(np.max(z))))
        gap *= 2
    # controlled bound on J: ||dJ_{s,t} - Z'_s dX_{s,t}||_m over dyadic spans
    nb = len(cp.batch_shape)
    spans, jz = [], []
    gap = 1
    while gap <= out_grid.N // 2:
        s = np.arange(0, out_grid.N - gap + 1, gap)
        dJ = J[:, s + gap] - J[:, s]
        Zps = np.take(cp.Zp, s * cell, axis=nb)
        lead = contract(Zps, _expand_driver(rp.dX(s * cell, (s + gap) * cell), vnd))
        err = tensor_norm(dJ - lead, vnd)
        spans.append(out_grid.t[gap])
        jz.append(float(np.max(np.mean(err ** m, axis=0) ** (1 / m))))
        gap *= 2
    fit = loglog_fit(spans, jz)
    max_z = max(c["z"] for c in checks) if checks else 0.0
    return dict(grid=out_grid, M=Mart, J=J, Z=Zc, sew_report=rep, martingale_checks=checks,
                martingale_max_z=max_z, jz_spans=spans, jz=jz, jz_fit=fit.as_dict())
