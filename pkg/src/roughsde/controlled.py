"""Controlled paths (Z, Z'), controlled vector fields, composition and their norms.

Shapes: a controlled path with values of shape ``vs`` against a ``d``-dimensional
driver stores ``Z`` as ``batch + (N+1,) + vs`` and ``Z'`` as
``batch + (N+1,) + vs + (d,)``. Contraction ``Z' dX`` runs over the last axis.

Vector fields act on states of shape ``(w,)``; ``Df`` appends a trailing
``w`` axis to the output shape and ``f'`` appends a trailing ``d`` axis.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .branching import BranchedEnsemble, conditional_mean, conditional_norm, outer_norm
from .timegrid import (DEFAULT_PAIR_BUDGET, FunctionField, GridError, IncrementField, TimeGrid, TwoParamField, grid_pairs,
                       holder_norm_lm, holder_seminorm, lm_norm, tensor_norm)


def contract(Zp: np.ndarray, dX: np.ndarray) -> np.ndarray:
    """``Z' dX`` summed over the driver axis; broadcasts batch axes."""
    return np.sum(Zp * dX, axis=-1)


def _expand_driver(dX: np.ndarray, n_value: int) -> np.ndarray:
    # batch + P + (d,) -> batch + P + (1,)*n_value + (d,)
    return dX.reshape(dX.shape[:-1] + (1,) * n_value + dX.shape[-1:])


@dataclass(frozen=True, eq=False)
class ControlledPath:
    """Pair ``(Z, Z')`` on a grid with declared exponents ``(beta, beta_prime)``.

    ``builder`` optionally rebuilds ``(Z, Z')`` from Brownian paths of shape
    ``batch + (k+1, d_B)`` (grid indices ``0..k``); it is how functionals are
    evaluated on branched ensembles. ``state_fn(k, b)`` optionally gives
    ``Z`` at grid index ``k`` from the Brownian value ``B_k = b`` when ``Z`` is
    a function of the current Brownian state.
    """

    grid: TimeGrid
    Z: np.ndarray
    Zp: np.ndarray
    value_ndim: int = 1
    beta: float = 0.5
    beta_prime: float = 0.5
    builder: Callable | None = field(default=None, repr=False)
    state_fn: Callable | None = field(default=None, repr=False)

    def __post_init__(self):
        Z = np.asarray(self.Z, dtype=np.float64)
        Zp = np.asarray(self.Zp, dtype=np.float64)
        object.__setattr__(self, "Z", Z)
        object.__setattr__(self, "Zp", Zp)
        ax = Z.ndim - self.value_ndim - 1
        if ax < 0 or Z.shape[ax] != self.grid.N + 1:
            raise GridError("Z does not match the grid")
        if Zp.shape[:-1] != Z.shape:
            raise ValueError(f"Z' shape {Zp.shape} does not extend Z shape {Z.shape}")

    @property
    def batch_shape(self) -> tuple:
        return self.Z.shape[: self.Z.ndim - self.value_ndim - 1]

    @property
    def value_shape(self) -> tuple:
        return self.Z.shape[self.Z.ndim - self.value_ndim:]

    @property
    def driver_dim(self) -> int:
        return self.Zp.shape[-1]

    @property
    def dZ(self) -> IncrementField:
        return IncrementField(self.Z, self.grid, self.value_ndim)

    @property
    def dZp(self) -> IncrementField:
        return IncrementField(self.Zp, self.grid, self.value_ndim + 1)

    def Zp_at(self, i) -> np.ndarray:
        return np.take(self.Zp, i, axis=len(self.batch_shape))

    def Z_at(self, i) -> np.ndarray:
        return np.take(self.Z, i, axis=len(self.batch_shape))

    def __add__(self, other: "ControlledPath") -> "ControlledPath":
        return ControlledPath(self.grid, self.Z + other.Z, self.Zp + other.Zp, self.value_ndim,
                              min(self.beta, other.beta), min(self.beta_prime, other.beta_prime))

    def scale(self, c: float) -> "ControlledPath":
        return ControlledPath(self.grid, c * self.Z, c * self.Zp, self.value_ndim,
                              self.beta, self.beta_prime)


def _check_driver(cp: ControlledPath, rp):
    if not cp.grid.same_as(rp.grid):
        raise GridError("controlled path and rough path live on different grids")
    if cp.driver_dim != rp.dim:
        raise ValueError(f"Z' acts on {cp.driver_dim}-dim drivers, X has dim {rp.dim}")
    cb, rb = cp.batch_shape, rp.batch_shape
    if cb and rb and cb != rb:
        raise ValueError("controlled path and random rough path ensembles differ")


def remainder(cp: ControlledPath, rp) -> TwoParamField:
    """``R^Z_{s,t} = dZ_{s,t} - Z'_s dX_{s,t}``."""
    _check_driver(cp, rp)
    dZ, dX = cp.dZ, rp.dX
    nv = cp.value_ndim
    batch = np.broadcast_shapes(cp.batch_shape, rp.batch_shape)

    def fn(i, j):
        return dZ(i, j) - contract(cp.Zp_at(i), _expand_driver(dX(i, j), nv))

    return FunctionField(fn, cp.grid, cp.value_shape, batch)


# --------------------------------------------------------------------- vector fields

def smootherstep(x):
    x = np.clip(x, 0.0, 1.0)
    return x * x * x * (x * (6.0 * x - 15.0) + 10.0)


def radial_clamp(y: np.ndarray, K: float):
    """C^2 radial map equal to the identity on ``|y| <= K``, constant in norm beyond ``1.1 K``.

    Returns ``(y_clamped, jacobian)``; on ``|y| <= K`` the input values are
    returned unchanged (bit for bit) and the jacobian is the identity.
    """
    y = np.asarray(y, dtype=np.float64)
    w = y.shape[-1]
    r = np.sqrt(np.sum(y * y, axis=-1))
    width = K / 10.0
    x = np.clip((r - K) / width, 0.0, 1.0)
    # rho(r) = K + width * int_0^x (1 - S(u)) du, S the smootherstep
    rho = np.where(r <= K, r, K + width * (x - (x ** 6 - 3.0 * x ** 5 + 2.5 * x ** 4)))
    drho = 1.0 - smootherstep(x)
    inside = r <= K
    safe_r = np.where(inside, 1.0, r)
    ratio = np.where(inside, 1.0, rho / safe_r)
    yc = np.where(inside[..., None], y, y * ratio[..., None])
    u = y / safe_r[..., None]
    eye = np.eye(w)
    jac = ratio[..., None, None] * eye + (np.where(inside, 0.0, drho - ratio))[..., None, None] \
        * u[..., :, None] * u[..., None, :]
    jac = np.where(inside[..., None, None], eye, jac)
    return yc, jac


@dataclass(frozen=True, eq=False)
class ControlledVectorField:
    """Deterministic controlled vector field ``(f, f')`` with jacobian ``Df``.

    Callables take ``(t, y)`` with ``y`` of shape ``batch + (w,)`` and ``t``
    broadcastable to ``batch``; they return ``batch + out_shape`` (``f``),
    ``batch + out_shape + (w,)`` (``Df``) and ``batch + out_shape + (d,)`` (``f'``).
    """

    f: Callable
    Df: Callable
    out_shape: tuple
    w: int
    fprime: Callable | None = None
    D2f: Callable | None = None
    gamma: float = 3.0
    name: str = "custom"
    params: dict = field(default_factory=dict)
    global_bound: bool = True

    def __call__(self, t, y):
        return self.f(t, np.asarray(y, dtype=np.float64))

    def jac(self, t, y):
        return self.Df(t, np.asarray(y, dtype=np.float64))

    def deriv(self, t, y, d: int):
        """``f'_t(y)``; zero when no Gubinelli derivative in time was declared."""
        y = np.asarray(y, dtype=np.float64)
        if self.fprime is None:
            return np.zeros(y.shape[:-1] + tuple(self.out_shape) + (d,))
        return self.fprime(t, y)

    def localized(self, K: float) -> "ControlledVectorField":
        """Truncation ``f^K(y) = f(c_K(y))`` with the C^2 radial clamp ``c_K``."""
        if not K > 0:
            raise ValueError("clamp radius must be positive")
        base = self
        n_out = len(self.out_shape)

        def f(t, y):
            yc, _ = radial_clamp(y, K)
            return base.f(t, yc)

        def Df(t, y):
            yc, J = radial_clamp(y, K)
            D = base.Df(t, yc)
            return np.sum(D[..., :, None] * J.reshape(J.shape[:-2] + (1,) * n_out + J.shape[-2:]),
                          axis=-2)

        fprime = None
        if self.fprime is not None:
            def fprime(t, y):
                return base.fprime(t, radial_clamp(y, K)[0])
        return ControlledVectorField(f, Df, self.out_shape, self.w, fprime, None, self.gamma,
                                     f"{self.name}|clamp{K:g}", dict(self.params, clamp=K), True)


def _arr(x, shape=None):
    a = np.asarray(x, dtype=np.float64)
    return a if shape is None else a.reshape(shape)


def _out_shape(w, k):
    return (w,) if k is None else (w, k)


def _linear(A, w, k):
    out = _out_shape(w, k)
    A = _arr(A)
    if A.ndim == 0:
        A = A * np.ones(out + (w,)) if (w == 1 and (k in (None, 1))) else A * _eye_like(out, w)
    A = A.reshape(out + (w,))
    return A


def _eye_like(out, w):
    # A_{i,...,c} = delta_{i c}: the "scalar times identity" choice for out = (w,) or (w, k)
    E = np.zeros(out + (w,))
    for i in range(w):
        E[(i,) + (slice(None),) * (len(out) - 1) + (i,)] = 1.0
    return E


def make_field(name: str, w: int = 1, k: int | None = None, **params) -> ControlledVectorField:
    """Vector field from the built-in registry.

    ``w`` is the state dimension; ``k`` the driver dimension for fields valued
    in ``L(R^k, R^w)`` (diffusions and rough coefficients), or None for drifts.

    Names and parameters:

    * ``constant``: ``c``
    * ``linear``: ``A`` (scalar or array ``out + (w,)``), ``f(y) = A y``
    * ``affine``: ``c``, ``A``
    * ``sin``: ``amp``, ``freq``, ``phase``; ``f(y)_{i...} = amp sin(freq y_i + phase)``
    * ``polynomial``: ``coeffs`` (lowest degree first), elementwise; only locally Lipschitz
    * ``tanh_poly``: ``coeffs``, ``scale``; ``scale * tanh(p(y) / scale)`` elementwise
    * ``rotation``: ``omega``; ``w = 2``, ``f(y) = omega J y`` with ``J`` the quarter turn
    """
    out = _out_shape(w, k)
    n_out = len(out)

    def spread(v):
        # elementwise function of y_i placed on every driver column
        return v if k is None else np.repeat(v[..., :, None], k, axis=-1)

    def diag_jac(dv):
        # d f_{i...}/d y_c = dv_i delta_{ic}
        eye = np.eye(w)
        jac = dv[..., :, None] * eye
        return jac if k is None else np.repeat(jac[..., :, None, :], k, axis=-2)

    if name == "constant":
        c = np.broadcast_to(_arr(params.get("c", 1.0)), out).copy()
        f = lambda t, y: np.broadcast_to(c, y.shape[:-1] + out).copy()
        Df = lambda t, y: np.zeros(y.shape[:-1] + out + (w,))
        gamma, bounded = np.inf, True
    elif name in ("linear", "affine"):
        A = _linear(params.get("A", params.get("lam", 1.0)), w, k)
        c = np.broadcast_to(_arr(params.get("c", 0.0)), out).copy() if name == "affine" else 0.0
        f = lambda t, y: np.sum(A * y[..., None, :].reshape(y.shape[:-1] + (1,) * n_out + (w,)), axis=-1) + c
        Df = lambda t, y: np.broadcast_to(A, y.shape[:-1] + A.shape).copy()
        gamma, bounded = np.inf, False
    elif name == "sin":
        amp, freq, phase = (float(params.get(p, d)) for p, d in (("amp", 1.0), ("freq", 1.0), ("phase", 0.0)))
        f = lambda t, y: spread(amp * np.sin(freq * y + phase))
        Df = lambda t, y: diag_jac(amp * freq * np.cos(freq * y + phase))
        gamma, bounded = np.inf, True
    elif name == "polynomial":
        coeffs = np.asarray(params.get("coeffs", [0.0, 0.0, 1.0]), dtype=np.float64)
        dcoeffs = np.polynomial.polynomial.polyder(coeffs)
        f = lambda t, y: spread(np.polynomial.polynomial.polyval(y, coeffs))
        Df = lambda t, y: diag_jac(np.polynomial.polynomial.polyval(y, dcoeffs))
        gamma, bounded = np.inf, False
    elif name == "tanh_poly":
        coeffs = np.asarray(params.get("coeffs", [0.0, 1.0, 0.0, -0.1]), dtype=np.float64)
        scale = float(params.get("scale", 1.0))
        dcoeffs = np.polynomial.polynomial.polyder(coeffs)
        f = lambda t, y: spread(scale * np.tanh(np.polynomial.polynomial.polyval(y, coeffs) / scale))
        Df = lambda t, y: diag_jac((1.0 - np.tanh(np.polynomial.polynomial.polyval(y, coeffs) / scale) ** 2)
                                   * np.polynomial.polynomial.polyval(y, dcoeffs))
        gamma, bounded = np.inf, True
    elif name == "rotation":
        if w != 2:
            raise ValueError("rotation field needs w = 2")
        omega = float(params.get("omega", 1.0))
        J = omega * np.array([[0.0, -1.0], [1.0, 0.0]])
        A = J if k is None else np.repeat(J[:, None, :], k, axis=1)
        f = lambda t, y: np.sum(A * y.reshape(y.shape[:-1] + (1,) * n_out + (w,)), axis=-1)
        Df = lambda t, y: np.broadcast_to(A, y.shape[:-1] + A.shape).copy()
        gamma, bounded = np.inf, False
    else:
        raise KeyError(f"unknown vector field {name!r}")
    return ControlledVectorField(f, Df, out, w, None, None, gamma, name, dict(params, w=w, k=k),
                                 bounded)


def apply_jacobian(D: np.ndarray, Yp: np.ndarray) -> np.ndarray:
    """``(Df Y')_{o...,a} = sum_c Df_{o...,c} Y'_{c,a}``; ``Yp`` has shape ``batch + (w, d)``."""
    out_nd = D.ndim - 1 - (Yp.ndim - 2)
    Yp_e = Yp.reshape(Yp.shape[:-2] + (1,) * out_nd + Yp.shape[-2:])
    return np.sum(D[..., :, None] * Yp_e, axis=-2)


def compose(f: ControlledVectorField, cp: ControlledPath) -> ControlledPath:
    """``Z_t = f_t(Y_t)``, ``Z'_t = Df_t(Y_t) Y'_t + f'_t(Y_t)``."""
    if cp.value_ndim != 1 or cp.value_shape != (f.w,):
        raise ValueError(f"field acts on states of shape ({f.w},), got {cp.value_shape}")
    bshape = cp.batch_shape
    t = cp.grid.t.reshape((1,) * len(bshape) + (-1,))
    Z = f(t, cp.Z)
    Zp = apply_jacobian(f.jac(t, cp.Z), cp.Zp) + f.deriv(t, cp.Z, cp.driver_dim)
    beta_p = min(cp.beta_prime, cp.beta)
    return ControlledPath(cp.grid, Z, Zp, len(f.out_shape), cp.beta, beta_p)


# --------------------------------------------------------------------- norms on branched ensembles

def _pair_table(be: BranchedEnsemble, N: int, max_span: int | None):
    pairs = []
    for s in be.branch_points:
        gap = 1
        while s + gap <= N and (max_span is None or gap <= max_span):
            pairs.append((int(s), int(s + gap)))
            gap *= 2
    return pairs


def scrp_norm(cp: ControlledPath, rp, m: float, n: float, beta: float | None = None,
              beta_prime: float | None = None, be: BranchedEnsemble | None = None,
              max_span: int | None = None) -> dict:
    """Components of the (m, n) controlled-path seminorm, estimated at branch-point pairs.

    Needs ``cp.builder`` and a deterministic driver ``rp``. Returns the four
    components, the variant with the plain remainder norm and the raw table.
    """
    if be is None or cp.builder is None:
        raise ValueError("scrp_norm needs a branched ensemble and a path builder")
    if rp.is_random:
        raise ValueError("conditional norms are estimated against a deterministic driver")
    _check_driver(cp, rp)
    beta = cp.beta if beta is None else beta
    beta_prime = cp.beta_prime if beta_prime is None else beta_prime
    nv = cp.value_ndim
    t_grid = cp.grid.t
    rows = []
    by_s: dict[int, list[int]] = {}
    for s, t in _pair_table(be, cp.grid.N, max_span):
        by_s.setdefault(s, []).append(t)
    for s, ts in by_s.items():
        B = be.branch_paths(s, max(ts))
        Z, Zp = cp.builder(B)
        Z = np.broadcast_to(Z, B.shape[:2] + np.shape(Z)[-(nv + 1):])
        Zp = np.broadcast_to(Zp, B.shape[:2] + np.shape(Zp)[-(nv + 2):])
        for t in ts:
            h = t_grid[t] - t_grid[s]
            dZ = Z[:, :, t] - Z[:, :, s]
            dZp = Zp[:, :, t] - Zp[:, :, s]
            R = dZ - contract(Zp[:, :, s], _expand_driver(rp.X[t] - rp.X[s], nv))
            cz = conditional_norm(dZ, m, n, nv)
            czp = conditional_norm(dZp, m, n, nv + 1)
            cr = conditional_norm(R, m, n, nv)
            er = outer_norm(conditional_mean(R), n, nv)
            rows.append(dict(s=float(t_grid[s]), t=float(t_grid[t]), h=float(h),
                             dZ=cz.value, dZ_stderr=cz.stderr, dZp=czp.value, R=cr.value,
                             ER=er))
    Zp_outer = cp.builder(be.outer_paths())[1]
    Zp_outer = np.asarray(Zp_outer)
    ax = Zp_outer.ndim - nv - 2
    mags = tensor_norm(Zp_outer, nv + 1)
    sup_zp = float(np.max(lm_norm(mags, n, axis=tuple(range(ax))) if ax > 0 else mags))
    comp = dict(
        dZ=max(r["dZ"] / r["h"] ** beta for r in rows),
        sup_Zp=sup_zp,
        dZp=max(r["dZp"] / r["h"] ** beta_prime for r in rows),
        ER=max(r["ER"] / r["h"] ** (beta + beta_prime) for r in rows),
        R=max(r["R"] / r["h"] ** (beta + beta_prime) for r in rows),
    )
    return dict(components=comp,
                norm=comp["dZ"] + comp["sup_Zp"] + comp["dZp"] + comp["ER"],
                norm_plain_remainder=comp["dZ"] + comp["sup_Zp"] + comp["dZp"] + comp["R"],
                table=rows, m=m, n=n, beta=beta, beta_prime=beta_prime,
                n_outer=be.n_outer, n_inner=be.n_inner)


# --------------------------------------------------------------------- distances

def truncated_moment(x, m: float, value_ndim: int = 0) -> float:
    """``|| |x| ^ 1 ||_m`` over every sample axis."""
    a = np.minimum(tensor_norm(np.asarray(x, dtype=np.float64), value_ndim), 1.0)
    return float(lm_norm(a.ravel(), m, axis=0)) if a.ndim else float(a)


def scrp_distance(cp1: ControlledPath, rp1, cp2: ControlledPath, rp2, m: float = 2.0,
                  kappa: float = 0.5, kappa_prime: float = 0.5, terms: bool = False,
                  pair_budget: int = DEFAULT_PAIR_BUDGET):
    """Distance between controlled paths on (possibly different) drivers, plain L_m norms.

    The remainder term uses ``R - R_bar`` itself, an upper bound for the
    conditional-mean version.
    """
    if cp1.Z.shape != cp2.Z.shape or cp1.Zp.shape != cp2.Zp.shape:
        raise ValueError("controlled paths are not paired sample by sample")
    if not cp1.grid.same_as(cp2.grid):
        raise GridError("controlled paths live on different grids")
    _check_driver(cp1, rp1)
    _check_driver(cp2, rp2)
    nv = cp1.value_ndim
    grid = cp1.grid
    dZ = cp1.Z - cp2.Z
    dZp = cp1.Zp - cp2.Zp
    batch = np.broadcast_shapes(cp1.batch_shape, rp1.batch_shape, rp2.batch_shape)
    nb = len(cp1.batch_shape)

    def rem(i, j):
        d = np.take(dZ, j, axis=nb) - np.take(dZ, i, axis=nb)
        d = d - contract(np.take(cp1.Zp, i, axis=nb), _expand_driver(rp1.dX(i, j), nv))
        return d + contract(np.take(cp2.Zp, i, axis=nb), _expand_driver(rp2.dX(i, j), nv))

    parts = dict(
        initial=truncated_moment(np.take(dZ, 0, axis=nb), m, nv),
        dY=holder_norm_lm(IncrementField(dZ, grid, nv), kappa, m, pair_budget=pair_budget),
        dYp=holder_norm_lm(IncrementField(dZp, grid, nv + 1), kappa_prime, m, pair_budget=pair_budget),
        R=holder_norm_lm(FunctionField(rem, grid, cp1.value_shape, batch),
                         min(kappa + kappa_prime, 1.0), m, pair_budget=pair_budget),
    )
    total = sum(parts.values())
    return (total, parts) if terms else total


def default_probe(Y: np.ndarray, n_per_axis: int = 9, inflate: float = 0.2) -> np.ndarray:
    """Uniform lattice over the empirical range of states ``Y`` (last axis), inflated by 20%."""
    Y = np.asarray(Y, dtype=np.float64)
    flat = Y.reshape(-1, Y.shape[-1])
    flat = flat[np.all(np.isfinite(flat), axis=1)]
    if flat.size == 0:
        raise ValueError("no finite states to build a probe set from")
    lo, hi = flat.min(axis=0), flat.max(axis=0)
    pad = inflate * np.maximum(hi - lo, 1e-12) / 2.0
    axes = [np.linspace(a - p, b + p, n_per_axis) for a, b, p in zip(lo, hi, pad)]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([g.ravel() for g in mesh], axis=-1)


def _probe_field_values(fn, grid: TimeGrid, probe):
    # (P, N+1) + out via t broadcast against probe points
    y = np.broadcast_to(probe[:, None, :], (probe.shape[0], grid.N + 1, probe.shape[1]))
    return fn(grid.t[None, :], y)


def cvf_distance(f: ControlledVectorField, rp, fbar: ControlledVectorField, rpbar, m: float = 2.0,
                 beta: float = 0.5, beta_prime: float = 0.5, probe=None) -> dict:
    """Sup-over-probe estimates of the four bracket terms between two controlled vector fields.

    Remainders ``R^f_{s,t}(y) = f_t(y) - f_s(y) - f'_s(y) dX_{s,t}`` use each
    field's own driver; for random drivers the L_m norm is taken over samples
    of the probe supremum (no conditioning, an upper bound). Companion sup-norm
    gaps are reported alongside.
    """
    if probe is None:
        raise ValueError("a probe set is required")
    probe = np.atleast_2d(np.asarray(probe, dtype=np.float64))
    if probe.shape[0] == 0:
        raise ValueError("empty probe set")
    grid = rp.grid
    if not grid.same_as(rpbar.grid):
        raise GridError("drivers live on different grids")
    d = rp.dim
    out = tuple(f.out_shape)
    nout = len(out)
    F = _probe_field_values(f.f, grid, probe)
    Fb = _probe_field_values(fbar.f, grid, probe)
    D = _probe_field_values(f.Df, grid, probe)
    Db = _probe_field_values(fbar.Df, grid, probe)
    Fp = _probe_field_values(lambda t, y: f.deriv(t, y, d), grid, probe)
    Fpb = _probe_field_values(lambda t, y: fbar.deriv(t, y, d), grid, probe)

    def bracket(values, vnd, alpha):
        return float(np.max(holder_seminorm(IncrementField(values, grid, vnd), alpha)))

    def remainder_gap(i, j):
        # shape batch + (P,) + pairs + out
        def R(Fv, Fpv, X):
            dX = X.dX(i, j)  # batch + P_pairs + (d,)
            dXe = dX.reshape(dX.shape[:-1] + (1,) * nout + (d,))
            dXe = np.expand_dims(dXe, axis=len(X.batch_shape))  # batch + (1,) + pairs + 1.. + (d,)
            return (Fv[:, j] - Fv[:, i]) - np.sum(Fpv[:, i] * dXe, axis=-1)
        return R(F, Fp, rp) - R(Fb, Fpb, rpbar)

    ii, jj = grid_pairs(grid)
    scale = (grid.t[jj] - grid.t[ii]) ** min(beta + beta_prime, 1.0)
    best = 0.0
    step = max(1, (1 << 21) // max(1, probe.shape[0] * int(np.prod(out)) * max(1, int(np.prod(rp.batch_shape or (1,))))))
    for k in range(0, ii.size, step):
        sl = slice(k, k + step)
        gap = tensor_norm(remainder_gap(ii[sl], jj[sl]), nout)  # batch + (P, pairs)
        sup_y = gap.max(axis=-2) / scale[sl]
        b = sup_y.ndim - 1
        best = max(best, float(np.max(lm_norm(sup_y, m, axis=tuple(range(b))) if b else sup_y)))
    terms = dict(
        df=bracket(F - Fb, nout, beta),
        dfprime=bracket(Fp - Fpb, nout + 1, beta_prime),
        dDf=bracket(D - Db, nout + 1, beta_prime),
        ER=best,
    )
    sup_terms = dict(f=float(np.max(tensor_norm(F - Fb, nout))),
                     fprime=float(np.max(tensor_norm(Fp - Fpb, nout + 1))),
                     Df=float(np.max(tensor_norm(D - Db, nout + 1))))
    return dict(distance=sum(terms.values()), terms=terms, sup_norms=sup_terms,
                n_probe=int(probe.shape[0]))
