"""Two-step rough paths: lifts, Chen's relation, rough path metric, stopping.

Second levels built here are stored through their anchors ``XX_{0,t}``;
every pair is reassembled by Chen's relation

    XX_{s,t} = XX_{0,t} - XX_{0,s} - (X_s - X_0) (x) (X_t - X_s),

so the stored object satisfies Chen exactly up to rounding and quadrature
error lives only inside the finest cells.

Index convention: ``XX[..., a, b]`` approximates ``int (X^a_r - X^a_s) dX^b_r``.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, replace

import numpy as np

from . import rng
from .timegrid import (DEFAULT_PAIR_BUDGET, FunctionField, GridError, IncrementField,
                       TimeGrid, TwoParamField, grid_pairs, holder_seminorm, tensor_norm)


class ChenField(TwoParamField):
    """Second level determined by a path ``X`` and anchors ``A_t = XX_{0,t}``."""

    def __init__(self, X, anchor, grid: TimeGrid):
        X = np.asarray(X, dtype=np.float64)
        anchor = np.asarray(anchor, dtype=np.float64)
        if X.shape[-2] != grid.N + 1 or anchor.shape != X.shape + X.shape[-1:]:
            raise GridError("anchor/path shapes do not match the grid")
        super().__init__(grid, anchor.shape[-2:], X.shape[:-2])
        self.X = X
        self.anchor = anchor

    def _eval(self, i, j):
        ax = len(self.batch_shape)
        Xi = np.take(self.X, i, axis=ax)
        Xj = np.take(self.X, j, axis=ax)
        X0 = self.X[..., 0, :].reshape(self.batch_shape + (1,) * i.ndim + self.X.shape[-1:])
        Ai = np.take(self.anchor, i, axis=ax)
        Aj = np.take(self.anchor, j, axis=ax)
        return Aj - Ai - (Xi - X0)[..., :, None] * (Xj - Xi)[..., None, :]


@dataclass(frozen=True, eq=False)
class RoughPath:
    """``(X, XX)`` on a grid. ``X`` has shape ``batch + (N+1, d)``."""

    grid: TimeGrid
    X: np.ndarray
    XX: TwoParamField
    alpha: float = 0.5
    flavor: str = "geometric"

    @property
    def dim(self) -> int:
        return self.X.shape[-1]

    @property
    def batch_shape(self) -> tuple:
        return self.X.shape[:-2]

    @property
    def is_random(self) -> bool:
        return bool(self.batch_shape)

    @property
    def dX(self) -> IncrementField:
        return IncrementField(self.X, self.grid, value_ndim=1)

    def anchor(self) -> np.ndarray:
        """``XX_{0,t}`` for every grid time, shape ``batch + (N+1, d, d)``."""
        if isinstance(self.XX, ChenField):
            return self.XX.anchor
        n = np.arange(self.grid.N + 1)
        return self.XX(np.zeros_like(n), n)

    def holder_norm(self, alpha: float | None = None):
        """``|dX|_alpha + |XX|_{2 alpha}`` per batch member."""
        a = self.alpha if alpha is None else alpha
        return holder_seminorm(self.dX, a) + holder_seminorm(self.XX, min(2 * a, 1.0))

    def sample(self, k: int) -> "RoughPath":
        """Deterministic member ``k`` of a random rough path."""
        if not self.is_random:
            raise ValueError("not a random rough path")
        return RoughPath(self.grid, self.X[k], ChenField(self.X[k], self.anchor()[k], self.grid),
                         self.alpha, self.flavor)

    def dilate(self, c: float) -> "RoughPath":
        """``(c X, c^2 XX)``."""
        return replace(self, X=c * self.X, XX=(c * c) * self.XX)


class RandomRoughPath(RoughPath):
    """Ensemble of rough paths sharing one grid (leading sample axis)."""

    @property
    def n_samples(self) -> int:
        return self.X.shape[0]

    def ensemble_norm(self, alpha: float | None = None) -> float:
        """Max over the ensemble of ``|dX|_alpha + |XX|_{2 alpha}``.

        A biased-low proxy for the essential supremum.
        """
        return float(np.max(self.holder_norm(alpha)))


def _make(grid, X, anchor, alpha, flavor):
    cls = RandomRoughPath if X.ndim > 2 else RoughPath
    return cls(grid, X, ChenField(X, anchor, grid), alpha, flavor)


def _anchors_from_cells(X: np.ndarray, cells: np.ndarray) -> np.ndarray:
    """Anchors at every point of ``X`` given the second-level value of each cell."""
    dX = np.diff(X, axis=-2)
    left = X[..., :-1, :] - X[..., :1, :]
    contrib = left[..., :, None] * dX[..., None, :] + cells
    out = np.zeros(X.shape + X.shape[-1:])
    np.cumsum(contrib, axis=-3, out=out[..., 1:, :, :])
    return out


def lift_smooth(path, grid: TimeGrid, refine: int = 64, alpha: float = 0.5) -> RoughPath:
    """Geometric lift of a smooth path sampled ``refine`` times finer than ``grid``.

    ``path`` is either a callable ``t -> X_t`` (returning ``(len(t), d)``) or an
    array of samples of shape ``batch + (N*refine + 1, d)`` on ``grid.refine(refine)``.
    For even ``refine`` consecutive fine-cell pairs are integrated exactly as
    quadratic panels; otherwise the piecewise-linear interpolation is lifted.
    """
    if int(refine) != refine or refine < 1:
        raise ValueError("refine must be an integer >= 1")
    refine = int(refine)
    fine = grid.refine(refine)
    X = np.asarray(path(fine.t) if callable(path) else path, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    if X.shape[-2] != fine.N + 1:
        raise GridError(f"expected {fine.N + 1} fine samples, got {X.shape[-2]}")
    if refine % 2 == 0:
        x0 = X[..., 0:-1:2, :]
        xm = X[..., 1::2, :]
        x1 = X[..., 2::2, :]
        a = -3.0 * x0 + 4.0 * xm - x1
        b = 2.0 * x0 - 4.0 * xm + 2.0 * x1
        outer = lambda u, v: u[..., :, None] * v[..., None, :]
        cells = 0.5 * outer(a, a) + (2.0 / 3.0) * outer(a, b) + outer(b, a) / 3.0 + 0.5 * outer(b, b)
        nodes = X[..., ::2, :]
        anchor = _anchors_from_cells(nodes, cells)[..., :: refine // 2, :, :]
    else:
        dX = np.diff(X, axis=-2)
        cells = 0.5 * dX[..., :, None] * dX[..., None, :]
        anchor = _anchors_from_cells(X, cells)[..., ::refine, :, :]
    return _make(grid, X[..., ::refine, :], anchor, alpha, "geometric")


def _brownian_anchor(B, t, calculus):
    """Anchors of the Brownian lift from the fine path ``B`` of shape ``(M, n+1, d)``."""
    dB = np.diff(B, axis=-2)
    left = B[..., :-1, :] - B[..., :1, :]
    ito_sum = np.zeros(B.shape + B.shape[-1:])
    np.cumsum(left[..., :, None] * dB[..., None, :], axis=-3, out=ito_sum[..., 1:, :, :])
    area = 0.5 * (ito_sum - np.swapaxes(ito_sum, -1, -2))
    Bt = B - B[..., :1, :]
    anchor = 0.5 * Bt[..., :, None] * Bt[..., None, :] + area
    if calculus == "ito":
        anchor = anchor - 0.5 * t[:, None, None] * np.eye(B.shape[-1])
    return anchor


def lift_brownian(dim: int, grid: TimeGrid, seed: int = 0, calculus: str = "ito",
                  subgrid: int = 64, n_samples: int = 1, alpha: float = 0.45,
                  name: str = "rough") -> RandomRoughPath:
    """Brownian rough path ensemble.

    Increments are exact on a grid ``subgrid`` times finer; the Lévy area is
    the antisymmetric part of fine left-point sums while the symmetric part is
    set exactly (``dB (x) dB / 2``, minus ``(t - s) Id / 2`` for Itô).
    """
    if dim < 1:
        raise ValueError("dim must be >= 1")
    if calculus not in ("ito", "stratonovich"):
        raise ValueError(f"unknown calculus {calculus!r}")
    subgrid = max(1, int(subgrid)) if dim > 1 else 1
    fine = grid.refine(subgrid)
    B = rng.cumulative(rng.brownian_increments(fine, n_samples, dim, seed, name))
    anchor = _brownian_anchor(B, fine.t, calculus)[:, ::subgrid]
    flavor = "geometric" if calculus == "stratonovich" else "ito"
    return RandomRoughPath(grid, B[:, ::subgrid], ChenField(B[:, ::subgrid], anchor, grid),
                           alpha, flavor)


def fgn_covariance(n: int, H: float) -> np.ndarray:
    k = np.arange(n, dtype=np.float64)
    return 0.5 * (np.abs(k + 1) ** (2 * H) - 2 * np.abs(k) ** (2 * H) + np.abs(k - 1) ** (2 * H))


def _fgn_sampler(n: int, H: float):
    """Return ``draw(z)`` mapping ``4n`` standard normals to a unit-step fGn of length ``n``."""
    r = fgn_covariance(n + 1, H)
    c = np.concatenate([r[: n + 1], r[n - 1:0:-1]])
    lam = np.fft.fft(c).real
    if lam.min() >= -1e-10 * lam.max():
        sq = np.sqrt(np.clip(lam, 0.0, None) / (2 * n))

        def draw(z):
            w = np.fft.fft(sq * (z[..., : 2 * n] + 1j * z[..., 2 * n:]), axis=-1)
            return w.real[..., :n]
        return draw
    # embedding not nonnegative definite: exact Cholesky factor of the Toeplitz covariance
    cov = r[np.abs(np.subtract.outer(np.arange(n), np.arange(n)))]
    chol = np.linalg.cholesky(cov)
    return lambda z: z[..., :n] @ chol.T


def lift_fbm(H: float, dim: int, grid: TimeGrid, seed: int = 0, fine_factor: int = 8,
             n_samples: int = 1, alpha: float | None = None, name: str = "fbm") -> RandomRoughPath:
    """Geometric lift of fractional Brownian motion (independent coordinates).

    fBm is synthesised exactly on ``grid.refine(fine_factor)`` by circulant
    embedding (Cholesky when the embedding is not nonnegative definite), then
    the piecewise-linear interpolation is lifted.
    """
    if not 1.0 / 3.0 < H < 1.0:
        raise ValueError("Hurst index must lie in (1/3, 1)")
    if dim < 1:
        raise ValueError("dim must be >= 1")
    if not grid.is_uniform:
        raise GridError("fBm synthesis needs a uniform grid")
    alpha = H - 0.05 if alpha is None else alpha
    if not 0 < alpha < H:
        raise ValueError("declared alpha must lie in (0, H)")
    fine = grid.refine(fine_factor)
    n = fine.N
    draw = _fgn_sampler(n, H)
    z = rng.sample_normals(seed, name, range(n_samples), (dim, 4 * n))
    incr = draw(z) * (fine.T / n) ** H  # (M, dim, n)
    X = rng.cumulative(np.swapaxes(incr, -1, -2))
    dX = np.diff(X, axis=-2)
    anchor = _anchors_from_cells(X, 0.5 * dX[..., :, None] * dX[..., None, :])[:, ::fine_factor]
    rp = RandomRoughPath(grid, X[:, ::fine_factor], ChenField(X[:, ::fine_factor], anchor, grid),
                         alpha, "geometric")
    check_declared_alpha(rp.sample(0))
    return rp


def check_declared_alpha(rp: RoughPath, low: float = 0.8, high: float = 1.25):
    """Ratio of ``|dX|_alpha`` on the grid and on its 2x coarsening; warns when it drifts."""
    if rp.grid.N < 4 or rp.grid.N % 2:
        return None
    fine = holder_seminorm(rp.dX, rp.alpha)
    coarse_grid = rp.grid.coarsen(2)
    coarse = holder_seminorm(IncrementField(rp.X[..., ::2, :], coarse_grid, 1), rp.alpha)
    ratio = float(np.max(fine) / max(np.max(coarse), 1e-300))
    if not low <= ratio <= high:
        warnings.warn(f"declared alpha={rp.alpha} looks inconsistent: seminorm ratio {ratio:.3f} "
                      "across one refinement", RuntimeWarning, stacklevel=2)
    return ratio


def _triples(N: int, pair_budget: int):
    if (N + 1) ** 3 // 6 <= pair_budget:
        s, u, t = np.meshgrid(np.arange(N + 1), np.arange(N + 1), np.arange(N + 1), indexing="ij")
        keep = (s < u) & (u < t)
        return s[keep], u[keep], t[keep]
    ss, uu, tt = [], [], []
    gap = 2
    while gap <= N:
        s = np.arange(0, N - gap + 1)
        ss.append(s)
        uu.append(s + gap // 2)
        tt.append(s + gap)
        gap *= 2
    return np.concatenate(ss), np.concatenate(uu), np.concatenate(tt)


def chen_defect(rp: RoughPath, pair_budget: int = DEFAULT_PAIR_BUDGET) -> float:
    """Max of ``|XX_{s,t} - XX_{s,u} - XX_{u,t} - dX_{s,u} (x) dX_{u,t}|`` over triples."""
    s, u, t = _triples(rp.grid.N, pair_budget)
    dX = rp.dX
    worst = 0.0
    step = max(1, (1 << 20) // max(1, int(np.prod(rp.batch_shape, dtype=np.int64)) * rp.dim ** 2))
    for k in range(0, s.size, step):
        sl = slice(k, k + step)
        a, b, c = s[sl], u[sl], t[sl]
        d = (rp.XX(a, c) - rp.XX(a, b) - rp.XX(b, c)
             - dX(a, b)[..., :, None] * dX(b, c)[..., None, :])
        worst = max(worst, float(np.max(tensor_norm(d, 2))))
    return worst


def symmetrization_defect(rp: RoughPath) -> float:
    """Max over pairs of ``|Sym(XX_{s,t}) - dX (x) dX / 2|`` (zero for geometric lifts)."""
    i, j = grid_pairs(rp.grid)

    def sym_gap(ii, jj):
        xx = rp.XX(ii, jj)
        dx = rp.dX(ii, jj)
        return 0.5 * (xx + np.swapaxes(xx, -1, -2)) - 0.5 * dx[..., :, None] * dx[..., None, :]

    field = FunctionField(sym_gap, rp.grid, (rp.dim, rp.dim), rp.batch_shape)
    step = 1 << 14
    return max(float(np.max(tensor_norm(field(i[k:k + step], j[k:k + step]), 2)))
               for k in range(0, i.size, step))


def rough_distance(rp1: RoughPath, rp2: RoughPath, alpha: float, alpha_prime: float | None = None):
    """``|dX - dX'|_alpha + |XX - XX'|_{alpha + alpha'}`` per batch member."""
    if not rp1.grid.same_as(rp2.grid):
        raise GridError("rough paths live on different grids")
    if rp1.dim != rp2.dim:
        raise ValueError("dimension mismatch")
    alpha_prime = alpha if alpha_prime is None else alpha_prime
    return (holder_seminorm(rp1.dX - rp2.dX, alpha)
            + holder_seminorm(rp1.XX - rp2.XX, min(alpha + alpha_prime, 1.0)))


def stop_rough_path(rp: RoughPath, tau) -> RandomRoughPath:
    """Stopped rough path ``(X_{t^tau}, XX_{s^tau, t^tau})`` with one grid time per sample.

    A deterministic ``rp`` is broadcast to one sample per entry of ``tau``.
    """
    tau = np.atleast_1d(np.asarray(tau, dtype=np.float64))
    k = np.atleast_1d(rp.grid.index_of(tau))
    X = rp.X
    anchor = rp.anchor()
    if not rp.is_random:
        X = np.broadcast_to(X, k.shape + X.shape)
        anchor = np.broadcast_to(anchor, k.shape + anchor.shape)
    elif X.shape[0] != k.size:
        raise ValueError("need one stopping time per sample")
    idx = np.minimum(np.arange(rp.grid.N + 1)[None, :], k[:, None])
    rows = np.arange(k.size)[:, None]
    Xs = X[rows, idx]
    As = anchor[rows, idx]
    return RandomRoughPath(rp.grid, Xs, ChenField(Xs, As, rp.grid), rp.alpha, rp.flavor)


def restrict(rp: RoughPath, factor: int) -> RoughPath:
    """The same rough path seen on ``grid.coarsen(factor)`` (every ``factor``-th point)."""
    factor = int(factor)
    grid = rp.grid.coarsen(factor)
    sl = (Ellipsis, slice(None, None, factor), slice(None))
    X = rp.X[sl]
    anchor = rp.anchor()[(Ellipsis, slice(None, None, factor), slice(None), slice(None))]
    return _make(grid, np.ascontiguousarray(X), np.ascontiguousarray(anchor), rp.alpha, rp.flavor)
