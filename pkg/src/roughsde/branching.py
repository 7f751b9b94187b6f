"""Nested ("branched") Brownian ensembles and conditional (m, n)-norm estimates.

Outer sample ``i`` is a full Brownian path; it coincides with sample ``i`` of
``rng.brownian_increments(grid, ..., seed, name)`` so branched estimates share
noise with plain ensembles. At a branch point ``s`` every outer path gets
``n_inner`` fresh futures on ``[s, T]``, drawn from a stream keyed by
``(s, i)``. Futures are drawn cell by cell, so the first ``k`` cells of a
future do not depend on how many cells were requested.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import rng
from .timegrid import TimeGrid, lm_norm, tensor_norm


class BranchingError(ValueError):
    pass


def default_branch_points(N: int) -> np.ndarray:
    """Every ``2^k``-th grid point for ``2^k = max(1, N / 32)``."""
    stride = max(1, N // 32)
    return np.arange(0, N, stride)


class BranchedEnsemble:
    """``n_outer`` pasts, each with ``n_inner`` conditionally i.i.d. futures per branch point."""

    def __init__(self, grid: TimeGrid, n_outer: int = 256, n_inner: int = 64, dim: int = 1,
                 seed: int = 0, branch_points=None, antithetic: bool = True, name: str = "B"):
        if n_outer < 1 or n_inner < 1:
            raise BranchingError("ensemble sizes must be positive")
        if antithetic and n_inner % 2:
            raise BranchingError("antithetic futures need an even inner size")
        self.grid = grid
        self.n_outer = int(n_outer)
        self.n_inner = int(n_inner)
        self.dim = int(dim)
        self.seed = int(seed)
        self.name = name
        self.antithetic = antithetic
        bp = default_branch_points(grid.N) if branch_points is None else np.asarray(branch_points)
        if bp.size == 0 or np.any(bp < 0) or np.any(bp >= grid.N):
            raise BranchingError("branch points must be grid indices in [0, N)")
        self.branch_points = np.unique(bp.astype(np.intp))
        self._outer = None

    def is_branch_point(self, s_idx: int) -> bool:
        return bool(np.any(self.branch_points == s_idx))

    def outer_increments(self) -> np.ndarray:
        if self._outer is None:
            self._outer = rng.brownian_increments(self.grid, self.n_outer, self.dim, self.seed,
                                                  self.name)
        return self._outer

    def outer_paths(self) -> np.ndarray:
        """``(M_outer, N + 1, dim)``."""
        return rng.cumulative(self.outer_increments())

    def future_increments(self, s_idx: int, n_cells: int) -> np.ndarray:
        """Fresh increments over cells ``s, ..., s + n_cells - 1``, shape ``(Mo, Mi, n_cells, d)``."""
        if not self.is_branch_point(s_idx):
            raise BranchingError(f"grid index {s_idx} is not a branch point")
        if n_cells < 1 or s_idx + n_cells > self.grid.N:
            raise BranchingError("future runs past the horizon")
        half = self.n_inner // 2 if self.antithetic else self.n_inner
        scale = np.sqrt(self.grid.steps[s_idx:s_idx + n_cells])[None, None, :, None]
        out = np.empty((self.n_outer, self.n_inner, n_cells, self.dim))
        for i in range(self.n_outer):
            z = rng.stream(self.seed, self.name + "/future", s_idx, i).standard_normal(
                (n_cells, half, self.dim))
            z = np.swapaxes(z, 0, 1)
            out[i] = np.concatenate([z, -z]) if self.antithetic else z
        return out * scale

    def branch_paths(self, s_idx: int, t_idx: int) -> np.ndarray:
        """Paths on grid indices ``0..t_idx``: outer past up to ``s``, inner futures after.

        Shape ``(Mo, Mi, t_idx + 1, d)``.
        """
        if t_idx <= s_idx:
            raise BranchingError("need t > s")
        past = self.outer_paths()[:, : s_idx + 1]
        fut = self.future_increments(s_idx, t_idx - s_idx)
        tail = past[:, None, -1:, :] + np.cumsum(fut, axis=2)
        head = np.broadcast_to(past[:, None], (self.n_outer, self.n_inner) + past.shape[1:])
        return np.concatenate([head, tail], axis=2)


@dataclass
class CondNormEstimate:
    value: float
    stderr: float
    m: float
    n: float
    n_outer: int
    n_inner: int

    def as_dict(self) -> dict:
        return dict(value=self.value, stderr=self.stderr, m=self.m, n=self.n,
                    n_outer=self.n_outer, n_inner=self.n_inner)


def conditional_norm(samples, m: float, n: float, value_ndim: int = 0) -> CondNormEstimate:
    """Estimate ``|| ||A | F_s||_m ||_n`` from samples of shape ``(Mo, Mi) + value``.

    Inner m-th moments over futures, then the n-th moment (max for n = inf)
    over pasts. The standard error combines the outer spread and the inner
    Monte Carlo error by the delta method.
    """
    if not 1 <= m < np.inf:
        raise BranchingError("m must lie in [1, inf)")
    if n < m:
        raise BranchingError("need n >= m")
    a = tensor_norm(np.asarray(samples, dtype=np.float64), value_ndim)
    if a.ndim != 2:
        raise BranchingError("samples must have shape (n_outer, n_inner) + value")
    Mo, Mi = a.shape
    am = a ** m
    mu = am.mean(axis=1)
    q = mu ** (1.0 / m)
    # stderr of each inner conditional norm q_i
    with np.errstate(divide="ignore", invalid="ignore"):
        se_q = np.where(mu > 0, q / (m * mu) * am.std(axis=1, ddof=1 if Mi > 1 else 0) / np.sqrt(Mi), 0.0)
    if np.isinf(n):
        k = int(np.argmax(q))
        return CondNormEstimate(float(q[k]), float(se_q[k]), m, n, Mo, Mi)
    qn = q ** n
    mean_qn = qn.mean()
    est = mean_qn ** (1.0 / n)
    if mean_qn == 0:
        return CondNormEstimate(0.0, 0.0, m, n, Mo, Mi)
    se_outer = est / (n * mean_qn) * (qn.std(ddof=1) if Mo > 1 else 0.0) / np.sqrt(Mo)
    grad = est ** (1.0 - n) * q ** (n - 1) / Mo
    se_inner = np.sqrt(np.sum((grad * se_q) ** 2))
    return CondNormEstimate(float(est), float(np.hypot(se_outer, se_inner)), m, n, Mo, Mi)


def plain_norm(samples, m: float, value_ndim: int = 0) -> tuple[float, float]:
    """``||A||_m`` over every sample axis, with a delta-method stderr."""
    a = tensor_norm(np.asarray(samples, dtype=np.float64), value_ndim).ravel()
    if np.isinf(m):
        return float(a.max()), 0.0
    am = a ** m
    mu = am.mean()
    est = mu ** (1.0 / m)
    se = 0.0 if mu == 0 else est / (m * mu) * am.std(ddof=1) / np.sqrt(a.size)
    return float(est), float(se)


def cond_norm(be: BranchedEnsemble, A, s: int, t: int, m: float, n: float,
              value_ndim: int = 0) -> CondNormEstimate:
    """Conditional norm of the functional ``A(B, s, t)`` at grid indices ``s < t``.

    ``A`` receives branch paths of shape ``(Mo, Mi, t + 1, d)`` and returns
    an array of shape ``(Mo, Mi) + value``.
    """
    if not 1 <= m < np.inf:
        raise BranchingError("m must lie in [1, inf)")
    if n < m:
        raise BranchingError("need n >= m")
    if not be.is_branch_point(s):
        raise BranchingError(f"grid index {s} is not a branch point")
    B = be.branch_paths(s, t)
    return conditional_norm(A(B, s, t), m, n, value_ndim)


def conditional_mean(samples) -> np.ndarray:
    """``E_s A`` estimated per past: mean over the inner axis."""
    return np.asarray(samples).mean(axis=1)


def outer_norm(values, n: float, value_ndim: int = 0) -> float:
    """``||.||_n`` over the outer axis of per-past values ``(Mo,) + value``."""
    return float(lm_norm(tensor_norm(values, value_ndim), n, axis=0))
