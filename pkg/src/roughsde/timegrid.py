"""Time grids, two-parameter fields on the simplex and discrete Hölder seminorms.

Layout conventions used throughout the package:

* a one-parameter path is an array of shape ``batch + (N + 1,) + value``;
* a two-parameter field evaluated on index arrays ``i, j`` of shape ``P``
  returns an array of shape ``batch + P + value``.

``batch`` is empty for deterministic objects, ``(M,)`` for a Monte Carlo
ensemble and ``(M_outer, M_inner)`` on a branched ensemble.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

#: above this many grid pairs, seminorms scan only pairs whose index gap is a power of two
DEFAULT_PAIR_BUDGET = 1 << 17

# elements materialised per chunk while scanning pairs
_CHUNK_ELEMENTS = 1 << 22


class GridError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class TimeGrid:
    """Strictly increasing times ``0 = t[0] < ... < t[N] = T``."""

    t: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.t, dtype=np.float64)
        if t.ndim != 1 or t.size < 2:
            raise GridError("a grid needs at least two points")
        if t[0] != 0.0:
            raise GridError("grids start at t=0")
        if np.any(np.diff(t) <= 0):
            raise GridError("grid times must be strictly increasing")
        t.setflags(write=False)
        object.__setattr__(self, "t", t)

    @property
    def N(self) -> int:
        return self.t.size - 1

    @property
    def T(self) -> float:
        return float(self.t[-1])

    @property
    def steps(self) -> np.ndarray:
        return np.diff(self.t)

    @property
    def is_uniform(self) -> bool:
        h = self.steps
        return bool(np.allclose(h, h[0], rtol=1e-12, atol=0.0))

    @property
    def level(self) -> int | None:
        """``L`` if this is the dyadic grid ``T k / 2^L``, else None."""
        N = self.N
        if N & (N - 1) or not self.is_uniform:
            return None
        return N.bit_length() - 1

    @property
    def is_dyadic(self) -> bool:
        return self.level is not None

    def same_as(self, other: "TimeGrid") -> bool:
        return self is other or (self.t.shape == other.t.shape and np.array_equal(self.t, other.t))

    def index_of(self, time, rtol: float = 1e-9) -> np.ndarray | int:
        """Grid index of each time; raises GridError for off-grid times."""
        time = np.asarray(time, dtype=np.float64)
        idx = np.clip(np.searchsorted(self.t, time), 0, self.N)
        lower = np.clip(idx - 1, 0, self.N)
        closer = np.abs(self.t[lower] - time) < np.abs(self.t[idx] - time)
        idx = np.where(closer, lower, idx)
        if np.any(np.abs(self.t[idx] - time) > rtol * max(self.T, 1.0)):
            raise GridError("time not on the grid")
        return int(idx) if idx.ndim == 0 else idx

    def refine(self, factor: int) -> "TimeGrid":
        """Grid with ``factor`` equal substeps inside every step."""
        if factor < 1:
            raise GridError("refinement factor must be >= 1")
        if factor == 1:
            return self
        if self.is_uniform:
            n = self.N * factor
            return TimeGrid(self.T * (np.arange(n + 1) / n))
        frac = np.arange(factor) / factor
        fine = (self.t[:-1, None] + np.diff(self.t)[:, None] * frac).ravel()
        return TimeGrid(np.append(fine, self.t[-1]))

    def coarsen(self, factor: int) -> "TimeGrid":
        if factor < 1 or self.N % factor:
            raise GridError("coarsening factor must divide N")
        return TimeGrid(self.t[::factor])


def make_grid(T: float, N: int, kind: str = "uniform") -> TimeGrid:
    """Uniform or dyadic grid of ``N`` intervals on ``[0, T]``."""
    if not T > 0:
        raise GridError("horizon T must be positive")
    if int(N) != N or N < 1:
        raise GridError("N must be a positive integer")
    N = int(N)
    if kind == "dyadic":
        if N & (N - 1):
            raise GridError(f"dyadic grids need N = 2^L, got {N}")
    elif kind != "uniform":
        raise GridError(f"unknown grid kind {kind!r}")
    # k/N is exact for N = 2^L, so t[k] is the correctly rounded T k / 2^L
    return TimeGrid(float(T) * (np.arange(N + 1) / N))


def tensor_norm(x: np.ndarray, value_ndim: int) -> np.ndarray:
    """Frobenius norm over the trailing ``value_ndim`` axes."""
    x = np.asarray(x)
    if value_ndim == 0:
        return np.abs(x)
    axes = tuple(range(x.ndim - value_ndim, x.ndim))
    return np.sqrt(np.sum(x * x, axis=axes))


class TwoParamField:
    """Tensor-valued function ``(s, t) -> A_{s,t}`` on grid pairs ``s <= t``.

    Subclasses implement ``_eval(i, j)`` for integer index arrays of a common
    shape. Fields combine linearly (``A + B``, ``c * A``) lazily.
    """

    def __init__(self, grid: TimeGrid, value_shape=(), batch_shape=()):
        self.grid = grid
        self.value_shape = tuple(value_shape)
        self.batch_shape = tuple(batch_shape)

    @property
    def value_ndim(self) -> int:
        return len(self.value_shape)

    def __call__(self, i, j) -> np.ndarray:
        i, j = np.broadcast_arrays(np.asarray(i, dtype=np.intp), np.asarray(j, dtype=np.intp))
        if np.any(i < 0) or np.any(j > self.grid.N):
            raise IndexError("pair index outside the grid")
        if np.any(i > j):
            raise ValueError("two-parameter fields are only defined for s <= t")
        return self._eval(i, j)

    def _eval(self, i: np.ndarray, j: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def at_times(self, s, t) -> np.ndarray:
        return self(self.grid.index_of(s), self.grid.index_of(t))

    def dense(self) -> np.ndarray:
        """All pairs as ``batch + (N+1, N+1) + value``; entries with s > t are zero."""
        n = self.grid.N + 1
        i, j = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
        lower = i > j
        vals = self(np.where(lower, j, i), np.where(lower, i, j))
        b = len(self.batch_shape)
        mask = lower.reshape((1,) * b + lower.shape + (1,) * self.value_ndim)
        return np.where(mask, 0.0, vals)

    def _combine(self, other, op):
        if isinstance(other, TwoParamField):
            if not self.grid.same_as(other.grid):
                raise GridError("fields live on different grids")
            batch = np.broadcast_shapes(self.batch_shape, other.batch_shape)
            value = np.broadcast_shapes(self.value_shape, other.value_shape)
            return FunctionField(lambda i, j: op(self._eval(i, j), other._eval(i, j)),
                                 self.grid, value, batch)
        return NotImplemented

    def __add__(self, other):
        return self._combine(other, np.add)

    def __sub__(self, other):
        return self._combine(other, np.subtract)

    def __mul__(self, c):
        if isinstance(c, TwoParamField):
            return NotImplemented
        return FunctionField(lambda i, j: c * self._eval(i, j), self.grid,
                             self.value_shape, self.batch_shape)

    __rmul__ = __mul__

    def __neg__(self):
        return -1.0 * self


class FunctionField(TwoParamField):
    """Field defined by a vectorised callable ``fn(i, j)``."""

    def __init__(self, fn, grid, value_shape=(), batch_shape=()):
        super().__init__(grid, value_shape, batch_shape)
        self._fn = fn

    def _eval(self, i, j):
        return self._fn(i, j)


class DenseField(TwoParamField):
    """Field stored on all grid pairs, ``values`` of shape ``batch + (N+1, N+1) + value``."""

    def __init__(self, values, grid, value_ndim=0):
        values = np.asarray(values, dtype=np.float64)
        b = values.ndim - value_ndim - 2
        if b < 0 or values.shape[b] != grid.N + 1 or values.shape[b + 1] != grid.N + 1:
            raise GridError("dense field does not match the grid")
        super().__init__(grid, values.shape[b + 2:], values.shape[:b])
        self.values = values

    def _eval(self, i, j):
        b = len(self.batch_shape)
        return self.values[(slice(None),) * b + (i, j)]


class IncrementField(TwoParamField):
    """``delta Y_{s,t} = Y_t - Y_s`` of a one-parameter path."""

    def __init__(self, path, grid, value_ndim=0):
        path = np.asarray(path, dtype=np.float64)
        axis = path.ndim - value_ndim - 1
        if axis < 0 or path.shape[axis] != grid.N + 1:
            raise GridError("path does not match the grid")
        super().__init__(grid, path.shape[axis + 1:], path.shape[:axis])
        self.path = path
        self._axis = axis

    def _eval(self, i, j):
        return np.take(self.path, j, axis=self._axis) - np.take(self.path, i, axis=self._axis)


def delta(path, grid: TimeGrid, value_ndim: int = 0) -> IncrementField:
    """Increment field of ``path`` (grid axis just before the value axes)."""
    return IncrementField(path, grid, value_ndim)


class ThreeParamEval:
    """Lazy ``delta A_{s,u,t} = A_{s,t} - A_{s,u} - A_{u,t}``."""

    def __init__(self, field: TwoParamField):
        self.field = field

    def __call__(self, s, u, t) -> np.ndarray:
        s, u, t = np.broadcast_arrays(*(np.asarray(x, dtype=np.intp) for x in (s, u, t)))
        if np.any(s > u) or np.any(u > t):
            raise ValueError("second delta needs s <= u <= t")
        A = self.field
        return A(s, t) - A(s, u) - A(u, t)


def second_delta(A: TwoParamField) -> ThreeParamEval:
    return ThreeParamEval(A)


def window_indices(grid: TimeGrid, window=None) -> tuple[int, int]:
    if window is None:
        return 0, grid.N
    c, d = window
    lo = int(np.searchsorted(grid.t, c - 1e-12 * max(grid.T, 1.0), side="left"))
    hi = int(np.searchsorted(grid.t, d + 1e-12 * max(grid.T, 1.0), side="right")) - 1
    if hi - lo < 1:
        raise GridError("window contains no non-degenerate grid pair")
    return lo, hi


def dyadic_pairs(lo: int, hi: int) -> tuple[np.ndarray, np.ndarray]:
    """All pairs ``(i, j)`` in ``[lo, hi]`` with ``j - i`` a power of two."""
    iis, jjs = [], []
    gap = 1
    while gap <= hi - lo:
        i = np.arange(lo, hi - gap + 1)
        iis.append(i)
        jjs.append(i + gap)
        gap *= 2
    return np.concatenate(iis), np.concatenate(jjs)


def grid_pairs(grid: TimeGrid, window=None, pair_budget: int = DEFAULT_PAIR_BUDGET):
    """Pairs ``s < t`` scanned by seminorms: all of them, or the dyadic-gap subset over budget."""
    lo, hi = window_indices(grid, window)
    n = hi - lo + 1
    if n * (n - 1) // 2 <= pair_budget:
        i, j = np.triu_indices(n, k=1)
        return i + lo, j + lo
    return dyadic_pairs(lo, hi)


def _chunks(field: TwoParamField, npairs: int):
    per_pair = max(1, int(np.prod(field.batch_shape + field.value_shape, dtype=np.int64)))
    step = max(1, _CHUNK_ELEMENTS // per_pair)
    for start in range(0, npairs, step):
        yield slice(start, min(start + step, npairs))


def holder_seminorm(A: TwoParamField, alpha: float, window=None,
                    pair_budget: int = DEFAULT_PAIR_BUDGET):
    """``max |A_{s,t}| / (t - s)^alpha`` over grid pairs, per batch member.

    Returns a float for deterministic fields and an array of shape
    ``A.batch_shape`` otherwise.
    """
    if not 0 < alpha <= 1:
        raise ValueError("alpha must lie in (0, 1]")
    i, j = grid_pairs(A.grid, window, pair_budget)
    scale = (A.grid.t[j] - A.grid.t[i]) ** alpha
    best = np.zeros(A.batch_shape)
    b = len(A.batch_shape)
    for sl in _chunks(A, i.size):
        vals = tensor_norm(A(i[sl], j[sl]), A.value_ndim) / scale[sl]
        best = np.maximum(best, vals.max(axis=b))
    return float(best) if b == 0 else best


def holder_norm_lm(A: TwoParamField, alpha: float, m: float, window=None,
                   pair_budget: int = DEFAULT_PAIR_BUDGET) -> float:
    """``sup_{s<t} ||A_{s,t}||_{L_m} / (t - s)^alpha`` with moments over all batch axes."""
    i, j = grid_pairs(A.grid, window, pair_budget)
    scale = (A.grid.t[j] - A.grid.t[i]) ** alpha
    b = len(A.batch_shape)
    best = 0.0
    for sl in _chunks(A, i.size):
        mag = tensor_norm(A(i[sl], j[sl]), A.value_ndim)
        best = max(best, float(np.max(lm_norm(mag, m, axis=tuple(range(b))) / scale[sl])))
    return best


def lm_norm(x: np.ndarray, m: float, axis=None) -> np.ndarray:
    """``(E|x|^m)^{1/m}`` over ``axis``; ``m = inf`` gives the max."""
    x = np.abs(x)
    if axis == ():
        return x
    if np.isinf(m):
        return np.max(x, axis=axis)
    return np.mean(x ** m, axis=axis) ** (1.0 / m)
