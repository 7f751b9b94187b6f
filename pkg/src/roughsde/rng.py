"""Counter-based random streams.

Every sample draws from its own Philox stream keyed by
``(master seed, stream name, sample index, ...)`` through
:class:`numpy.random.SeedSequence` spawn keys. Sample ``k`` therefore sees the
same numbers whatever the ensemble size, chunking or worker count.
"""
from __future__ import annotations

import zlib

import numpy as np

from .timegrid import TimeGrid

_MASK64 = (1 << 64) - 1


def _stream_code(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


def stream(seed: int, name: str, *index: int) -> np.random.Generator:
    """Generator for one (seed, name, index...) stream."""
    ss = np.random.SeedSequence(entropy=int(seed) & _MASK64,
                                spawn_key=(_stream_code(name),) + tuple(int(k) for k in index))
    return np.random.Generator(np.random.Philox(ss))


def sample_normals(seed: int, name: str, sample_ids, shape, prefix=()) -> np.ndarray:
    """Standard normals of ``shape`` for each id in ``sample_ids``, stacked on axis 0."""
    shape = tuple(shape)
    out = np.empty((len(sample_ids),) + shape)
    for row, k in enumerate(sample_ids):
        out[row] = stream(seed, name, *prefix, k).standard_normal(shape)
    return out


def brownian_increments(grid: TimeGrid, n_samples: int, dim: int = 1, seed: int = 0,
                        name: str = "B", first_sample: int = 0) -> np.ndarray:
    """Exact Brownian increments over each grid step, shape ``(M, N, dim)``."""
    if dim < 1:
        raise ValueError("dim must be >= 1")
    z = sample_normals(seed, name, range(first_sample, first_sample + n_samples), (grid.N, dim))
    return z * np.sqrt(grid.steps)[None, :, None]


def cumulative(increments: np.ndarray, axis: int = -2) -> np.ndarray:
    """Path starting at 0 from increments along ``axis``."""
    axis = axis % increments.ndim
    pad = [(0, 0)] * increments.ndim
    pad[axis] = (1, 0)
    return np.cumsum(np.pad(increments, pad), axis=axis)
