"""Dense feature grids with a single post-interpolation nonlinearity.

A :class:`FieldGrid` stores unbounded feature vectors at the vertices of a
regular 2D or 3D lattice. Queries are multilinearly interpolated from the
``2**m`` surrounding vertices and then passed through one nonlinearity chosen
by :class:`FetchMode`. The backward pass scatters exact gradients to the
contributing vertices, which is all an optimizer needs to fit the grid
directly.

Layout is row-major with the channel axis fastest, i.e. ``values`` has shape
``(*dims, channels)`` and array axis ``k`` corresponds to world axis ``k``.
"""

from __future__ import annotations

import enum
import itertools
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .errors import InvalidArgumentError


class FetchMode(enum.Enum):
    NONE = "none"
    RELU = "relu"
    RELU_CLAMP01 = "relu_clamp01"
    TANH_THEN_RELU = "tanh_then_relu"


@dataclass
class FieldGrid:
    values: np.ndarray
    aabb: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values)
        self.aabb = np.asarray(self.aabb, dtype=np.float64)
        m = self.values.ndim - 1
        if m not in (2, 3):
            raise InvalidArgumentError(f"grid must have 2 or 3 spatial axes, got {m}")
        if any(d < 2 for d in self.values.shape[:-1]):
            raise InvalidArgumentError(f"every axis needs at least 2 vertices, got {self.values.shape[:-1]}")
        if self.values.shape[-1] < 1:
            raise InvalidArgumentError("channels must be positive")
        if self.aabb.shape != (2, m):
            raise InvalidArgumentError(f"aabb must have shape (2, {m}), got {self.aabb.shape}")
        if not np.all(self.aabb[0] < self.aabb[1]):
            raise InvalidArgumentError("aabb min corner must be strictly below max corner")

    @property
    def dims(self) -> tuple[int, ...]:
        return tuple(self.values.shape[:-1])

    @property
    def channels(self) -> int:
        return self.values.shape[-1]

    @property
    def ndim(self) -> int:
        return self.values.ndim - 1

    @property
    def num_vertices(self) -> int:
        return int(np.prod(self.dims))

    def flat(self) -> np.ndarray:
        """``(num_vertices, channels)`` view of the values."""
        return self.values.reshape(-1, self.channels)

    def copy(self) -> "FieldGrid":
        return FieldGrid(self.values.copy(), self.aabb.copy())

    def cell_size(self) -> np.ndarray:
        return (self.aabb[1] - self.aabb[0]) / (np.asarray(self.dims) - 1)


@dataclass
class GradSink:
    """Gradient accumulator shaped like the grid it mirrors."""

    values: np.ndarray

    @classmethod
    def like(cls, grid: FieldGrid) -> "GradSink":
        return cls(np.zeros(grid.values.shape, dtype=np.float64))

    def zero(self) -> None:
        self.values.fill(0.0)

    def flat(self) -> np.ndarray:
        return self.values.reshape(-1, self.values.shape[-1])

    def check_matches(self, grid: FieldGrid) -> None:
        if self.values.shape != grid.values.shape:
            raise InvalidArgumentError(
                f"sink shape {self.values.shape} does not match grid shape {grid.values.shape}"
            )


def world_to_grid(grid: FieldGrid, x_world) -> np.ndarray:
    """Affine map from world space to continuous vertex coordinates."""
    x = np.asarray(x_world, dtype=np.float64)
    lo, hi = grid.aabb
    return (x - lo) * ((np.asarray(grid.dims) - 1) / (hi - lo))


def grid_to_world(grid: FieldGrid, x_grid) -> np.ndarray:
    x = np.asarray(x_grid, dtype=np.float64)
    lo, hi = grid.aabb
    return lo + x * ((hi - lo) / (np.asarray(grid.dims) - 1))


def _lerp(a, b, f):
    # exact at both endpoints and for equal inputs
    return np.where(a == b, a, (1.0 - f) * a + f * b)


def _corner_offsets(m: int) -> np.ndarray:
    # first axis varies slowest, matching the reduction order in _interpolate
    return np.array(list(itertools.product((0, 1), repeat=m)), dtype=np.int64)


def _cells(grid: FieldGrid, x_grid: np.ndarray):
    """Flat corner indices ``(N, 2**m)`` and fractional offsets ``(N, m)``."""
    if not np.all(np.isfinite(x_grid)):
        raise InvalidArgumentError("query coordinates must be finite")
    dims = np.asarray(grid.dims)
    x = np.clip(x_grid, 0.0, dims - 1)
    base = np.minimum(np.floor(x).astype(np.int64), dims - 2)
    frac = x - base
    strides = np.cumprod((grid.dims[1:] + (1,))[::-1])[::-1]
    flat = (base @ strides)[:, None] + (_corner_offsets(grid.ndim) @ strides)[None]
    return flat, frac


def _corner_weights(frac: np.ndarray) -> np.ndarray:
    m = frac.shape[1]
    offsets = _corner_offsets(m)
    w = np.ones((frac.shape[0], offsets.shape[0]))
    for k in range(m):
        w *= np.where(offsets[None, :, k] == 1, frac[:, k:k + 1], 1.0 - frac[:, k:k + 1])
    return w


def _interpolate(corner_vals: np.ndarray, frac: np.ndarray) -> np.ndarray:
    """Nested lerps over ``corner_vals`` of shape ``(N, 2**m, C)``."""
    n, _, c = corner_vals.shape
    m = frac.shape[1]
    v = corner_vals.reshape((n,) + (2,) * m + (c,))
    for k in range(m):
        f = frac[:, k].reshape((n,) + (1,) * (m - k - 1) + (1,))
        v = _lerp(v[:, 0], v[:, 1], f)
    return v


def _as_points(grid: FieldGrid, x_grid):
    x = np.asarray(x_grid, dtype=np.float64)
    if x.shape[-1] != grid.ndim:
        raise InvalidArgumentError(f"expected {grid.ndim}-vectors, got trailing dim {x.shape[-1]}")
    return x.reshape(-1, grid.ndim), x.shape[:-1]


def activate(pre: np.ndarray, mode: FetchMode) -> np.ndarray:
    """Post-interpolation nonlinearity (tanh is a pre-interpolation step)."""
    if mode is FetchMode.NONE:
        return pre
    if mode is FetchMode.RELU_CLAMP01:
        return np.clip(pre, 0.0, 1.0)
    return np.maximum(pre, 0.0)


def activation_slope(pre: np.ndarray, mode: FetchMode) -> np.ndarray:
    # subgradient 0 at the kinks
    if mode is FetchMode.NONE:
        return np.ones_like(pre)
    if mode is FetchMode.RELU_CLAMP01:
        return ((pre > 0.0) & (pre < 1.0)).astype(pre.dtype)
    return (pre > 0.0).astype(pre.dtype)


def fetch_preactivation(grid: FieldGrid, mode: FetchMode, x_grid) -> np.ndarray:
    """Interpolated value before the post-interpolation nonlinearity."""
    x, lead = _as_points(grid, x_grid)
    flat, frac = _cells(grid, x)
    corner_vals = grid.flat()[flat]
    if mode is FetchMode.TANH_THEN_RELU:
        corner_vals = np.tanh(corner_vals)
    return _interpolate(corner_vals, frac).reshape(lead + (grid.channels,))


def fetch(grid: FieldGrid, mode: FetchMode, x_grid) -> np.ndarray:
    """Interpolate the grid at continuous vertex coordinates ``x_grid``.

    ``x_grid`` may be a single ``m``-vector or any batch ``(..., m)``;
    coordinates outside ``[0, dims - 1]`` are clamped to the boundary.
    """
    return activate(fetch_preactivation(grid, mode, x_grid), mode)


def fetch_backward(grid: FieldGrid, mode: FetchMode, x_grid, upstream, sink: GradSink) -> None:
    """Accumulate d(upstream . fetch(x_grid)) / d(vertex values) into ``sink``."""
    sink.check_matches(grid)
    x, lead = _as_points(grid, x_grid)
    g = np.asarray(upstream, dtype=np.float64).reshape(-1, grid.channels)
    if g.shape[0] != x.shape[0]:
        raise InvalidArgumentError("upstream batch does not match query batch")
    flat, frac = _cells(grid, x)
    w = _corner_weights(frac)
    corner_vals = grid.flat()[flat]
    if mode is FetchMode.TANH_THEN_RELU:
        corner_vals = np.tanh(corner_vals)
    pre = _interpolate(corner_vals, frac)
    g_pre = g * activation_slope(pre, mode)
    contrib = w[:, :, None] * g_pre[:, None, :]
    if mode is FetchMode.TANH_THEN_RELU:
        contrib *= 1.0 - corner_vals * corner_vals
    scatter_add(sink.flat(), flat, contrib)


def scatter_add(target: np.ndarray, idx: np.ndarray, contrib: np.ndarray) -> None:
    """``target[idx[n, k]] += contrib[n, k]`` with repeated indices summed."""
    n_rows, channels = target.shape
    idx = idx.ravel()
    contrib = contrib.reshape(idx.shape[0], channels)
    for c in range(channels):
        target[:, c] += np.bincount(idx, weights=contrib[:, c], minlength=n_rows)


def interpolation_matrix(grid: FieldGrid, x_grid) -> sp.csr_matrix:
    """Sparse ``(N, num_vertices)`` matrix of multilinear weights.

    For fixed query points ``matrix @ grid.flat()`` is the mode-None fetch and
    ``matrix.T @ upstream`` its vertex gradient.
    """
    x, _ = _as_points(grid, x_grid)
    flat, frac = _cells(grid, x)
    w = _corner_weights(frac)
    rows = np.repeat(np.arange(x.shape[0]), w.shape[1])
    return sp.csr_matrix((w.ravel(), (rows, flat.ravel())), shape=(x.shape[0], grid.num_vertices))


def upsample_source_coords(src_n: int, dst_n: int) -> np.ndarray:
    return np.arange(dst_n) * ((src_n - 1) / (dst_n - 1))


def upsample_trilinear(grid: FieldGrid, factor: int = 2) -> FieldGrid:
    """Double the resolution, endpoints mapping to endpoints.

    Applied one axis at a time; the lerps happen in the same order as in
    :func:`fetch`, so every output vertex equals a mode-None fetch of the
    source at its source coordinate.
    """
    if factor != 2:
        raise InvalidArgumentError("only factor 2 upsampling is supported")
    v = grid.values
    for axis in range(grid.ndim):
        n = v.shape[axis]
        c = upsample_source_coords(n, factor * n)
        base = np.minimum(np.floor(c).astype(np.int64), n - 2)
        shape = [1] * v.ndim
        shape[axis] = -1
        f = (c - base).reshape(shape)
        v = _lerp(np.take(v, base, axis=axis), np.take(v, base + 1, axis=axis), f)
    return FieldGrid(np.ascontiguousarray(v), grid.aabb.copy())


def init_uniform(dims, channels: int, aabb, value_range=(-0.1, 0.1), seed: int = 0,
                 rng: np.random.Generator | None = None) -> FieldGrid:
    dims = tuple(int(d) for d in dims)
    if any(d <= 0 for d in dims) or channels <= 0:
        raise InvalidArgumentError(f"dims and channels must be positive, got {dims}, {channels}")
    lo, hi = value_range
    if lo > hi:
        raise InvalidArgumentError(f"empty init range [{lo}, {hi}]")
    rng = np.random.default_rng(seed) if rng is None else rng
    values = rng.uniform(lo, hi, size=dims + (channels,))
    return FieldGrid(values, aabb)
