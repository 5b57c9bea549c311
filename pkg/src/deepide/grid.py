"""Uniform tensor grids on the label domains and quadrature on them.

Every field on the label set is stored as its values at cell centers; the
midpoint rule with the cell measures as weights realizes the L2 integrals.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np

DEFAULT_RANK_TOL = 1e-10


class GridMismatchError(ValueError):
    """Raised when fields living on different grids are combined."""


def _as_tuple(value, dim: int, cast=float) -> tuple:
    if np.isscalar(value):
        return tuple(cast(value) for _ in range(dim))
    out = tuple(cast(v) for v in value)
    if len(out) != dim:
        raise ValueError(f"expected {dim} entries, got {len(out)}")
    return out


@dataclass(frozen=True)
class SpatialGrid:
    """Uniform tensor grid of ``prod(shape)`` cells on a box in R^dim.

    Cells are ordered C-style (last axis fastest), which matches
    ``numpy.reshape`` of an image with the same shape.
    """

    lower: tuple[float, ...]
    upper: tuple[float, ...]
    shape: tuple[int, ...]

    def __post_init__(self):
        if not (len(self.lower) == len(self.upper) == len(self.shape)) or not self.shape:
            raise ValueError("lower, upper and shape must have equal, nonzero length")
        if any(n < 1 for n in self.shape):
            raise ValueError("every axis needs at least one cell")
        if any(hi <= lo for lo, hi in zip(self.lower, self.upper)):
            raise ValueError("upper bounds must exceed lower bounds")

    @classmethod
    def uniform(cls, cells: int | Sequence[int], lower=0.0, upper=1.0, dim: int | None = None) -> "SpatialGrid":
        if dim is None:
            dim = 1 if np.isscalar(cells) else len(cells)
        shape = _as_tuple(cells, dim, int)
        return cls(_as_tuple(lower, dim), _as_tuple(upper, dim), shape)

    @property
    def dim(self) -> int:
        return len(self.shape)

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    @cached_property
    def spacing(self) -> np.ndarray:
        return (np.array(self.upper) - np.array(self.lower)) / np.array(self.shape)

    @cached_property
    def centers(self) -> np.ndarray:
        axes = [lo + (np.arange(n) + 0.5) * h for lo, n, h in zip(self.lower, self.shape, self.spacing)]
        mesh = np.meshgrid(*axes, indexing="ij")
        out = np.stack([m.ravel() for m in mesh], axis=1)
        out.setflags(write=False)
        return out

    @cached_property
    def weights(self) -> np.ndarray:
        out = np.full(self.size, float(np.prod(self.spacing)))
        out.setflags(write=False)
        return out

    @property
    def total_measure(self) -> float:
        return float(np.prod(np.array(self.upper) - np.array(self.lower)))

    def function(self, values) -> "GridFunction":
        return GridFunction(self, values)

    def evaluate(self, fn) -> "GridFunction":
        """Sample ``fn`` (called with an (M, dim) array of centers) at cell centers."""
        return GridFunction(self, np.asarray(fn(self.centers), dtype=float).reshape(self.size))

    def to_dict(self) -> dict:
        return {"lower": list(self.lower), "upper": list(self.upper), "shape": list(self.shape)}

    @classmethod
    def from_dict(cls, d: dict) -> "SpatialGrid":
        return cls(tuple(map(float, d["lower"])), tuple(map(float, d["upper"])), tuple(map(int, d["shape"])))


def _frozen(values, shape) -> np.ndarray:
    arr = np.array(values, dtype=float).reshape(shape)
    if not np.all(np.isfinite(arr)):
        raise ValueError("values must be finite")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class GridFunction:
    """Scalar field on a :class:`SpatialGrid`, one value per cell."""

    grid: SpatialGrid
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        if vals.size != self.grid.size:
            raise GridMismatchError(f"{vals.size} values for a grid of {self.grid.size} cells")
        object.__setattr__(self, "values", _frozen(vals, (self.grid.size,)))

    def norm(self) -> float:
        return float(np.sqrt(l2_inner(self, self)))

    def integral(self) -> float:
        return float(np.dot(self.values, self.grid.weights))

    def __add__(self, other: "GridFunction") -> "GridFunction":
        _check_same(self.grid, other.grid)
        return GridFunction(self.grid, self.values + other.values)

    def __sub__(self, other: "GridFunction") -> "GridFunction":
        _check_same(self.grid, other.grid)
        return GridFunction(self.grid, self.values - other.values)

    def __mul__(self, scalar: float) -> "GridFunction":
        return GridFunction(self.grid, scalar * self.values)

    __rmul__ = __mul__


@dataclass(frozen=True, eq=False)
class Kernel:
    """Scalar field on ``row_grid x col_grid`` (e.g. b(y, z) or w(u, y))."""

    row_grid: SpatialGrid
    col_grid: SpatialGrid
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        shape = (self.row_grid.size, self.col_grid.size)
        vals = np.asarray(self.values, dtype=float)
        if vals.shape != shape:
            raise GridMismatchError(f"kernel of shape {vals.shape}, grids need {shape}")
        object.__setattr__(self, "values", _frozen(vals, shape))

    def norm(self) -> float:
        """L2(row x col) norm."""
        w = np.outer(self.row_grid.weights, self.col_grid.weights)
        return float(np.sqrt(np.sum(self.values**2 * w)))

    def operator(self) -> np.ndarray:
        """Matrix acting on nodal values: (B f)_k = sum_l b_kl f_l w_l."""
        return self.values * self.col_grid.weights[None, :]

    def adjoint(self) -> "Kernel":
        return Kernel(self.col_grid, self.row_grid, self.values.T)


def _check_same(g1: SpatialGrid, g2: SpatialGrid) -> None:
    if g1 != g2:
        raise GridMismatchError(f"grid mismatch: {g1} vs {g2}")


def l2_inner(f: GridFunction, g: GridFunction) -> float:
    """Quadrature L2 inner product sum_k f_k g_k |Y_k|."""
    _check_same(f.grid, g.grid)
    return float(np.dot(f.values * g.values, f.grid.weights))


def weighted_norm(values: np.ndarray, weights: np.ndarray, axis=-1) -> np.ndarray:
    """L2 norm of nodal values along ``axis`` (array helper used by the solvers)."""
    return np.sqrt(np.sum(np.asarray(values) ** 2 * weights, axis=axis))


def gram_matrix(functions: Sequence[GridFunction]) -> np.ndarray:
    """Gram matrix G_ij = <f_i, f_j> of a list of grid functions."""
    if not functions:
        raise ValueError("need at least one function")
    grid = functions[0].grid
    for f in functions[1:]:
        _check_same(grid, f.grid)
    F = np.stack([f.values for f in functions])
    G = (F * grid.weights) @ F.T
    return 0.5 * (G + G.T)


def numerical_rank(M: np.ndarray, tol: float = DEFAULT_RANK_TOL) -> int:
    s = np.linalg.svd(np.atleast_2d(M), compute_uv=False)
    if s.size == 0 or s[0] == 0.0:
        return 0
    return int(np.sum(s > tol * s[0]))


def weak_li_test(functions: Sequence[GridFunction], tol: float = DEFAULT_RANK_TOL) -> bool:
    """True iff the functions are weakly linearly independent.

    Weak independence means sum(l_j f_j) = 0 together with sum(l_j) = 0
    forces l = 0; equivalently the Gram matrix stacked with a row of ones
    has rank N.
    """
    G = gram_matrix(functions)
    n = G.shape[0]
    stacked = np.vstack([G, np.ones((1, n))])
    return numerical_rank(stacked, tol) == n


def pseudo_inverse(M: np.ndarray, tol: float = DEFAULT_RANK_TOL) -> np.ndarray:
    """Moore-Penrose inverse; singular values below ``tol`` times the largest are dropped."""
    M = np.asarray(M, dtype=float)
    if not np.all(np.isfinite(M)):
        raise ValueError("matrix must be finite")
    return np.linalg.pinv(M, rcond=tol)
