"""Uniform cell grids on boxes, midpoint quadrature and discrete norms.

Fields are piecewise constant per cell, so every quadrature below is exact
for the discrete model.  2D fields are stored as ``(n1, n2)`` arrays with the
first axis running over the cells of ``gx``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Union

import numpy as np


class GridError(ValueError):
    """Invalid grid parameters or incompatible grids."""


@dataclass(frozen=True)
class Grid1D:
    lo: float
    hi: float
    n: int

    def __post_init__(self):
        if not (math.isfinite(self.lo) and math.isfinite(self.hi)):
            raise GridError("grid endpoints must be finite")
        if self.hi <= self.lo:
            raise GridError(f"need hi > lo, got lo={self.lo}, hi={self.hi}")
        if int(self.n) != self.n or self.n < 1:
            raise GridError(f"need a positive integer cell count, got n={self.n}")
        object.__setattr__(self, "n", int(self.n))

    @property
    def h(self) -> float:
        return (self.hi - self.lo) / self.n

    @property
    def length(self) -> float:
        return self.hi - self.lo

    @property
    def centers(self) -> np.ndarray:
        return self.lo + (np.arange(self.n) + 0.5) * self.h

    @property
    def cell_measure(self) -> float:
        return self.h

    @property
    def shape(self) -> tuple[int]:
        return (self.n,)

    @property
    def size(self) -> int:
        return self.n


@dataclass(frozen=True)
class Grid2D:
    gx: Grid1D
    gy: Grid1D

    @property
    def cell_area(self) -> float:
        return self.gx.h * self.gy.h

    @property
    def cell_measure(self) -> float:
        return self.cell_area

    @property
    def shape(self) -> tuple[int, int]:
        return (self.gx.n, self.gy.n)

    @property
    def size(self) -> int:
        return self.gx.n * self.gy.n

    @property
    def area(self) -> float:
        return self.gx.length * self.gy.length

    def mesh(self) -> tuple[np.ndarray, np.ndarray]:
        """Cell-center coordinates as two ``(n1, n2)`` arrays."""
        return np.meshgrid(self.gx.centers, self.gy.centers, indexing="ij")


Grid = Union[Grid1D, Grid2D]


@dataclass(frozen=True, eq=False)
class Field:
    """Cell values of a piecewise constant function on ``grid``."""

    grid: Grid
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        vals = np.array(self.values, dtype=float)
        if vals.shape != self.grid.shape:
            if vals.size == self.grid.size:
                vals = vals.reshape(self.grid.shape)
            else:
                raise GridError(
                    f"field has {vals.size} values, grid has {self.grid.size} cells"
                )
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    def with_values(self, values) -> "Field":
        return Field(self.grid, values)

    def __add__(self, other):
        other = other.values if isinstance(other, Field) else other
        return Field(self.grid, self.values + other)

    def __sub__(self, other):
        other = other.values if isinstance(other, Field) else other
        return Field(self.grid, self.values - other)

    def __mul__(self, scalar):
        return Field(self.grid, self.values * scalar)

    __rmul__ = __mul__


def build_grid(lo: float, hi: float, n: int) -> Grid1D:
    return Grid1D(float(lo), float(hi), n)


def product_grid(gx: Grid1D, gy: Grid1D) -> Grid2D:
    return Grid2D(gx, gy)


def sample(grid: Grid, func) -> Field:
    """Evaluate ``func`` at cell centers (``func(x)`` or ``func(x1, x2)``)."""
    if isinstance(grid, Grid1D):
        return Field(grid, np.broadcast_to(func(grid.centers), grid.shape))
    x1, x2 = grid.mesh()
    return Field(grid, np.broadcast_to(func(x1, x2), grid.shape))


def integrate(f: Field) -> float:
    return float(np.sum(f.values) * f.grid.cell_measure)


def inner(f: Field, g: Field) -> float:
    if f.grid != g.grid:
        raise GridError("inner product of fields on different grids")
    return float(np.sum(f.values * g.values) * f.grid.cell_measure)


def lp_norm(f: Field, p: float = 2.0) -> float:
    """Discrete L^p norm; ``p = inf`` gives the max norm."""
    if p == math.inf:
        return float(np.max(np.abs(f.values)))
    if p < 1:
        raise GridError(f"L^p norm needs p >= 1, got p={p}")
    a = np.abs(f.values)
    if p == 1:
        return float(np.sum(a) * f.grid.cell_measure)
    if p == 2:
        return float(math.sqrt(np.sum(a * a) * f.grid.cell_measure))
    return float((np.sum(a**p) * f.grid.cell_measure) ** (1.0 / p))


def forward_differences(f: Field) -> tuple[np.ndarray, np.ndarray]:
    """Forward differences along both axes; the last row/column copies the
    backward difference (one-sided closure)."""
    if not isinstance(f.grid, Grid2D):
        raise GridError("forward_differences needs a 2D field")
    v = f.values
    gx, gy = f.grid.gx, f.grid.gy
    d1 = np.zeros_like(v)
    d2 = np.zeros_like(v)
    if gx.n > 1:
        d1[:-1] = (v[1:] - v[:-1]) / gx.h
        d1[-1] = d1[-2]
    if gy.n > 1:
        d2[:, :-1] = (v[:, 1:] - v[:, :-1]) / gy.h
        d2[:, -1] = d2[:, -2]
    return d1, d2


def w1p_seminorm_penalty(f: Field, p: float = 3.0) -> float:
    """Discrete ``||f||_{W^{1,p}}^p``: sum of |f|^p, |D1 f|^p, |D2 f|^p times cell area.

    Exponents ``p <= 2`` are rejected since the bilevel penalty needs the
    embedding into continuous functions on a 2D domain.
    """
    if p <= 2:
        raise GridError(f"W^(1,p) penalty needs p > 2, got p={p}")
    d1, d2 = forward_differences(f)
    total = np.sum(np.abs(f.values) ** p + np.abs(d1) ** p + np.abs(d2) ** p)
    return float(total * f.grid.cell_area)


def w1p_penalty_gradient(f: Field, p: float = 3.0) -> np.ndarray:
    """Gradient of :func:`w1p_seminorm_penalty` with respect to cell values."""
    if p <= 2:
        raise GridError(f"W^(1,p) penalty needs p > 2, got p={p}")
    v = f.values
    gx, gy = f.grid.gx, f.grid.gy
    d1, d2 = forward_differences(f)
    g = p * np.abs(v) ** (p - 1) * np.sign(v)
    w1 = p * np.abs(d1) ** (p - 1) * np.sign(d1) / gx.h
    w2 = p * np.abs(d2) ** (p - 1) * np.sign(d2) / gy.h
    if gx.n > 1:
        # d1[k] = (v[k+1]-v[k])/h for k < n-1, and d1[n-1] = d1[n-2]
        s1 = w1.copy()
        s1[-2] += s1[-1]
        g[1:] += s1[:-1]
        g[:-1] -= s1[:-1]
    if gy.n > 1:
        s2 = w2.copy()
        s2[:, -2] += s2[:, -1]
        g[:, 1:] += s2[:, :-1]
        g[:, :-1] -= s2[:, :-1]
    return g * f.grid.cell_area
