"""Grid-atomic measures, marginal projections, mollification and E/E* operators."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .grid import Field, Grid1D, Grid2D, GridError


class MeasureError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class DiscreteMeasure:
    """Nonnegative masses (not densities) attached to the cells of ``grid``."""

    grid: Grid1D
    weights: np.ndarray = field(repr=False)

    def __post_init__(self):
        w = np.array(self.weights, dtype=float).reshape(-1)
        if w.size != self.grid.n:
            raise MeasureError(f"{w.size} weights for a grid of {self.grid.n} cells")
        if not np.all(np.isfinite(w)):
            raise MeasureError("weights must be finite")
        if np.any(w < 0):
            raise MeasureError("measure weights must be nonnegative")
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)

    @property
    def total_mass(self) -> float:
        return float(np.sum(self.weights))

    def density(self) -> Field:
        return Field(self.grid, self.weights / self.grid.h)

    @classmethod
    def from_density(cls, f: Field) -> "DiscreteMeasure":
        return cls(f.grid, np.asarray(f.values) * f.grid.h)


def uniform_measure(grid: Grid1D, mass: float = 1.0) -> DiscreteMeasure:
    return DiscreteMeasure(grid, np.full(grid.n, mass / grid.n))


@dataclass(frozen=True)
class DilatedGrid:
    """``base`` enlarged by whole cells on both sides so it covers ``[lo - delta, hi + delta]``."""

    base: Grid1D
    delta: float

    def __post_init__(self):
        if not self.delta > 0:
            raise MeasureError(f"delta must be positive, got {self.delta}")

    @property
    def collar(self) -> int:
        # guard against 0.1/0.025 = 4.000000000000001
        return max(1, math.ceil(self.delta / self.base.h - 1e-9))

    @property
    def dilated(self) -> Grid1D:
        k = self.collar
        h = self.base.h
        return Grid1D(self.base.lo - k * h, self.base.hi + k * h, self.base.n + 2 * k)

    @property
    def offset(self) -> int:
        return self.collar


def dilate(grid: Grid1D, delta: float) -> Grid1D:
    return DilatedGrid(grid, delta).dilated


@dataclass(frozen=True)
class MollifierKernel:
    """Standard bump ``exp(-1/(1 - (x/delta)^2))`` sampled at multiples of ``h``.

    The samples are scaled so that their quadrature (sum times ``h``) is
    exactly one.  If ``delta < h`` only the center sample survives and the
    kernel degenerates to a discrete Dirac mass.
    """

    delta: float
    h: float

    def __post_init__(self):
        if not self.delta > 0:
            raise MeasureError(f"delta must be positive, got {self.delta}")
        if not self.h > 0:
            raise MeasureError(f"cell width must be positive, got {self.h}")

    @property
    def radius(self) -> int:
        """Largest integer offset ``m`` with ``|m h| < delta``."""
        return max(0, math.ceil(self.delta / self.h - 1e-9) - 1)

    def offsets(self) -> np.ndarray:
        r = self.radius
        return np.arange(-r, r + 1) * self.h

    def samples(self) -> np.ndarray:
        t = self.offsets() / self.delta
        raw = np.zeros_like(t)
        inside = np.abs(t) < 1
        raw[inside] = np.exp(-1.0 / (1.0 - t[inside] ** 2))
        return raw / (raw.sum() * self.h)

    def profile(self, x) -> np.ndarray:
        """Kernel evaluated at arbitrary points, with the same normalization as :meth:`samples`."""
        t = np.asarray(x, dtype=float) / self.delta
        raw = np.zeros_like(t)
        inside = np.abs(t) < 1
        raw[inside] = np.exp(-1.0 / (1.0 - t[inside] ** 2))
        u = self.offsets() / self.delta
        z = np.sum(np.exp(-1.0 / (1.0 - u**2))) * self.h
        return raw / z


def marginals(pi: Field) -> tuple[Field, Field]:
    """Densities of the two marginals of a plan density on a product grid."""
    if not isinstance(pi.grid, Grid2D):
        raise GridError("marginals need a field on a product grid")
    gx, gy = pi.grid.gx, pi.grid.gy
    return (
        Field(gx, pi.values.sum(axis=1) * gy.h),
        Field(gy, pi.values.sum(axis=0) * gx.h),
    )


def mollify_weights(weights: np.ndarray, base: Grid1D, delta: float) -> tuple[Grid1D, np.ndarray]:
    """Density of ``kernel * weights + delta/|dilated|`` on the dilated grid.

    Works on raw weight arrays so finite-difference probes may step slightly
    outside the nonnegative cone; :func:`mollify_shift` is the checked entry point.
    """
    if not delta > 0:
        raise MeasureError(f"delta must be positive, got {delta}")
    dg = DilatedGrid(base, delta)
    target = dg.dilated
    kern = MollifierKernel(delta, base.h).samples()
    r = (kern.size - 1) // 2
    conv = np.convolve(np.asarray(weights, dtype=float), kern)
    # conv[m] sits at base offset m - r; dilated index = base index + collar
    out = np.zeros(target.n)
    start = dg.offset - r
    out[start:start + conv.size] = conv
    out += delta / target.length
    return target, out


def mollify_shift(mu: DiscreteMeasure, delta: float) -> Field:
    grid, dens = mollify_weights(mu.weights, mu.grid, delta)
    return Field(grid, dens)


def _aligned_offset(inner: Grid1D, outer: Grid1D) -> int:
    if not math.isclose(inner.h, outer.h, rel_tol=1e-9):
        raise GridError(f"grids not aligned: h={inner.h} vs h={outer.h}")
    off = (inner.lo - outer.lo) / outer.h
    k = round(off)
    if abs(off - k) > 1e-6:
        raise GridError("grid cells are not aligned")
    if k < 0 or k + inner.n > outer.n:
        raise GridError("outer grid does not cover inner grid")
    return k


def extend_by_zero(f: Field, target: Grid1D | Grid2D) -> Field:
    """Copy ``f`` onto the cells of the larger grid ``target``, zero elsewhere."""
    if isinstance(f.grid, Grid2D):
        if not isinstance(target, Grid2D):
            raise GridError("target must be a product grid")
        a = _aligned_offset(f.grid.gx, target.gx)
        b = _aligned_offset(f.grid.gy, target.gy)
        out = np.zeros(target.shape)
        out[a:a + f.grid.gx.n, b:b + f.grid.gy.n] = f.values
        return Field(target, out)
    a = _aligned_offset(f.grid, target)
    out = np.zeros(target.n)
    out[a:a + f.grid.n] = f.values
    return Field(target, out)


def restrict(f: Field, target: Grid1D | Grid2D) -> Field:
    """Adjoint of :func:`extend_by_zero`: keep only the cells of ``target``."""
    if isinstance(f.grid, Grid2D):
        if not isinstance(target, Grid2D):
            raise GridError("target must be a product grid")
        a = _aligned_offset(target.gx, f.grid.gx)
        b = _aligned_offset(target.gy, f.grid.gy)
        return Field(target, f.values[a:a + target.gx.n, b:b + target.gy.n])
    a = _aligned_offset(target, f.grid)
    return Field(target, f.values[a:a + target.n])
