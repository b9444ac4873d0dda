"""Discretized function-space backbone on a 1D Dirichlet interval.

Everything downstream (state simulation, adjoint solves, Hamiltonian algebra)
lives on a uniform interior grid of the interval (0, length) with homogeneous
Dirichlet boundary conditions.  This module provides the grid, scalar fields
and two-variable kernel fields with their L2 geometry, the three-point
Laplacian, exact discrete eigenpairs (a scaled sine basis), spectral Sobolev
norms, the heat semigroup, and the diagonal-embedding operator that turns a
one-variable function into a diagonal-supported source on the square domain.

Quadrature is the nodal rectangle rule with weight ``h`` throughout, so

* the L2 inner product of fields f, g is ``h * sum(f * g)``,
* the L2 norm of a kernel K on the square is ``h * frobenius(K)``, which
  coincides with the Hilbert-Schmidt norm of the operator
  ``f -> h * K @ f``.

All types are immutable after construction; operations allocate fresh output.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy.linalg import cho_solve_banded, cholesky_banded


class GridMismatchError(ValueError):
    """Raised when an operation mixes fields living on different grids."""


@dataclass(frozen=True)
class Grid:
    """Uniform interior grid of the interval (0, length), Dirichlet boundary.

    ``n`` interior nodes at ``i * h`` for ``i = 1..n`` with ``h = length /
    (n + 1)``.  Boundary values are identically zero and never stored.
    """

    length: float
    n: int

    def __post_init__(self):
        if not self.length > 0:
            raise ValueError(f"interval length must be positive, got {self.length}")
        if self.n < 2:
            raise ValueError(f"need at least 2 interior nodes, got {self.n}")

    @property
    def h(self) -> float:
        return self.length / (self.n + 1)

    @property
    def nodes(self) -> np.ndarray:
        return self.h * np.arange(1, self.n + 1)


def _check_same_grid(a, b) -> None:
    if a.grid != b.grid:
        raise GridMismatchError(f"grids differ: {a.grid} vs {b.grid}")


def _frozen_array(values, shape) -> np.ndarray:
    arr = np.array(values, dtype=np.float64)
    if arr.shape != shape:
        raise ValueError(f"expected shape {shape}, got {arr.shape}")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class Field:
    """A function in L2 of the interval, sampled at the interior nodes."""

    values: np.ndarray
    grid: Grid

    def __post_init__(self):
        object.__setattr__(self, "values", _frozen_array(self.values, (self.grid.n,)))

    def norm(self) -> float:
        """L2 norm with quadrature weight h."""
        return math.sqrt(self.grid.h) * float(np.linalg.norm(self.values))

    def __add__(self, other: "Field") -> "Field":
        _check_same_grid(self, other)
        return Field(self.values + other.values, self.grid)

    def __sub__(self, other: "Field") -> "Field":
        _check_same_grid(self, other)
        return Field(self.values - other.values, self.grid)

    def __mul__(self, scalar: float) -> "Field":
        return Field(self.values * float(scalar), self.grid)

    __rmul__ = __mul__

    def __neg__(self) -> "Field":
        return Field(-self.values, self.grid)


@dataclass(frozen=True)
class KernelField:
    """A function on the square domain, i.e. the kernel of a Hilbert-Schmidt
    operator ``f -> integral K(., mu) f(mu) dmu`` on L2."""

    values: np.ndarray
    grid: Grid
    symmetric: bool = False

    def __post_init__(self):
        n = self.grid.n
        object.__setattr__(self, "values", _frozen_array(self.values, (n, n)))
        if self.symmetric and not np.array_equal(self.values, self.values.T):
            raise ValueError("kernel marked symmetric but values(i,j) != values(j,i)")

    def hs_norm(self) -> float:
        """L2 norm on the square = Hilbert-Schmidt norm of the operator."""
        return self.grid.h * float(np.linalg.norm(self.values))

    def __add__(self, other: "KernelField") -> "KernelField":
        _check_same_grid(self, other)
        return KernelField(self.values + other.values, self.grid,
                           symmetric=self.symmetric and other.symmetric)

    def __sub__(self, other: "KernelField") -> "KernelField":
        _check_same_grid(self, other)
        return KernelField(self.values - other.values, self.grid,
                           symmetric=self.symmetric and other.symmetric)

    def __mul__(self, scalar: float) -> "KernelField":
        return KernelField(self.values * float(scalar), self.grid,
                           symmetric=self.symmetric)

    __rmul__ = __mul__


@dataclass(frozen=True)
class SpectralBasis:
    """Exact discrete eigenpairs of the negative three-point Laplacian.

    Eigenvector k (0-based) samples sin((k+1) pi lambda / length) and is
    normalized to unit discrete L2 norm; eigenvalues are positive and
    strictly increasing, converging to ((k+1) pi / length)^2 as h -> 0.
    """

    grid: Grid
    eigenvalues: np.ndarray = field(init=False)
    vectors: np.ndarray = field(init=False)  # (n, n), column k = e_k nodal values

    def __post_init__(self):
        n, h, ell = self.grid.n, self.grid.h, self.grid.length
        k = np.arange(1, n + 1)
        lam = (4.0 / h**2) * np.sin(k * np.pi / (2 * (n + 1))) ** 2
        i = np.arange(1, n + 1)
        vec = np.sqrt(2.0 / ell) * np.sin(np.outer(i, k) * np.pi / (n + 1))
        lam.setflags(write=False)
        vec.setflags(write=False)
        object.__setattr__(self, "eigenvalues", lam)
        object.__setattr__(self, "vectors", vec)

    def mode(self, k: int) -> Field:
        """Orthonormal eigenvector k (0-based) as a Field."""
        return Field(self.vectors[:, k], self.grid)


@lru_cache(maxsize=32)
def spectral_basis(grid: Grid) -> SpectralBasis:
    return SpectralBasis(grid)


def transform(f: Field) -> np.ndarray:
    """Coefficients of f in the discrete eigenbasis (orthonormal in L2)."""
    basis = spectral_basis(f.grid)
    return f.grid.h * (basis.vectors.T @ f.values)


def inverse_transform(coeffs: np.ndarray, grid: Grid) -> Field:
    basis = spectral_basis(grid)
    return Field(basis.vectors @ np.asarray(coeffs, dtype=np.float64), grid)


# ---------------------------------------------------------------------------
# array-level kernels shared with the simulators; they act on the last axis
# so ensembles of shape (paths, n) pass through unchanged
# ---------------------------------------------------------------------------

def laplacian_array(values: np.ndarray, grid: Grid) -> np.ndarray:
    """Three-point Laplacian with zero ghost boundary nodes, along last axis."""
    if values.shape[-1] != grid.n:
        raise GridMismatchError(
            f"last axis has size {values.shape[-1]}, grid has {grid.n} nodes")
    out = -2.0 * values
    out[..., :-1] += values[..., 1:]
    out[..., 1:] += values[..., :-1]
    out /= grid.h**2
    return out


@lru_cache(maxsize=64)
def _implicit_factor(grid: Grid, dt: float):
    """Cached banded Cholesky factor of (I - dt * Laplacian)."""
    n, h = grid.n, grid.h
    ab = np.zeros((2, n))
    ab[0, 1:] = -dt / h**2
    ab[1, :] = 1.0 + 2.0 * dt / h**2
    return cholesky_banded(ab, lower=False)


def implicit_heat_solve_array(rhs: np.ndarray, grid: Grid, dt: float) -> np.ndarray:
    """Solve (I - dt * Laplacian) x = rhs along the last axis, dt > 0.

    The matrix is strictly diagonally dominant, so the banded Cholesky solve
    is unconditionally stable; residuals sit at rounding level.
    """
    if dt <= 0:
        raise ValueError(f"time step must be positive, got {dt}")
    factor = _implicit_factor(grid, dt)
    flat = np.atleast_2d(np.asarray(rhs, dtype=np.float64))
    lead = flat.shape[:-1]
    sol = cho_solve_banded((factor, False), flat.reshape(-1, grid.n).T).T
    return sol.reshape(lead + (grid.n,)) if rhs.ndim > 1 else sol[0]


def heat_semigroup_array(r: float, values: np.ndarray, grid: Grid) -> np.ndarray:
    """Apply exp(r * Laplacian) spectrally along the last axis, r >= 0."""
    if r < 0:
        raise ValueError(f"semigroup time must be nonnegative, got {r}")
    basis = spectral_basis(grid)
    coeffs = grid.h * (values @ basis.vectors)
    coeffs *= np.exp(-basis.eigenvalues * r)
    return coeffs @ basis.vectors.T


# ---------------------------------------------------------------------------
# Field-level operations
# ---------------------------------------------------------------------------

def laplacian_apply(f: Field) -> Field:
    return Field(laplacian_array(f.values, f.grid), f.grid)


def implicit_heat_solve(rhs: Field, dt: float) -> Field:
    return Field(implicit_heat_solve_array(rhs.values, rhs.grid, dt), rhs.grid)


def heat_semigroup(r: float, f: Field) -> Field:
    return Field(heat_semigroup_array(r, f.values, f.grid), f.grid)


def sobolev_norm(f: Field, gamma: float) -> float:
    """Spectral Sobolev norm (sum_k lambda_k^gamma fhat_k^2)^(1/2).

    Supported orders: -1, 0, 1, and the fractional band (0, 1/4) used for
    terminal-regularity estimates.
    """
    if not (gamma in (-1.0, 0.0, 1.0) or 0.0 < gamma < 0.25):
        raise ValueError(f"unsupported Sobolev order {gamma}")
    lam = spectral_basis(f.grid).eigenvalues
    coeffs = transform(f)
    return math.sqrt(float(np.sum(lam**gamma * coeffs**2)))


def dual_pairing(f: Field, g: Field) -> float:
    """Nodal quadrature pairing h * sum f g.

    Coincides with the L2 inner product; when f is the Laplacian of an H1
    field and g is in H1, it realizes the duality pairing between H^-1 and
    H^1_0 on the grid.
    """
    _check_same_grid(f, g)
    return f.grid.h * float(np.dot(f.values, g.values))


def delta_star(f: Field) -> KernelField:
    """Diagonal-supported kernel source: values(i,i) = f(i)/h, zero elsewhere.

    Chosen so that the kernel pairing of delta_star(f) with any kernel w
    equals h * sum_i f(i) w(i,i), the quadrature of the integral of
    f(lambda) w(lambda, lambda).
    """
    return KernelField(np.diag(f.values / f.grid.h), f.grid, symmetric=True)


def delta_star_array(diag_values: np.ndarray, grid: Grid) -> np.ndarray:
    """Array form of delta_star: (..., n) -> (..., n, n) diagonal kernels."""
    lead = diag_values.shape[:-1]
    out = np.zeros(lead + (grid.n, grid.n))
    idx = np.arange(grid.n)
    out[..., idx, idx] = diag_values / grid.h
    return out


def kernel_pairing(a: KernelField, b: KernelField) -> float:
    """L2 inner product on the square domain, quadrature weight h^2."""
    _check_same_grid(a, b)
    return a.grid.h**2 * float(np.sum(a.values * b.values))


def smoothing_constant(grid: Grid, r: float) -> float:
    """Best constant C(r) with |S_r f|_{H1} <= C(r) |f|_{L2} on the grid."""
    lam = spectral_basis(grid).eigenvalues
    return float(np.max(np.sqrt(lam) * np.exp(-lam * r)))
