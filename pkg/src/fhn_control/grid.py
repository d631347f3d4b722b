"""Spatial discretization: uniform Neumann grids, weighted inner products,
and the shared cosine eigenbasis.

Conventions
-----------
A field is a plain ``numpy`` array of shape ``grid.shape`` (one value per
node).  The product state ``X = (v, w)`` pairs two such fields.  All L2
pairings use trapezoid quadrature, whose end-node half-weights make the
reflected-ghost Laplacian stencil exactly self-adjoint; the duality and
gradient machinery downstream relies on that exactness.

The grid covers ``[0, ell]^d`` with ``n`` nodes per axis, so the cosine
modes ``cos(k pi xi / ell)`` sampled at the nodes are exact eigenvectors
of the discrete Laplacian and are exactly orthogonal under the trapezoid
weights for per-axis frequencies up to ``n - 2``.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.fft import dctn, idctn

from .errors import ConfigurationError, ContractViolation

Field = np.ndarray


@dataclass(frozen=True)
class Grid:
    """Uniform tensor grid on ``[0, ell]^d`` with Neumann boundaries."""

    d: int
    n: int
    ell: float = 1.0

    def __post_init__(self):
        if self.d not in (1, 2):
            raise ConfigurationError(f"dimension must be 1 or 2, got {self.d}")
        if self.n < 3:
            raise ConfigurationError(f"need at least 3 nodes per axis, got {self.n}")
        if self.ell <= 0:
            raise ConfigurationError(f"edge length must be positive, got {self.ell}")

    @property
    def h(self) -> float:
        return self.ell / (self.n - 1)

    @property
    def shape(self) -> tuple:
        return (self.n,) * self.d

    @property
    def num_nodes(self) -> int:
        return self.n**self.d

    def axis_coords(self) -> np.ndarray:
        return np.linspace(0.0, self.ell, self.n)

    def weights(self) -> np.ndarray:
        """Trapezoid quadrature weights, one per node; sums to ``ell**d``."""
        return _weights(self)

    def zeros(self) -> Field:
        return np.zeros(self.shape)

    def constant(self, c: float) -> Field:
        return np.full(self.shape, float(c))

    def max_mode_freq(self) -> int:
        # per-axis cosine frequencies above n - 2 lose exact trapezoid
        # orthogonality (Nyquist), so the usable truncation stops there
        return self.n - 2


@dataclass
class StateX:
    """Product state (v, w): voltage and recovery fields on one grid."""

    v: Field
    w: Field

    def __post_init__(self):
        if self.v.shape != self.w.shape:
            raise ContractViolation(
                f"v and w live on different grids: {self.v.shape} vs {self.w.shape}"
            )

    def copy(self) -> "StateX":
        return StateX(self.v.copy(), self.w.copy())

    def __add__(self, other: "StateX") -> "StateX":
        return StateX(self.v + other.v, self.w + other.w)

    def __sub__(self, other: "StateX") -> "StateX":
        return StateX(self.v - other.v, self.w - other.w)

    def __mul__(self, c: float) -> "StateX":
        return StateX(c * self.v, c * self.w)

    __rmul__ = __mul__

    @staticmethod
    def zero(grid: Grid) -> "StateX":
        return StateX(grid.zeros(), grid.zeros())


@lru_cache(maxsize=None)
def _weights(grid: Grid) -> np.ndarray:
    w1 = np.full(grid.n, grid.h)
    w1[0] *= 0.5
    w1[-1] *= 0.5
    w = w1
    for _ in range(grid.d - 1):
        w = np.multiply.outer(w, w1)
    return w


def _check_field(grid: Grid, u: Field) -> None:
    if u.shape != grid.shape:
        raise ContractViolation(f"field shape {u.shape} does not match grid {grid.shape}")


def inner_l2(grid: Grid, a: Field, b: Field) -> float:
    """Trapezoid L2 pairing of two fields."""
    _check_field(grid, a)
    _check_field(grid, b)
    return float(np.sum(_weights(grid) * a * b))


def norm_l2_sq(grid: Grid, a: Field) -> float:
    return inner_l2(grid, a, a)


def inner_h(grid: Grid, gamma: float, X: StateX, Y: StateX) -> float:
    """Weighted product-space pairing: gamma*<v,v'>_2 + <w,w'>_2."""
    if gamma <= 0:
        raise ConfigurationError(f"gamma must be positive, got {gamma}")
    return gamma * inner_l2(grid, X.v, Y.v) + inner_l2(grid, X.w, Y.w)


def norm_h_sq(grid: Grid, gamma: float, X: StateX) -> float:
    return inner_h(grid, gamma, X, X)


def grad_norm_sq(grid: Grid, u: Field) -> float:
    """Squared L2 norm of the one-sided discrete gradient (link-based)."""
    _check_field(grid, u)
    h = grid.h
    total = 0.0
    # each link carries measure h * (transverse trapezoid weights)
    w1 = np.full(grid.n, h)
    w1[0] *= 0.5
    w1[-1] *= 0.5
    for axis in range(grid.d):
        diff = np.diff(u, axis=axis) / h
        if grid.d == 1:
            total += float(np.sum(diff**2) * h)
        else:
            trans = w1[np.newaxis, :] if axis == 0 else w1[:, np.newaxis]
            total += float(np.sum(diff**2 * trans) * h)
    return total


def norm_v_sq(grid: Grid, gamma: float, X: StateX) -> float:
    """Energy norm: gamma*(|v|_2^2 + |grad v|_2^2) + |w|_2^2."""
    if gamma <= 0:
        raise ConfigurationError(f"gamma must be positive, got {gamma}")
    return gamma * (norm_l2_sq(grid, X.v) + grad_norm_sq(grid, X.v)) + norm_l2_sq(grid, X.w)


def neumann_laplacian(grid: Grid, u: Field) -> Field:
    """Second-difference Laplacian with ghost-node reflection.

    The reflection u[-1] = u[1] enforces a zero normal derivative and
    keeps the stencil symmetric under the trapezoid weights.
    """
    _check_field(grid, u)
    h2 = grid.h**2
    out = np.zeros_like(u)
    padded = np.pad(u, 1, mode="reflect")
    if grid.d == 1:
        out = (padded[2:] - 2.0 * u + padded[:-2]) / h2
    else:
        out = (padded[2:, 1:-1] - 2.0 * u + padded[:-2, 1:-1]) / h2
        out += (padded[1:-1, 2:] - 2.0 * u + padded[1:-1, :-2]) / h2
    return out


def mode_frequencies(grid: Grid, K: int) -> list:
    """Per-axis cosine frequencies of the first K global modes.

    Modes are ordered by total frequency, then lexicographically, so the
    first mode is the constant.  Raises if K exceeds the exactly
    orthogonal truncation of the grid.
    """
    kmax = grid.max_mode_freq()
    if K < 1 or K > (kmax + 1) ** grid.d:
        raise ContractViolation(
            f"truncation K={K} outside valid range [1, {(kmax + 1) ** grid.d}] "
            f"for n={grid.n}, d={grid.d}"
        )
    combos = sorted(
        itertools.product(range(kmax + 1), repeat=grid.d),
        key=lambda t: (sum(t), t),
    )
    return combos[:K]


def _axis_mode(grid: Grid, k: int) -> np.ndarray:
    xi = grid.axis_coords()
    if k == 0:
        return np.full(grid.n, 1.0 / np.sqrt(grid.ell))
    return np.sqrt(2.0 / grid.ell) * np.cos(k * np.pi * xi / grid.ell)


def neumann_eigenmode(grid: Grid, k: int) -> Field:
    """k-th L2-normalized cosine eigenmode (1-based; k=1 is constant)."""
    freqs = mode_frequencies(grid, k)
    combo = freqs[k - 1]
    mode = _axis_mode(grid, combo[0])
    for kk in combo[1:]:
        mode = np.multiply.outer(mode, _axis_mode(grid, kk))
    return mode


def mode_eigenvalue(grid: Grid, k: int) -> float:
    """Discrete Laplacian eigenvalue of global mode k (1-based)."""
    combo = mode_frequencies(grid, k)[k - 1]
    h = grid.h
    return float(
        sum(-(2.0 / h**2) * (1.0 - np.cos(kk * np.pi * h / grid.ell)) for kk in combo)
    )


@lru_cache(maxsize=None)
def eigenmode_matrix(grid: Grid, K: int) -> np.ndarray:
    """Columns are the first K eigenmodes, flattened; shape (num_nodes, K)."""
    return np.column_stack(
        [neumann_eigenmode(grid, k).ravel() for k in range(1, K + 1)]
    )


def mode_coefficients(grid: Grid, K: int, u: Field) -> np.ndarray:
    """Trapezoid-quadrature projections <u, e_k>_2 for k = 1..K."""
    _check_field(grid, u)
    E = eigenmode_matrix(grid, K)
    return E.T @ (_weights(grid) * u).ravel()


def synthesize(grid: Grid, K: int, coeffs: np.ndarray) -> Field:
    """Rebuild a field from its leading K mode coefficients."""
    E = eigenmode_matrix(grid, K)
    return (E @ coeffs).reshape(grid.shape)


@lru_cache(maxsize=None)
def _dct_symbol(grid: Grid) -> np.ndarray:
    """Laplacian eigenvalues over the full DCT-I spectrum of the grid."""
    h = grid.h
    mu1 = -(2.0 / h**2) * (1.0 - np.cos(np.arange(grid.n) * np.pi * h / grid.ell))
    mu = mu1
    for _ in range(grid.d - 1):
        mu = np.add.outer(mu, mu1)
    return mu


def helmholtz_solve(grid: Grid, c: float, dt: float, rhs: Field) -> Field:
    """Solve (c*I - dt*Lap_h) x = rhs exactly via the cosine transform.

    The reflected stencil diagonalizes on the DCT-I basis, so this is the
    exact inverse of the symmetric positive definite operator (c > 0,
    dt >= 0), up to roundoff.  Leading axes of ``rhs`` are treated as a
    batch; the solve acts on the trailing grid axes.
    """
    if rhs.shape[-grid.d :] != grid.shape:
        raise ContractViolation(
            f"field shape {rhs.shape} does not match grid {grid.shape}"
        )
    if c <= 0:
        raise ConfigurationError(f"Helmholtz coefficient must be positive, got {c}")
    axes = tuple(range(rhs.ndim - grid.d, rhs.ndim))
    coeffs = dctn(rhs, type=1, axes=axes)
    coeffs /= c - dt * _dct_symbol(grid)
    out = idctn(coeffs, type=1, axes=axes)
    if not np.all(np.isfinite(out)):
        raise FloatingPointError("Helmholtz solve produced non-finite values")
    return out
