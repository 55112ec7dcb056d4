"""Dirichlet sine eigenbasis on (0, L) and the diagonal operator A.

Everything here works on coefficient vectors in the basis
``e_k(xi) = sqrt(2/L) sin(k pi xi / L)``.  Batched variants operate on
arrays whose last axis is the mode index, which is what the integrators use.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .errors import ConfigurationError, DomainError


@dataclass(frozen=True, eq=False)
class OperatorSpec:
    """Diagonal operator ``A e_k = -alpha_k e_k`` truncated to ``n_modes``.

    With no explicit ``eigenvalues`` the Dirichlet Laplacian spectrum
    ``alpha_k = (k pi / L)^2`` is used.
    """

    domain_length: float
    n_modes: int
    eigenvalues: np.ndarray | None = None
    n_grid: int | None = None

    def __post_init__(self):
        if not self.domain_length > 0:
            raise ConfigurationError("domain_length must be positive")
        if int(self.n_modes) < 1:
            raise ConfigurationError("n_modes must be a positive integer")
        object.__setattr__(self, "n_modes", int(self.n_modes))
        if self.eigenvalues is None:
            k = np.arange(1, self.n_modes + 1)
            alpha = (k * np.pi / self.domain_length) ** 2
        else:
            alpha = np.asarray(self.eigenvalues, dtype=float).copy()
            if alpha.shape != (self.n_modes,):
                raise ConfigurationError(
                    f"expected {self.n_modes} eigenvalues, got shape {alpha.shape}"
                )
            if np.any(alpha <= 0) or not np.all(np.isfinite(alpha)):
                raise ConfigurationError("eigenvalues must be positive and finite")
            if np.any(np.diff(alpha) < 0):
                raise ConfigurationError("eigenvalues must be non-decreasing")
        alpha.setflags(write=False)
        object.__setattr__(self, "eigenvalues", alpha)
        n_grid = 4 * self.n_modes if self.n_grid is None else int(self.n_grid)
        if n_grid < self.n_modes:
            raise ConfigurationError(
                f"n_grid={n_grid} < n_modes={self.n_modes} would alias modes"
            )
        object.__setattr__(self, "n_grid", n_grid)

    @property
    def alpha(self) -> np.ndarray:
        return self.eigenvalues

    def grid_points(self, n_grid: int | None = None) -> np.ndarray:
        n = self.n_grid if n_grid is None else n_grid
        return np.arange(1, n + 1) * self.domain_length / (n + 1)

    def quadrature_weight(self, n_grid: int | None = None) -> float:
        n = self.n_grid if n_grid is None else n_grid
        return self.domain_length / (n + 1)

    @cached_property
    def synthesis_matrix(self) -> np.ndarray:
        """``S[j, k] = e_k(xi_j)`` on the default grid, shape (n_grid, n_modes)."""
        return _synthesis(self.domain_length, self.n_modes, self.n_grid)

    @cached_property
    def analysis_matrix(self) -> np.ndarray:
        """Quadrature projection, shape (n_grid, n_modes); coeffs = values @ analysis."""
        return self.quadrature_weight() * self.synthesis_matrix

    # batched transforms -------------------------------------------------

    def to_grid_array(self, coeffs: np.ndarray) -> np.ndarray:
        return coeffs @ self.synthesis_matrix.T

    def to_spectral_array(self, values: np.ndarray) -> np.ndarray:
        return values @ self.analysis_matrix

    def semigroup_factor(self, t: float) -> np.ndarray:
        return np.exp(-self.alpha * t)

    def phi1(self, t: float) -> np.ndarray:
        """Per-mode ``(1 - exp(-alpha t)) / (alpha t)``; equals 1 at t = 0."""
        if t == 0:
            return np.ones(self.n_modes)
        x = self.alpha * t
        return -np.expm1(-x) / x

    def convolution_variance(self, lam: np.ndarray, t: float) -> np.ndarray:
        """Variance of ``int_0^t e^{(t-s)A} dW_s`` per mode for a Q-Wiener W."""
        return np.asarray(lam) * (-np.expm1(-2.0 * self.alpha * t)) / (2.0 * self.alpha)

    def field(self, coeffs) -> "SpectralField":
        return SpectralField(np.asarray(coeffs, dtype=float), self)

    def zeros(self) -> "SpectralField":
        return SpectralField(np.zeros(self.n_modes), self)

    def unit(self, k: int) -> "SpectralField":
        """Basis vector e_k (1-based)."""
        c = np.zeros(self.n_modes)
        c[k - 1] = 1.0
        return SpectralField(c, self)


def _synthesis(length: float, n_modes: int, n_grid: int) -> np.ndarray:
    xi = np.arange(1, n_grid + 1) * length / (n_grid + 1)
    k = np.arange(1, n_modes + 1)
    return np.sqrt(2.0 / length) * np.sin(np.outer(xi, k) * np.pi / length)


@dataclass(frozen=True, eq=False)
class SpectralField:
    coeffs: np.ndarray
    op: OperatorSpec = field(repr=False)

    def __post_init__(self):
        c = np.array(self.coeffs, dtype=float)
        if c.shape != (self.op.n_modes,):
            raise ConfigurationError(
                f"coefficient vector has shape {c.shape}, expected ({self.op.n_modes},)"
            )
        if not np.all(np.isfinite(c)):
            raise DomainError("spectral coefficients must be finite")
        c.setflags(write=False)
        object.__setattr__(self, "coeffs", c)

    def norm(self) -> float:
        return float(np.linalg.norm(self.coeffs))

    def __add__(self, other):
        return SpectralField(self.coeffs + other.coeffs, self.op)

    def __sub__(self, other):
        return SpectralField(self.coeffs - other.coeffs, self.op)

    def __mul__(self, scalar):
        return SpectralField(self.coeffs * float(scalar), self.op)

    __rmul__ = __mul__

    def __neg__(self):
        return SpectralField(-self.coeffs, self.op)


@dataclass(frozen=True, eq=False)
class GridField:
    values: np.ndarray
    length: float

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        if v.ndim != 1:
            raise ConfigurationError("grid values must be one-dimensional")
        if not np.all(np.isfinite(v)):
            raise DomainError("grid values must be finite")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def n_grid(self) -> int:
        return self.values.size

    @property
    def points(self) -> np.ndarray:
        n = self.n_grid
        return np.arange(1, n + 1) * self.length / (n + 1)

    def lp_norm(self, p: float = 2.0) -> float:
        """Discrete L^p(0, L) norm (interior-point rectangle rule)."""
        w = self.length / (self.n_grid + 1)
        if np.isinf(p):
            return float(np.max(np.abs(self.values)))
        return float((w * np.sum(np.abs(self.values) ** p)) ** (1.0 / p))


def basis_eval(k: int, xi, length: float):
    """Value of the k-th orthonormal sine mode at ``xi`` in (0, L)."""
    xi_arr = np.asarray(xi, dtype=float)
    if k < 1:
        raise DomainError(f"mode index must be >= 1, got {k}")
    if np.any(xi_arr <= 0) or np.any(xi_arr >= length):
        raise DomainError(f"xi must lie in the open interval (0, {length})")
    out = np.sqrt(2.0 / length) * np.sin(k * np.pi * xi_arr / length)
    return float(out) if out.ndim == 0 else out


def apply_A(x: SpectralField) -> SpectralField:
    return SpectralField(-x.op.alpha * x.coeffs, x.op)


def apply_semigroup(x: SpectralField, t: float) -> SpectralField:
    if t < 0:
        raise DomainError(f"semigroup time must be non-negative, got {t}")
    return SpectralField(x.op.semigroup_factor(t) * x.coeffs, x.op)


def _check_theta(theta):
    if not 0.0 <= theta <= 1.0:
        raise DomainError(f"fractional exponent must lie in [0, 1], got {theta}")


def apply_fractional_power(x: SpectralField, theta: float) -> SpectralField:
    _check_theta(theta)
    return SpectralField(x.op.alpha**theta * x.coeffs, x.op)


def sobolev_norm(x: SpectralField, theta: float) -> float:
    """``||(-A)^theta x||``, the graph norm of D((-A)^theta)."""
    _check_theta(theta)
    return float(np.sqrt(np.sum(x.op.alpha ** (2 * theta) * x.coeffs**2)))


def to_grid(x: SpectralField, n_grid: int | None = None) -> GridField:
    op = x.op
    n = op.n_grid if n_grid is None else int(n_grid)
    if n < op.n_modes:
        raise ConfigurationError(f"n_grid={n} < n_modes={op.n_modes} would alias modes")
    S = op.synthesis_matrix if n == op.n_grid else _synthesis(op.domain_length, op.n_modes, n)
    return GridField(S @ x.coeffs, op.domain_length)


def to_spectral(g: GridField, op: OperatorSpec) -> SpectralField:
    """Discrete sine projection of grid values onto the first ``n_modes`` modes."""
    if abs(g.length - op.domain_length) > 1e-12 * op.domain_length:
        raise ConfigurationError("grid and operator use different domain lengths")
    n = g.n_grid
    if n < op.n_modes:
        raise ConfigurationError(f"n_grid={n} < n_modes={op.n_modes} would alias modes")
    if n == op.n_grid:
        A = op.analysis_matrix
    else:
        A = op.quadrature_weight(n) * _synthesis(op.domain_length, op.n_modes, n)
    return SpectralField(g.values @ A, op)


def project_function(fn, op: OperatorSpec, n_grid: int | None = None) -> SpectralField:
    """Project a vectorised callable of xi onto the basis via the grid."""
    n = op.n_grid if n_grid is None else n_grid
    xi = op.grid_points(n)
    values = np.broadcast_to(np.asarray(fn(xi), dtype=float), xi.shape)
    return to_spectral(GridField(values, op.domain_length), op)
