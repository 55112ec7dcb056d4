import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.fft import dst
from scipy.integrate import simpson

from diffapprox.errors import ConfigurationError, DomainError
from diffapprox.spectral import (
    GridField,
    OperatorSpec,
    SpectralField,
    apply_A,
    apply_fractional_power,
    apply_semigroup,
    basis_eval,
    project_function,
    sobolev_norm,
    to_grid,
    to_spectral,
)

coeff_lists = st.lists(st.floats(-5, 5, allow_nan=False), min_size=8, max_size=8)


def test_basis_midpoint_values():
    assert basis_eval(1, np.pi / 2, np.pi) == pytest.approx(np.sqrt(2 / np.pi), abs=1e-15)
    assert basis_eval(2, 1.5, 3.0) == pytest.approx(0.0, abs=1e-15)


def test_basis_rejects_points_outside_interval():
    for xi in (0.0, np.pi, -1.0, 4.0):
        with pytest.raises(DomainError):
            basis_eval(1, xi, np.pi)


def test_gram_matrix_by_simpson_quadrature():
    L = 2.5
    xi = np.linspace(0, L, 20001)
    inner = xi[1:-1]
    vals = np.zeros((16, xi.size))
    for k in range(1, 17):
        vals[k - 1, 1:-1] = basis_eval(k, inner, L)
    gram = np.array([[simpson(vals[i] * vals[j], x=xi) for j in range(16)] for i in range(16)])
    assert np.max(np.abs(gram - np.eye(16))) < 1e-10


def test_default_spectrum_and_explicit_eigenvalues():
    op = OperatorSpec(np.pi, 5)
    assert np.allclose(op.alpha, np.arange(1, 6) ** 2)
    op2 = OperatorSpec(1.0, 3, eigenvalues=[1.0, 1.0, 4.0])
    assert np.array_equal(op2.alpha, [1.0, 1.0, 4.0])
    with pytest.raises(ConfigurationError):
        OperatorSpec(1.0, 3, eigenvalues=[1.0, 0.5, 4.0])
    with pytest.raises(ConfigurationError):
        OperatorSpec(1.0, 2, eigenvalues=[0.0, 1.0])
    with pytest.raises(ConfigurationError):
        OperatorSpec(-1.0, 2)


def test_spectral_field_invariants():
    op = OperatorSpec(np.pi, 4)
    with pytest.raises(ConfigurationError):
        SpectralField(np.zeros(3), op)
    with pytest.raises(DomainError):
        SpectralField(np.array([0.0, np.nan, 0.0, 0.0]), op)


def test_apply_A_examples():
    op = OperatorSpec(np.pi, 4)
    assert np.array_equal(apply_A(op.unit(1)).coeffs, [-1.0, 0, 0, 0])
    assert np.array_equal(apply_A(op.zeros()).coeffs, np.zeros(4))
    assert np.array_equal(apply_A(op.unit(3)).coeffs, [0, 0, -9.0, 0])


@settings(max_examples=50, deadline=None)
@given(coeff_lists, st.floats(0, 2), st.floats(0, 2))
def test_semigroup_law_and_contraction(c, s, t):
    op = OperatorSpec(np.pi, 8)
    x = op.field(c)
    lhs = apply_semigroup(apply_semigroup(x, s), t).coeffs
    rhs = apply_semigroup(x, s + t).coeffs
    assert np.max(np.abs(lhs - rhs)) <= 1e-12 * max(1.0, np.max(np.abs(c)))
    assert apply_semigroup(x, t).norm() <= np.exp(-op.alpha[0] * t) * x.norm() * (1 + 1e-14) + 1e-300


def test_semigroup_identity_and_negative_time():
    op = OperatorSpec(np.pi, 4)
    x = op.field([1.0, -2.0, 3.0, 0.5])
    assert np.array_equal(apply_semigroup(x, 0.0).coeffs, x.coeffs)
    with pytest.raises(DomainError):
        apply_semigroup(x, -0.1)


def test_smoothing_bound_per_mode_oracle():
    op = OperatorSpec(np.pi, 16)
    rng = np.random.default_rng(1)
    gamma = 0.25
    for t in (0.01, 0.1, 1.0):
        x = op.field(rng.normal(size=16))
        lhs = sobolev_norm(apply_semigroup(x, t), gamma)
        C = np.max((op.alpha * t) ** gamma * np.exp(-op.alpha * t / 2))
        assert lhs <= C * t**-gamma * np.exp(-op.alpha[0] * t / 2) * x.norm() * (1 + 1e-12)


@settings(max_examples=50, deadline=None)
@given(coeff_lists, st.floats(0, 1), st.floats(0, 1))
def test_fractional_power_additivity(c, a, b):
    op = OperatorSpec(np.pi, 8)
    x = op.field(c)
    if a + b <= 1:
        lhs = apply_fractional_power(apply_fractional_power(x, a), b).coeffs
        rhs = apply_fractional_power(x, a + b).coeffs
        assert np.allclose(lhs, rhs, rtol=1e-12, atol=1e-12)


def test_fractional_power_examples():
    op = OperatorSpec(np.pi, 6)
    x = op.field(np.arange(1.0, 7.0))
    assert np.array_equal(apply_fractional_power(x, 0).coeffs, x.coeffs)
    assert np.allclose(apply_fractional_power(x, 1).coeffs, -apply_A(x).coeffs, rtol=1e-15)
    twice = apply_fractional_power(apply_fractional_power(x, 0.5), 0.5)
    assert np.max(np.abs(twice.coeffs + apply_A(x).coeffs)) < 1e-12 * np.max(np.abs(apply_A(x).coeffs))
    for bad in (-0.1, 1.1):
        with pytest.raises(DomainError):
            apply_fractional_power(x, bad)


def test_sobolev_norm_examples():
    op = OperatorSpec(np.pi, 8)
    rng = np.random.default_rng(2)
    c = rng.normal(size=8)
    x = op.field(c)
    assert sobolev_norm(x, 0) == pytest.approx(np.linalg.norm(c), rel=1e-14)
    assert sobolev_norm(op.unit(1), 0.5) == pytest.approx(1.0)
    brute = np.sqrt(sum((k**2) ** (2 * 0.3) * c[k - 1] ** 2 for k in range(1, 9)))
    assert sobolev_norm(x, 0.3) == pytest.approx(brute, rel=1e-13)


def test_transform_matches_scipy_dst():
    L, n, N = 2.0, 16, 64
    op = OperatorSpec(L, n, n_grid=N)
    rng = np.random.default_rng(3)
    c = rng.normal(size=n)
    g = to_grid(op.field(c))
    # DST-I of the zero-padded coefficient vector gives sum_k c_k sin(k pi j/(N+1))
    padded = np.zeros(N)
    padded[:n] = c
    oracle = np.sqrt(2 / L) * dst(padded, type=1) / 2
    assert np.max(np.abs(g.values - oracle)) < 1e-12


def test_round_trip_exact():
    op = OperatorSpec(np.pi, 16, n_grid=64)
    rng = np.random.default_rng(4)
    for _ in range(10):
        c = rng.normal(size=16)
        back = to_spectral(to_grid(op.field(c)), op).coeffs
        assert np.max(np.abs(back - c)) < 1e-10
    # the transform pair is exact even at the minimal resolution
    op_min = OperatorSpec(1.3, 7, n_grid=7)
    c = rng.normal(size=7)
    assert np.max(np.abs(to_spectral(to_grid(op_min.field(c)), op_min).coeffs - c)) < 1e-10


def test_single_mode_and_zero_grid():
    op = OperatorSpec(np.pi, 4)
    g = to_grid(op.unit(1))
    xi = op.grid_points()
    assert np.allclose(g.values, np.sqrt(2 / np.pi) * np.sin(xi), atol=1e-15)
    assert np.array_equal(to_spectral(g, op).coeffs.round(12), [1.0, 0, 0, 0])
    assert np.array_equal(to_grid(op.zeros()).values, np.zeros(op.n_grid))


def test_aliasing_rejected():
    op = OperatorSpec(np.pi, 8)
    with pytest.raises(ConfigurationError):
        to_grid(op.unit(1), 4)
    with pytest.raises(ConfigurationError):
        OperatorSpec(np.pi, 8, n_grid=5)
    with pytest.raises(ConfigurationError):
        to_spectral(GridField(np.ones(4), np.pi), op)


def test_project_constant_function_sine_coefficients():
    L = np.pi
    op = OperatorSpec(L, 6, n_grid=4096)
    c = project_function(lambda xi: np.ones_like(xi), op).coeffs
    k = np.arange(1, 7)
    exact = np.sqrt(2 / L) * L * (1 - np.cos(k * np.pi)) / (k * np.pi)
    assert np.allclose(c, exact, atol=2e-3)


def test_grid_lp_norm():
    op = OperatorSpec(np.pi, 4, n_grid=2000)
    g = to_grid(op.unit(1), 2000)
    assert g.lp_norm(2) == pytest.approx(1.0, rel=1e-6)
    assert g.lp_norm(np.inf) == pytest.approx(np.sqrt(2 / np.pi), rel=1e-6)
