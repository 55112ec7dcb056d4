import warnings

import numpy as np
import pytest
from scipy import integrate, linalg, stats

from diffapprox.errors import CenteringError, ConfigurationError, PSDError
from diffapprox.functions import CoefficientSet, multiplier_matrix, parse_expr
from diffapprox.homogenize import (
    FrozenModel,
    InvariantSamplerConfig,
    LowAccuracyWarning,
    PoissonConfig,
    PoissonTailWarning,
    _poisson_integrals,
    b_observable,
    check_centering,
    check_poisson_residual,
    closed_form_centering,
    cholesky_root,
    estimate_BtensorPsi,
    estimate_drift_correction,
    estimate_Fbar,
    estimate_homogenized,
    estimate_invariant_expectation,
    estimate_SigmaBarSq,
    gaussian_grid_variance,
    poisson_surrogate,
    psd_sqrt,
    sample_invariant,
    solve_poisson,
    state_hash,
    upsilon_from,
)
from diffapprox.noise import NoiseSpec
from diffapprox.spectral import OperatorSpec

BETA, C = 0.5, 1.0
OP = OperatorSpec(np.pi, 4)
NOISE2 = NoiseSpec.from_rule(1.0, 2.0, 4, "W2")
LAM = NOISE2.eigenvalues
SAMPLER = InvariantSamplerConfig(n_samples=300, thinning=0.5, n_paths=64)
Y_TEST = np.array([1.5, -1.2, 1.8, -1.1])


def model(**coeffs):
    base = {"b": f"{BETA}*v", "g": f"-{C}*v"}
    base.update(coeffs)
    return FrozenModel(OP, CoefficientSet.from_strings(**base), NOISE2)


@pytest.fixture(scope="module")
def linear():
    m = model()
    return m, sample_invariant(m, OP.unit(1), SAMPLER, 1)


def stationary_var():
    return LAM / (2 * (OP.alpha + C))


def psi_exact(y):
    return BETA * np.asarray(y) / (C + OP.alpha)


# ---------------------------------------------------------------- invariant law


def test_constant_observable_has_zero_stderr(linear):
    m, s = linear
    mean, se = estimate_invariant_expectation(m, OP.unit(1), lambda Y: np.ones(len(Y)), SAMPLER, 1, s)
    assert mean == 1.0 and se == 0.0


def test_invariant_mean_and_covariance(linear):
    m, s = linear
    mean, se = estimate_invariant_expectation(m, OP.unit(1), lambda Y: Y, SAMPLER, 1, s, warn=False)
    assert np.all(np.abs(mean) <= 3 * se)
    var, _ = estimate_invariant_expectation(m, OP.unit(1), lambda Y: Y**2, SAMPLER, 1, s)
    assert np.allclose(var, stationary_var(), rtol=0.03)


def test_low_accuracy_warning(linear):
    m, s = linear
    with pytest.warns(LowAccuracyWarning):
        estimate_invariant_expectation(m, OP.unit(1), lambda Y: Y[:, 0] + 1e-4, SAMPLER, 1, s)


def test_dissipativity_and_sampler_validation():
    unstable = model(g="2*v")
    assert unstable.margin == pytest.approx(-1.0)
    with pytest.raises(ConfigurationError, match="dissipative"):
        sample_invariant(unstable, OP.unit(1), SAMPLER, 1)
    with pytest.raises(ConfigurationError):
        sample_invariant(model(), OP.unit(1), InvariantSamplerConfig(n_paths=1), 1)
    with pytest.raises(ConfigurationError):
        PoissonConfig(fd_step=0.5).validate()
    assert InvariantSamplerConfig().resolved_burn_in(OperatorSpec(2 * np.pi, 2)) == pytest.approx(20.0)
    assert PoissonConfig().resolved_T_cut(model()) == pytest.approx(4.0)


# ---------------------------------------------------------------- averaged coefficients


def test_Fbar_independent_of_v_is_exact():
    m = model(f="tanh(u) + 0.5")
    x = OP.field([1.0, 0.5, 0.0, -0.2])
    value, se = estimate_Fbar(m, x, SAMPLER, 1)
    direct = OP.to_spectral_array(np.tanh(OP.to_grid_array(x.coeffs)) + 0.5)
    assert np.array_equal(value.coeffs, direct)
    assert np.all(se == 0)


def test_Fbar_cos_matches_gaussian_characteristic_function(linear):
    _, s = linear
    m = model(f="cos(v)")
    value, se = estimate_Fbar(m, OP.unit(1), SAMPLER, 1, s)
    # Y(xi) is centered Gaussian with variance sum_k e_k(xi)^2 Var(y_k)
    grid_var = (OP.synthesis_matrix**2) @ stationary_var()
    oracle = OP.to_spectral_array(np.exp(-grid_var / 2))
    assert np.all(np.abs(value.coeffs - oracle) <= 3 * se + 2e-3 * np.abs(oracle))
    assert np.allclose(gaussian_grid_variance(m), grid_var, rtol=1e-14)


def test_Fbar_odd_observable_vanishes(linear):
    _, s = linear
    # the estimate is pure noise around zero, so the relative-accuracy warning is expected
    with pytest.warns(LowAccuracyWarning):
        value, se = estimate_Fbar(model(f="v"), OP.unit(1), SAMPLER, 1, s)
    assert np.all(np.abs(value.coeffs) <= 3 * se)


def test_SigmaBarSq_constant_and_zero():
    M, se = estimate_SigmaBarSq(model(sigma="1"), OP.unit(1), SAMPLER, 1)
    assert np.max(np.abs(M - np.eye(4))) < 1e-8
    M0, _ = estimate_SigmaBarSq(model(sigma="0"), OP.unit(1), SAMPLER, 1)
    assert np.all(M0 == 0)


def test_SigmaBarSq_against_gaussian_quadrature(linear):
    _, s = linear
    M, se = estimate_SigmaBarSq(model(sigma="tanh(v)+2"), OP.unit(1), SAMPLER, 1, s)
    assert np.allclose(M, M.T)
    assert np.linalg.eigvalsh(M).min() >= -1e-10
    grid_var = (OP.synthesis_matrix**2) @ stationary_var()

    def mean_sq(v):
        sd = np.sqrt(v)
        return integrate.quad(lambda z: (np.tanh(sd * z) + 2) ** 2 * stats.norm.pdf(z), -12, 12)[0]

    h = np.array([mean_sq(v) for v in grid_var])
    oracle = multiplier_matrix(h, OP)
    d = np.diag(M)
    assert np.all(np.abs(d - np.diag(oracle)) <= 3 * np.diag(se) + 1e-3 * np.diag(oracle))


# ---------------------------------------------------------------- centering


@pytest.mark.parametrize("b", ["v", "sin(v)", "0.5*v - tanh(v)"])
def test_centering_passes_for_odd_b(linear, b):
    m, s = linear
    assert check_centering(model(b=b), OP.unit(1), parse_expr(b), SAMPLER, 1, s).passed
    assert closed_form_centering(model(b=b), OP.unit(1), parse_expr(b)).passed


def test_centering_fails_for_cos_with_gaussian_residual(linear):
    _, s = linear
    m = model(b="cos(v)")
    res = check_centering(m, OP.unit(1), parse_expr("cos(v)"), SAMPLER, 1, s)
    assert not res.passed
    exact = closed_form_centering(m, OP.unit(1), parse_expr("cos(v)"))
    assert not exact.passed
    grid_var = (OP.synthesis_matrix**2) @ stationary_var()
    assert np.allclose(exact.residual, OP.to_spectral_array(np.exp(-grid_var / 2)), rtol=1e-12)
    assert np.all(np.abs(res.residual - exact.residual) <= 3 * res.stderr + 2e-3)


def test_centering_zero_function_and_nonlinear_fallback():
    res = check_centering(model(b="0"), OP.unit(1), parse_expr("0"), SAMPLER, 1)
    assert res.passed and np.all(res.residual == 0)
    assert closed_form_centering(model(g="-v - 0.2*sin(v)"), OP.unit(1), parse_expr("v")) is None


# ---------------------------------------------------------------- Poisson equation


def test_poisson_linear_resolvent_two_routes():
    m = model()
    phi = b_observable(m)
    y = OP.field(Y_TEST)
    oracle = psi_exact(Y_TEST)
    # route 1: noise-free frozen flow, the ensemble mean is deterministic
    quiet = FrozenModel(OP, m.coeffs, NoiseSpec.explicit(np.zeros(4), "W2"))
    det = solve_poisson(quiet, OP.unit(1), y, phi, PoissonConfig(n_paths=2), 0)
    assert np.allclose(det.value, oracle, rtol=2e-3)
    # route 2: full Monte Carlo with noise
    mc = solve_poisson(m, OP.unit(1), y, phi, PoissonConfig(n_paths=2000), 3)
    assert np.all(np.abs(mc.value - oracle) <= 3 * mc.stderr + mc.tail_bound + 2e-3 * np.abs(oracle))


def test_poisson_zero_observable():
    m = model(b="0")
    res = solve_poisson(m, OP.unit(1), OP.field(Y_TEST), lambda X, Y: np.zeros_like(Y), PoissonConfig(n_paths=4), 0)
    assert np.all(res.value == 0) and np.all(res.tail_bound == 0)


def test_poisson_doubling_cutoff_within_tail_bound():
    m = FrozenModel(OP, model().coeffs, NoiseSpec.explicit(np.zeros(4), "W2"))
    phi = b_observable(m)
    y = OP.field(Y_TEST)
    short = solve_poisson(m, OP.unit(1), y, phi, PoissonConfig(T_cut=4.0, n_time_nodes=2001, n_paths=2), 0)
    long = solve_poisson(m, OP.unit(1), y, phi, PoissonConfig(T_cut=8.0, n_time_nodes=4001, n_paths=2), 0)
    assert np.all(np.abs(long.value - short.value) <= short.tail_bound)


def test_poisson_short_cutoff_warns():
    m = model()
    with pytest.warns(PoissonTailWarning):
        solve_poisson(m, OP.unit(1), OP.field(Y_TEST), b_observable(m), PoissonConfig(T_cut=0.3, n_paths=50), 0)


def test_poisson_rejects_uncentered_observable():
    m = model(b="cos(v)")
    with pytest.raises(CenteringError) as info:
        solve_poisson(m, OP.unit(1), OP.field(Y_TEST), b_observable(m), PoissonConfig(n_paths=10), 0,
                      sampler=SAMPLER, centering_fn=m.coeffs.b)
    assert info.value.residual[0] > 0


def test_poisson_solution_is_centered(linear):
    m, s = linear
    ys = s[:, ::30].reshape(-1, 4)  # 640 invariant draws
    P = 4
    starts = np.repeat(ys, P, axis=0)
    xs = np.broadcast_to(OP.unit(1).coeffs, starts.shape)
    vals, _ = _poisson_integrals(m, xs, starts, b_observable(m), 4.0, 801, 9, np.arange(len(starts)))
    per_draw = vals.reshape(len(ys), P, 4).mean(axis=1)
    mean = per_draw.mean(axis=0)
    se = per_draw.std(axis=0, ddof=1) / np.sqrt(len(ys))
    assert np.all(np.abs(mean) <= 3 * se)


def test_poisson_residual_analytic_and_perturbed():
    m = model()
    x = OP.unit(1)
    phi_val = BETA * Y_TEST
    assert check_poisson_residual(m, x, Y_TEST, psi_exact, phi_val) < 1e-6
    # adding y_1 e_1 to the solution changes L_2 Psi by -(alpha_1 + c) y_1 e_1
    e1 = np.eye(4)[0]
    bumped = check_poisson_residual(m, x, Y_TEST, lambda y: psi_exact(y) + y[0] * e1, phi_val)
    expected = (OP.alpha[0] + C) * abs(Y_TEST[0]) / np.linalg.norm(phi_val)
    assert bumped == pytest.approx(expected, rel=1e-6)
    assert check_poisson_residual(m, x, Y_TEST, lambda y: np.zeros(4), np.zeros(4)) == 0.0


def test_poisson_residual_of_monte_carlo_surrogate():
    m = model()
    sur = poisson_surrogate(m, OP.unit(1), b_observable(m), InvariantSamplerConfig(n_samples=20, n_paths=8),
                            PoissonConfig(n_time_nodes=801, n_paths=100), 5)
    assert np.allclose(sur.matrix, np.diag(BETA / (C + OP.alpha)), atol=0.02)
    assert check_poisson_residual(m, OP.unit(1), Y_TEST, sur, BETA * Y_TEST) < 0.1


# ---------------------------------------------------------------- B (x) Psi and Upsilon


def test_BtensorPsi_linear_closed_form(linear):
    m, s = linear
    cfg = PoissonConfig(T_cut=4.0, n_time_nodes=801, n_paths=1)
    est = estimate_BtensorPsi(m, OP.unit(1), SAMPLER, cfg, 2, s)
    oracle = BETA**2 * LAM / (2 * (C + OP.alpha) ** 2)
    d = np.diag(est.M)
    assert np.all(np.abs(d - oracle) <= 3 * np.diag(est.stderr) + 0.01 * oracle)
    off = est.M - np.diag(d)
    assert np.all(np.abs(off) <= 4 * est.stderr + 1e-12)
    ups, clip = upsilon_from(np.diag(oracle))
    assert np.allclose(np.diag(ups), BETA * np.sqrt(LAM) / (C + OP.alpha), rtol=1e-12)
    assert clip == 0.0


def test_BtensorPsi_zero_b():
    est = estimate_BtensorPsi(model(b="0"), OP.unit(1), SAMPLER, PoissonConfig(), 0)
    assert np.all(est.M == 0)
    ups, _ = upsilon_from(est.M)
    assert np.all(ups == 0)


def test_BtensorPsi_replications_consistent_with_stderr():
    m = model()
    inv = InvariantSamplerConfig(n_samples=40, thinning=0.5, n_paths=16)
    cfg = PoissonConfig(T_cut=4.0, n_time_nodes=401, n_paths=1)
    reps = [estimate_BtensorPsi(m, OP.unit(1), inv, cfg, 100 + r) for r in range(4)]
    d = np.array([np.diag(r.M) for r in reps])
    se = np.array([np.diag(r.stderr) for r in reps])
    chi2 = float(np.sum((d - d.mean(axis=0)) ** 2 / np.mean(se**2, axis=0)))
    dof = 3 * 4
    assert stats.chi2.ppf(0.0005, dof) < chi2 < stats.chi2.ppf(0.9995, dof)


def test_psd_sqrt_reconstruction_and_clipping():
    rng = np.random.default_rng(0)
    for _ in range(20):
        A = rng.normal(size=(5, 5))
        M = A @ A.T + 0.3 * (A - A.T)  # non-symmetric with PSD symmetric part
        ups, clip = upsilon_from(M)
        assert np.linalg.norm(0.5 * ups @ ups.T - 0.5 * (M + M.T)) <= 1e-10 + clip
        assert np.allclose(ups, ups.T)
    S = np.diag([1.0, 0.5, -1e-10])
    R, clip = psd_sqrt(S)
    assert clip == pytest.approx(1e-10)
    assert np.linalg.norm(R @ R.T - S) <= 1e-10 + clip
    with pytest.raises(PSDError) as info:
        psd_sqrt(np.diag([1.0, -0.1]), stderr=np.full((2, 2), 0.01))
    assert info.value.min_eigenvalue == pytest.approx(-0.1)
    L = cholesky_root(np.diag([4.0, 1.0, 0.0]))
    assert np.allclose(L @ L.T, np.diag([4.0, 1.0, 0.0]), atol=1e-10)


# ---------------------------------------------------------------- drift correction


def test_drift_correction_vanishes_without_u_pathway(linear):
    m, s = linear
    corr, se = estimate_drift_correction(m, OP.unit(1), SAMPLER, PoissonConfig(n_time_nodes=201, n_paths=1), 4,
                                         s[:8, :20])
    assert np.all(corr.coeffs == 0)
    zero, _ = estimate_drift_correction(model(b="0"), OP.unit(1), SAMPLER, PoissonConfig(), 4)
    assert np.all(zero.coeffs == 0)


def test_drift_correction_cost_guard(linear):
    m, s = linear
    with pytest.raises(ConfigurationError, match="budget"):
        estimate_drift_correction(m, OP.unit(1), SAMPLER, PoissonConfig(n_paths=10, max_solves=1000), 4, s)


def test_drift_correction_against_dense_finite_differences():
    c0, c1, beta = 1.0, 0.5, 1.0
    op = OperatorSpec(np.pi, 2)
    noise = NoiseSpec.from_rule(1.0, 2.0, 2, "W2")
    coeffs = CoefficientSet.from_strings(b=f"{beta}*v", g=f"-({c0} + {c1}*tanh(u))*v")
    m = FrozenModel(op, coeffs, noise)
    x = op.field([1.0, 0.3])

    # the frozen flow is linear: dY = -K(x) Y dt + dW with K = diag(alpha) + [c(x(xi)) .]
    def K(xc):
        cvals = c0 + c1 * np.tanh(op.to_grid_array(xc))
        return np.diag(op.alpha) + multiplier_matrix(cvals, op)

    def psi(xc, y):
        return beta * np.linalg.solve(K(xc), y)

    def directional(y, h=1e-5):
        d = beta * y
        return (psi(x.coeffs + h * d, y) - psi(x.coeffs - h * d, y)) / (2 * h)

    cov = linalg.solve_continuous_lyapunov(-K(x.coeffs), -np.diag(noise.eigenvalues))
    w, V = np.linalg.eigh(cov)
    # the integrand is a homogeneous quadratic in y, so its Gaussian mean is sum_m w_m F(v_m)
    oracle = sum(w[i] * directional(V[:, i]) for i in range(2))

    inv = InvariantSamplerConfig(n_samples=200, thinning=0.5, n_paths=32)
    corr, se = estimate_drift_correction(m, x, inv, PoissonConfig(n_time_nodes=1601, n_paths=1), 6)
    assert np.all(np.abs(corr.coeffs - oracle) <= 3 * se + 0.02 * np.abs(oracle))
    assert np.linalg.norm(oracle) > 5 * np.linalg.norm(se)


# ---------------------------------------------------------------- bundle


def test_estimate_homogenized_bundle_and_records():
    m = model(f="cos(v)", sigma="0.2")
    inv = InvariantSamplerConfig(n_samples=30, thinning=0.5, n_paths=16)
    pois = PoissonConfig(T_cut=4.0, n_time_nodes=201, n_paths=1)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", LowAccuracyWarning)
        h = estimate_homogenized(m, OP.unit(1), inv, pois, 7)
    assert np.allclose(h.SigmaBarSq, 0.04 * np.eye(4), atol=1e-10)
    assert np.all(h.DriftCorrection == 0)
    assert np.linalg.norm(0.5 * h.Upsilon @ h.Upsilon.T - 0.5 * (h.BtensorPsi + h.BtensorPsi.T)) <= 1e-10 + h.clip_mass
    recs = h.to_records(OP.unit(1).coeffs, {"seed": 7})
    assert [r["coefficient"] for r in recs] == ["Fbar", "SigmaBarSq", "DriftCorrection", "BtensorPsi", "Upsilon"]
    assert recs[0]["state_hash"] == state_hash(OP.unit(1))
    with pytest.raises(CenteringError):
        estimate_homogenized(model(b="cos(v)"), OP.unit(1), inv, pois, 7)
