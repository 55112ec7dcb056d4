import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from diffapprox.errors import ConfigurationError, EvaluationError, ParseError
from diffapprox.functions import (
    CoefficientSet,
    boundedness_lint,
    multiplier_matrix,
    nemytskii_apply,
    nemytskii_spectral,
    parse_expr,
    partial_derivative,
    split_additive,
    zero_fn,
)
from diffapprox.spectral import OperatorSpec, to_grid

SMOOTH = [
    "sin(u) + 0.5*cos(v)",
    "u*tanh(v)",
    "atan(u*v) - exp_neg_sq(u - v)",
    "cos(u)*sin(v)/2 + tanh(u)",
    "-(u*v)/2",
    "3*v - 2.5e-1*u*u",
]


def test_parse_examples():
    assert parse_expr("sin(u) + 0.5*cos(v)")(0.0, 0.0) == 0.5
    assert parse_expr("-(u*v)/2")(2.0, 3.0) == -3.0
    assert parse_expr("2 - 3 - 4")(0, 0) == -5.0
    assert parse_expr("8 / 4 / 2")(0, 0) == 1.0
    assert parse_expr("-2*3 + 1e1")(0, 0) == 4.0


@pytest.mark.parametrize(
    "text,offset",
    [("sin(u", 5), ("u +", 3), ("w + 1", 0), ("foo(u)", 0), ("u $ v", 2), ("(u", 2), ("u v", 2)],
)
def test_parse_errors_carry_offset(text, offset):
    with pytest.raises(ParseError) as info:
        parse_expr(text)
    assert info.value.position == offset


def test_arity_and_empty():
    with pytest.raises(ParseError, match="1 argument"):
        parse_expr("sin(u, v)")
    with pytest.raises(ParseError):
        parse_expr("   ")


def test_eval_examples():
    assert zero_fn()(3.0, -7.0) == 0.0
    assert parse_expr("tanh(v)")(5.0, 0.0) == 0.0
    mpmath.mp.dps = 40
    oracle = mpmath.atan(1) + mpmath.tanh(1)
    assert parse_expr("atan(u)+tanh(v)")(1.0, 1.0) == pytest.approx(float(oracle), rel=1e-15)


def test_division_by_zero_reports_location():
    fn = parse_expr("1 + u/v")
    with pytest.raises(EvaluationError) as info:
        fn(1.0, 0.0)
    assert info.value.position == 5
    with pytest.raises(EvaluationError):
        fn(np.ones(3), np.array([1.0, 0.0, 2.0]))


def test_vectorized_broadcast():
    fn = parse_expr("cos(v)")
    out = fn(np.zeros((2, 3)), np.zeros((2, 3)))
    assert out.shape == (2, 3)
    assert np.all(out == 1.0)
    assert parse_expr("2")(np.zeros(4), np.zeros(4)).shape == (4,)


def test_symbolic_derivative_examples():
    d = parse_expr("sin(u)").differentiate("u")
    assert d.pretty() == "cos(u)"
    assert parse_expr("u").differentiate("v").is_zero
    fn = parse_expr("u*tanh(v)")
    h = 1e-6
    fd = (fn(2 + h, 0.5) - fn(2 - h, 0.5)) / (2 * h)
    assert fn.differentiate("u")(2.0, 0.5) == pytest.approx(fd, rel=1e-8)


@pytest.mark.parametrize("text", SMOOTH)
def test_derivatives_against_central_differences(text):
    fn = parse_expr(text)
    rng = np.random.default_rng(5)
    pts = rng.uniform(-2, 2, size=(50, 2))
    h = 1e-5
    for var, e in (("u", (h, 0)), ("v", (0, h))):
        d = fn.differentiate(var)
        for u, v in pts:
            fd = (fn(u + e[0], v + e[1]) - fn(u - e[0], v - e[1])) / (2 * h)
            assert d(u, v) == pytest.approx(fd, rel=1e-6, abs=1e-8)


def test_second_and_higher_order_partials():
    fn = parse_expr("sin(u)*cos(v)")
    u, v = 0.3, -0.7
    assert partial_derivative(fn, 0, 2)(u, v) == pytest.approx(-np.sin(u) * np.cos(v), rel=1e-12)
    assert partial_derivative(fn, 1, 1)(u, v) == pytest.approx(-np.cos(u) * np.sin(v), rel=1e-12)
    assert partial_derivative(fn, 2, 1)(u, v) == pytest.approx(np.sin(u) * np.sin(v), rel=1e-6)
    assert partial_derivative(fn, 0, 4)(u, v) == pytest.approx(np.sin(u) * np.cos(v), rel=1e-3)
    with pytest.raises(ConfigurationError):
        partial_derivative(fn, 3, 2)


@pytest.mark.parametrize("text", SMOOTH + ["1/(2 + cos(u))", "-(-(u))"])
def test_pretty_print_round_trip(text):
    fn = parse_expr(text)
    back = parse_expr(fn.pretty())
    rng = np.random.default_rng(6)
    pts = rng.uniform(-3, 3, size=(100, 2))
    assert np.allclose(fn(pts[:, 0], pts[:, 1]), back(pts[:, 0], pts[:, 1]), rtol=1e-12, atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.floats(-1e3, 1e3), st.floats(-1e3, 1e3))
def test_bounded_catalog_stays_finite(u, v):
    fn = parse_expr("sin(u)*cos(v) + tanh(u - v) + atan(u*v) + exp_neg_sq(v)")
    assert np.isfinite(fn(u, v))
    assert abs(fn(u, v)) <= 1 + 1 + np.pi / 2 + 1


def test_boundedness_lint_examples():
    assert boundedness_lint(parse_expr("tanh(u)+cos(v)")) == []
    warn = boundedness_lint(parse_expr("v"))
    assert len(warn) == 1 and "unbounded in v" in warn[0]
    warn = boundedness_lint(parse_expr("u*tanh(v)"))
    assert len(warn) == 1 and "unbounded in u" in warn[0]
    assert boundedness_lint(parse_expr("0*v + sin(v)")) == []
    assert any("denominator" in w for w in boundedness_lint(parse_expr("1/cos(u)")))


def test_coefficient_set_and_linear_detection():
    cs = CoefficientSet.from_strings(b="0.5*v", g="-v")
    assert cs.as_strings() == {"f": "0", "b": "0.5*v", "g": "-v", "sigma": "0"}
    assert cs.g.linear_coefficient("v") == -1.0
    assert cs.b.linear_coefficient("v") == 0.5
    assert parse_expr("v + 1").linear_coefficient("v") is None
    assert parse_expr("u*v").linear_coefficient("v") is None
    assert parse_expr("sin(v)").linear_coefficient("v") is None
    lint = cs.lint()
    assert lint["f"] == [] and lint["b"]


def test_split_additive_parts_sum_to_whole():
    fn = parse_expr("cos(v) + tanh(u) - u*sin(v) + 3 - v")
    free, only, mixed = split_additive(fn)
    assert not free.depends_on("v")
    assert only.depends_on("v") and not only.depends_on("u")
    assert mixed.depends_on("u") and mixed.depends_on("v")
    rng = np.random.default_rng(7)
    u, v = rng.normal(size=(2, 50))
    assert np.allclose(free(u, v) + only(u, v) + mixed(u, v), fn(u, v), atol=1e-14)


def test_nemytskii_examples():
    op = OperatorSpec(np.pi, 4, n_grid=32)
    rng = np.random.default_rng(8)
    X = to_grid(op.field(rng.normal(size=4)))
    Y = to_grid(op.field(rng.normal(size=4)))
    ones = nemytskii_apply(parse_expr("1"), X, Y)
    assert np.array_equal(ones.values, np.ones(32))
    assert np.array_equal(nemytskii_apply(parse_expr("v"), X, Y).values, Y.values)
    e1 = to_grid(op.unit(1))
    got = nemytskii_apply(parse_expr("sin(u)"), e1, Y).values
    xi = op.grid_points()
    oracle = np.sin(np.sqrt(2 / np.pi) * np.sin(xi))
    assert np.max(np.abs(got - oracle)) < 1e-12
    with pytest.raises(ConfigurationError):
        nemytskii_apply(parse_expr("u"), X, to_grid(op.zeros(), 64))


def test_nemytskii_is_pointwise():
    op = OperatorSpec(np.pi, 4, n_grid=16)
    rng = np.random.default_rng(9)
    X = to_grid(op.field(rng.normal(size=4)))
    Y = to_grid(op.field(rng.normal(size=4)))
    fn = parse_expr("sin(u)*tanh(v)")
    full = nemytskii_apply(fn, X, Y).values
    perm = rng.permutation(16)
    from diffapprox.spectral import GridField

    permuted = nemytskii_apply(fn, GridField(X.values[perm], X.length), GridField(Y.values[perm], Y.length))
    assert np.array_equal(permuted.values, full[perm])


def test_multiplier_matrix_constant_is_scaled_identity():
    op = OperatorSpec(np.pi, 6, n_grid=24)
    M = multiplier_matrix(np.full(24, 0.3), op)
    assert np.allclose(M, 0.3 * np.eye(6), atol=1e-12)
    # a multiplier matrix acts like the spectral projection of the product
    rng = np.random.default_rng(10)
    s = rng.normal(size=24)
    z = rng.normal(size=6)
    direct = op.to_spectral_array(s * op.to_grid_array(z))
    assert np.allclose(multiplier_matrix(s, op) @ z, direct, atol=1e-12)


def test_nemytskii_spectral_zero_shortcut():
    op = OperatorSpec(np.pi, 4)
    X = np.ones((3, 4))
    assert np.array_equal(nemytskii_spectral(zero_fn(), op, X, X), np.zeros((3, 4)))
