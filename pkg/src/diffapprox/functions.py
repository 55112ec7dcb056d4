"""Coefficient expressions: parsing, evaluation, differentiation, Nemytskii maps.

Grammar::

    expr   := term (('+' | '-') term)*
    term   := factor (('*' | '/') factor)*
    factor := '-' factor | NUMBER | VAR | IDENT '(' expr ')' | '(' expr ')'

Variables default to ``u`` (slow) and ``v`` (fast).  The function catalog is
limited to primitives with bounded derivatives of every order.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, EvaluationError, ParseError
from .spectral import GridField, OperatorSpec

FUNCTIONS = ("sin", "cos", "tanh", "atan", "exp_neg_sq")

_NP_FUNCS = {
    "sin": np.sin,
    "cos": np.cos,
    "tanh": np.tanh,
    "atan": np.arctan,
    "exp_neg_sq": lambda t: np.exp(-np.square(t)),
}


# --------------------------------------------------------------------------
# expression tree


@dataclass(frozen=True)
class Node:
    pos: int = field(default=-1, compare=False)


@dataclass(frozen=True)
class Const(Node):
    value: float = 0.0


@dataclass(frozen=True)
class Var(Node):
    name: str = "u"


@dataclass(frozen=True)
class Neg(Node):
    arg: Node = None


@dataclass(frozen=True)
class BinOp(Node):
    op: str = "+"
    left: Node = None
    right: Node = None


@dataclass(frozen=True)
class Call(Node):
    name: str = "sin"
    arg: Node = None


# smart constructors with light constant folding


def const(value) -> Const:
    return Const(value=float(value))


def _is_const(n, value=None):
    return isinstance(n, Const) and (value is None or n.value == value)


def neg(a: Node) -> Node:
    if isinstance(a, Const):
        return const(-a.value)
    if isinstance(a, Neg):
        return a.arg
    return Neg(arg=a, pos=a.pos)


def add(a: Node, b: Node) -> Node:
    if _is_const(a, 0.0):
        return b
    if _is_const(b, 0.0):
        return a
    if _is_const(a) and _is_const(b):
        return const(a.value + b.value)
    return BinOp(op="+", left=a, right=b)


def sub(a: Node, b: Node) -> Node:
    if _is_const(b, 0.0):
        return a
    if _is_const(a, 0.0):
        return neg(b)
    if _is_const(a) and _is_const(b):
        return const(a.value - b.value)
    return BinOp(op="-", left=a, right=b)


def mul(a: Node, b: Node) -> Node:
    if _is_const(a, 0.0) or _is_const(b, 0.0):
        return const(0.0)
    if _is_const(a, 1.0):
        return b
    if _is_const(b, 1.0):
        return a
    if _is_const(a) and _is_const(b):
        return const(a.value * b.value)
    return BinOp(op="*", left=a, right=b)


def div(a: Node, b: Node, pos: int = -1) -> Node:
    if _is_const(a, 0.0) and not _is_const(b, 0.0):
        return const(0.0)
    if _is_const(b, 1.0):
        return a
    return BinOp(op="/", left=a, right=b, pos=pos)


def call(name: str, arg: Node) -> Node:
    return Call(name=name, arg=arg, pos=arg.pos)


# --------------------------------------------------------------------------
# parser

_TOKEN = re.compile(
    r"\s*(?:(?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)|(?P<ident>[A-Za-z_][A-Za-z0-9_]*)|(?P<op>[-+*/(),]))"
)


def _tokenize(text):
    tokens = []
    i = 0
    n = len(text)
    while i < n:
        if text[i].isspace():
            i += 1
            continue
        m = _TOKEN.match(text, i)
        if not m or m.end() == i:
            raise ParseError(f"unexpected character {text[i]!r}", i)
        start = m.start(m.lastgroup)
        tokens.append((m.lastgroup, m.group(m.lastgroup), start))
        i = m.end()
    tokens.append(("eof", "", n))
    return tokens


class _Parser:
    def __init__(self, text, variables):
        self.tokens = _tokenize(text)
        self.i = 0
        self.variables = variables

    def peek(self):
        return self.tokens[self.i]

    def take(self):
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def expect(self, value):
        kind, text, pos = self.peek()
        if text != value or kind == "eof":
            found = "end of input" if kind == "eof" else repr(text)
            raise ParseError(f"expected {value!r}, found {found}", pos)
        return self.take()

    def parse(self):
        node = self.expr()
        kind, text, pos = self.peek()
        if kind != "eof":
            raise ParseError(f"unexpected token {text!r}", pos)
        return node

    def expr(self):
        node = self.term()
        while self.peek()[1] in ("+", "-") and self.peek()[0] == "op":
            _, op, pos = self.take()
            rhs = self.term()
            node = BinOp(op=op, left=node, right=rhs, pos=pos)
        return node

    def term(self):
        node = self.factor()
        while self.peek()[1] in ("*", "/") and self.peek()[0] == "op":
            _, op, pos = self.take()
            rhs = self.factor()
            node = BinOp(op=op, left=node, right=rhs, pos=pos)
        return node

    def factor(self):
        kind, text, pos = self.peek()
        if kind == "op" and text == "-":
            self.take()
            return Neg(arg=self.factor(), pos=pos)
        if kind == "num":
            self.take()
            return Const(value=float(text), pos=pos)
        if kind == "ident":
            self.take()
            if self.peek()[1] == "(":
                return self.call(text, pos)
            if text in self.variables:
                return Var(name=text, pos=pos)
            raise ParseError(f"unknown identifier {text!r}", pos)
        if kind == "op" and text == "(":
            self.take()
            node = self.expr()
            self.expect(")")
            return node
        found = "end of input" if kind == "eof" else repr(text)
        raise ParseError(f"unexpected {found}", pos)

    def call(self, name, pos):
        if name not in FUNCTIONS:
            raise ParseError(f"unknown function {name!r}", pos)
        self.expect("(")
        args = [self.expr()]
        while self.peek()[1] == ",":
            self.take()
            args.append(self.expr())
        self.expect(")")
        if len(args) != 1:
            raise ParseError(f"{name} takes 1 argument, got {len(args)}", pos)
        return Call(name=name, arg=args[0], pos=pos)


# --------------------------------------------------------------------------
# evaluation, printing, differentiation


def _evaluate(node, env):
    if isinstance(node, Const):
        return node.value
    if isinstance(node, Var):
        return env[node.name]
    if isinstance(node, Neg):
        return -_evaluate(node.arg, env)
    if isinstance(node, Call):
        return _NP_FUNCS[node.name](_evaluate(node.arg, env))
    a = _evaluate(node.left, env)
    b = _evaluate(node.right, env)
    if node.op == "+":
        return a + b
    if node.op == "-":
        return a - b
    if node.op == "*":
        return a * b
    if np.any(np.asarray(b) == 0):
        raise EvaluationError("division by zero", node.pos)
    return a / b


def _format(node):
    if isinstance(node, Const):
        r = repr(node.value)
        return f"({r})" if node.value < 0 or r.startswith("-") else r
    if isinstance(node, Var):
        return node.name
    if isinstance(node, Neg):
        return f"(-{_format(node.arg)})"
    if isinstance(node, Call):
        return f"{node.name}({_format(node.arg)})"
    return f"({_format(node.left)} {node.op} {_format(node.right)})"


def _derive(node, var):
    if isinstance(node, Const):
        return const(0.0)
    if isinstance(node, Var):
        return const(1.0 if node.name == var else 0.0)
    if isinstance(node, Neg):
        return neg(_derive(node.arg, var))
    if isinstance(node, Call):
        a = node.arg
        da = _derive(a, var)
        if _is_const(da, 0.0):
            return const(0.0)
        if node.name == "sin":
            outer = call("cos", a)
        elif node.name == "cos":
            outer = neg(call("sin", a))
        elif node.name == "tanh":
            outer = sub(const(1.0), mul(call("tanh", a), call("tanh", a)))
        elif node.name == "atan":
            outer = div(const(1.0), add(const(1.0), mul(a, a)))
        else:  # exp_neg_sq
            outer = mul(mul(const(-2.0), a), call("exp_neg_sq", a))
        return mul(outer, da)
    a, b = node.left, node.right
    da, db = _derive(a, var), _derive(b, var)
    if node.op == "+":
        return add(da, db)
    if node.op == "-":
        return sub(da, db)
    if node.op == "*":
        return add(mul(da, b), mul(a, db))
    # quotient rule
    num = sub(mul(da, b), mul(a, db))
    return div(num, mul(b, b), pos=node.pos)


def _simplify(node):
    """Rebuild bottom-up through the folding constructors."""
    if isinstance(node, (Const, Var)):
        return node
    if isinstance(node, Neg):
        return neg(_simplify(node.arg))
    if isinstance(node, Call):
        arg = _simplify(node.arg)
        if isinstance(arg, Const):
            return const(float(_NP_FUNCS[node.name](arg.value)))
        return Call(name=node.name, arg=arg, pos=node.pos)
    a, b = _simplify(node.left), _simplify(node.right)
    if node.op == "+":
        return add(a, b)
    if node.op == "-":
        return sub(a, b)
    if node.op == "*":
        return mul(a, b)
    if isinstance(a, Const) and isinstance(b, Const) and b.value != 0:
        return const(a.value / b.value)
    return div(a, b, pos=node.pos)


def _contains_var(node, name=None):
    if isinstance(node, Var):
        return name is None or node.name == name
    if isinstance(node, Const):
        return False
    if isinstance(node, (Neg, Call)):
        return _contains_var(node.arg, name)
    return _contains_var(node.left, name) or _contains_var(node.right, name)


@dataclass(frozen=True, eq=False)
class ScalarFn:
    """Immutable parsed expression of the variables in ``variables``."""

    ast: Node
    source: str
    variables: tuple = ("u", "v")

    def __call__(self, *args):
        return self.eval(*args)

    def eval(self, *args):
        if len(args) != len(self.variables):
            raise ConfigurationError(
                f"expression of {self.variables} called with {len(args)} arguments"
            )
        env = dict(zip(self.variables, args))
        out = _evaluate(self.ast, env)
        if any(isinstance(a, np.ndarray) for a in args):
            shape = np.broadcast_shapes(*(np.shape(a) for a in args))
            return np.broadcast_to(np.asarray(out, dtype=float), shape)
        return float(out)

    def pretty(self) -> str:
        return _format(self.ast)

    def __str__(self):
        return self.source

    def differentiate(self, var: str) -> "ScalarFn":
        if var not in self.variables:
            raise ConfigurationError(f"unknown variable {var!r}")
        d = _simplify(_derive(self.ast, var))
        return ScalarFn(d, f"d/d{var}[{self.source}]", self.variables)

    @property
    def is_constant(self) -> bool:
        return not _contains_var(self.ast)

    @property
    def is_zero(self) -> bool:
        return self.is_constant and self.constant_value == 0.0

    @property
    def constant_value(self) -> float:
        if not self.is_constant:
            raise ConfigurationError(f"{self.source!r} is not constant")
        return float(_evaluate(_simplify(self.ast), {}))

    def depends_on(self, var: str) -> bool:
        return _contains_var(self.ast, var)

    def linear_coefficient(self, var: str = "v"):
        """Return ``beta`` if the expression is exactly ``beta * var``, else None."""
        others = [w for w in self.variables if w != var]
        if any(self.depends_on(w) for w in others):
            return None
        d = self.differentiate(var)
        if not d.is_constant:
            return None
        zero = {w: 0.0 for w in self.variables}
        if float(_evaluate(self.ast, zero)) != 0.0:
            return None
        return d.constant_value


def parse_expr(text: str, variables=("u", "v")) -> ScalarFn:
    if not isinstance(text, str) or not text.strip():
        raise ParseError("empty expression", 0)
    ast = _Parser(text, tuple(variables)).parse()
    return ScalarFn(ast, text, tuple(variables))


def zero_fn(variables=("u", "v")) -> ScalarFn:
    return ScalarFn(const(0.0), "0", tuple(variables))


def _additive_terms(node, sign=1.0):
    if isinstance(node, BinOp) and node.op in "+-":
        right_sign = sign if node.op == "+" else -sign
        return _additive_terms(node.left, sign) + _additive_terms(node.right, right_sign)
    if isinstance(node, Neg):
        return _additive_terms(node.arg, -sign)
    return [(sign, node)]


def split_additive(fn: ScalarFn, var: str = "v"):
    """Split ``fn`` into (terms free of ``var``, terms in ``var`` only, remaining terms).

    Each part is a ScalarFn (possibly the zero function).
    """
    other = [w for w in fn.variables if w != var]
    groups = {"free": const(0.0), "only": const(0.0), "mixed": const(0.0)}
    for sign, term in _additive_terms(fn.ast):
        has_var = _contains_var(term, var)
        has_other = any(_contains_var(term, w) for w in other)
        key = "mixed" if has_var and has_other else ("only" if has_var else "free")
        groups[key] = add(groups[key], term) if sign > 0 else sub(groups[key], term)
    return tuple(ScalarFn(groups[k], _format(groups[k]), fn.variables) for k in ("free", "only", "mixed"))


def differentiate(fn: ScalarFn, var: str) -> ScalarFn:
    return fn.differentiate(var)


def partial_derivative(fn: ScalarFn, u_order: int, v_order: int, fd_step: float = 1e-4):
    """Mixed partial derivative as a callable of (u, v).

    Orders up to two are symbolic; higher orders apply central differences
    to a symbolic second derivative.
    """
    total = u_order + v_order
    if total <= 2:
        d = fn
        for _ in range(u_order):
            d = d.differentiate("u")
        for _ in range(v_order):
            d = d.differentiate("v")
        return d.eval
    if total > 4:
        raise ConfigurationError("derivatives above order 4 are not supported")
    # split into a symbolic order-2 base and a finite-difference remainder
    su = min(u_order, 2)
    sv = min(v_order, 2 - su)
    base = partial_derivative(fn, su, sv)
    ru, rv = u_order - su, v_order - sv
    h = fd_step

    def fd(g, var, order):
        if order == 0:
            return g
        if var == "u":
            def d1(u, v):
                return (g(u + h, v) - g(u - h, v)) / (2 * h)

            def d2(u, v):
                return (g(u + h, v) - 2 * g(u, v) + g(u - h, v)) / (h * h)
        else:
            def d1(u, v):
                return (g(u, v + h) - g(u, v - h)) / (2 * h)

            def d2(u, v):
                return (g(u, v + h) - 2 * g(u, v) + g(u, v - h)) / (h * h)
        return d1 if order == 1 else d2

    return fd(fd(base, "u", ru), "v", rv)


# --------------------------------------------------------------------------
# boundedness lint

_BOUNDED_CALLS = set(FUNCTIONS)


def _lint(node, out):
    """Return True when the subtree is provably bounded on R^2."""
    if isinstance(node, Const):
        return True
    if isinstance(node, Var):
        return False
    if isinstance(node, Call):
        return True
    if isinstance(node, Neg):
        return _lint(node.arg, out)
    ok_a = _lint(node.left, out)
    ok_b = _lint(node.right, out)
    if node.op == "/":
        if not (isinstance(node.right, Const) and node.right.value != 0):
            out.append(
                f"denominator at offset {node.pos} may vanish; quotient not provably bounded"
            )
            _flag_atoms(node.left, out)
            return True  # reported once here
        if not ok_a:
            _flag_atoms(node.left, out)
        return True
    if ok_a and ok_b:
        return True
    if node.op == "*" and (_is_const(node.left, 0.0) or _is_const(node.right, 0.0)):
        return True
    return False


def _flag_atoms(node, out):
    if isinstance(node, Var):
        out.append(
            f"unbounded in {node.name} (offset {node.pos}); outside the "
            f"bounded-coefficient C_b^4 hypothesis"
        )
    elif isinstance(node, Neg):
        _flag_atoms(node.arg, out)
    elif isinstance(node, BinOp) and node.op != "/":
        _flag_atoms(node.left, out)
        _flag_atoms(node.right, out)


def boundedness_lint(fn: ScalarFn) -> list[str]:
    """Warnings for subtrees whose supremum over R^2 is infinite. Never raises."""
    out: list[str] = []
    if not _lint(fn.ast, out):
        _flag_atoms(fn.ast, out)
    # de-duplicate while keeping order
    seen = set()
    return [w for w in out if not (w in seen or seen.add(w))]


# --------------------------------------------------------------------------
# Nemytskii operators


@dataclass(frozen=True)
class CoefficientSet:
    """The four scalar maps defining F, B, G and the multiplier Sigma."""

    f: ScalarFn
    b: ScalarFn
    g: ScalarFn
    sigma: ScalarFn

    @classmethod
    def from_strings(cls, f="0", b="0", g="0", sigma="0") -> "CoefficientSet":
        return cls(parse_expr(f), parse_expr(b), parse_expr(g), parse_expr(sigma))

    def as_strings(self) -> dict:
        return {"f": self.f.source, "b": self.b.source, "g": self.g.source, "sigma": self.sigma.source}

    def lint(self) -> dict:
        return {name: boundedness_lint(getattr(self, name)) for name in ("f", "b", "g", "sigma")}


def nemytskii_apply(fn: ScalarFn, X: GridField, Y: GridField) -> GridField:
    if X.n_grid != Y.n_grid:
        raise ConfigurationError(f"grid size mismatch: {X.n_grid} vs {Y.n_grid}")
    return GridField(fn.eval(X.values, Y.values), X.length)


def nemytskii_spectral(fn: ScalarFn, op: OperatorSpec, X: np.ndarray, Y: np.ndarray) -> np.ndarray:
    """Batched ``P_n[fn(x(xi), y(xi))]`` for coefficient arrays of shape (..., n)."""
    if fn.is_zero:
        return np.zeros(np.broadcast_shapes(np.shape(X), np.shape(Y)))
    values = fn.eval(op.to_grid_array(X), op.to_grid_array(Y))
    return op.to_spectral_array(values)


def multiplier_matrix(values: np.ndarray, op: OperatorSpec) -> np.ndarray:
    """Matrix of ``z -> P_n[s z]`` in the basis, from grid values ``s`` of shape (..., N)."""
    S = op.synthesis_matrix
    w = op.quadrature_weight()
    return w * np.einsum("...i,ij,ik->...jk", values, S, S)


def sup_abs_derivative(fn: ScalarFn, var: str, radius: float = 10.0, n: int = 201) -> float:
    """Sampled sup of |d fn / d var| over [-radius, radius]^2."""
    d = fn.differentiate(var)
    s = np.linspace(-radius, radius, n)
    U, V = np.meshgrid(s, s, indexing="ij")
    return float(np.max(np.abs(d.eval(U, V))))


def sup_derivative(fn: ScalarFn, var: str, radius: float = 10.0, n: int = 201) -> float:
    """Sampled sup of d fn / d var (signed) over [-radius, radius]^2."""
    d = fn.differentiate(var)
    s = np.linspace(-radius, radius, n)
    U, V = np.meshgrid(s, s, indexing="ij")
    return float(np.max(d.eval(U, V)))

