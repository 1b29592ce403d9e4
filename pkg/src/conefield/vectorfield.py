"""Vector-field definitions: parsing, evaluation, exact differentiation.

A system is a vector field f on R^n given componentwise by expression
trees. Differentiation is forward-mode (dual numbers carrying a full
gradient), so Jacobians are exact to rounding. A small code generator
turns a parsed system into plain-Python callables for the integrator hot
loops; the jet interpreter remains the reference path.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field

import numpy as np

from .errors import EvaluationError, ParseError

UNARY_FUNCS = ("neg", "sin", "cos", "tan", "exp", "log", "sqrt", "abs")
BINARY_OPS = ("add", "sub", "mul", "div", "pow")

_FUNC_NAMES = {"sin", "cos", "tan", "exp", "log", "sqrt", "abs"}
_VAR_RE = re.compile(r"^x([0-9]+)$")


# --- expression tree ------------------------------------------------------

@dataclass(frozen=True)
class Const:
    value: float


@dataclass(frozen=True)
class Var:
    index: int  # 0-based


@dataclass(frozen=True)
class Param:
    name: str


@dataclass(frozen=True)
class Unary:
    op: str
    child: object


@dataclass(frozen=True)
class Binary:
    op: str
    left: object
    right: object


ExprAst = (Const, Var, Param, Unary, Binary)


@dataclass(frozen=True)
class SystemSpec:
    """Immutable parsed system: n components f_i over x1..xn plus named
    real parameters. All evaluation entry points are pure."""

    name: str
    n: int
    components: tuple
    parameters: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.n <= 0:
            raise ParseError(f"dimension must be positive, got n={self.n}")
        if len(self.components) != self.n:
            raise ParseError(
                f"dimension mismatch: declared n={self.n} but "
                f"{len(self.components)} components given")
        for comp in self.components:
            _check_tree(comp, self.n, self.parameters)


def _check_tree(node, n, parameters):
    if isinstance(node, Var):
        if not 0 <= node.index < n:
            raise ParseError(f"unknown identifier x{node.index + 1}: variable index "
                             f"exceeds dimension n={n}")
    elif isinstance(node, Param):
        if node.name not in parameters:
            raise ParseError(f"unknown identifier {node.name!r}")
    elif isinstance(node, Unary):
        _check_tree(node.child, n, parameters)
    elif isinstance(node, Binary):
        _check_tree(node.left, n, parameters)
        _check_tree(node.right, n, parameters)
    elif not isinstance(node, Const):
        raise ParseError(f"not an expression node: {node!r}")


# --- forward-mode jets ----------------------------------------------------

class Jet:
    """Dual number with a full gradient: value plus d/dx_1..d/dx_n.

    One evaluation of f_i over jets seeded with basis gradients yields the
    entire Jacobian row exactly (sum/product/chain rules, no truncation).
    """

    __slots__ = ("value", "grad")

    def __init__(self, value, grad):
        self.value = float(value)
        self.grad = np.asarray(grad, dtype=float)

    @staticmethod
    def variable(value, index, n):
        g = np.zeros(n)
        g[index] = 1.0
        return Jet(value, g)

    @staticmethod
    def constant(value, n):
        return Jet(value, np.zeros(n))

    def __add__(self, other):
        if isinstance(other, Jet):
            return Jet(self.value + other.value, self.grad + other.grad)
        return Jet(self.value + other, self.grad)

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Jet):
            return Jet(self.value - other.value, self.grad - other.grad)
        return Jet(self.value - other, self.grad)

    def __rsub__(self, other):
        return Jet(other - self.value, -self.grad)

    def __mul__(self, other):
        if isinstance(other, Jet):
            return Jet(self.value * other.value,
                       self.value * other.grad + other.value * self.grad)
        return Jet(self.value * other, self.grad * other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Jet):
            if other.value == 0.0:
                raise EvaluationError("division by zero")
            inv = 1.0 / other.value
            return Jet(self.value * inv,
                       (self.grad - self.value * inv * other.grad) * inv)
        if other == 0.0:
            raise EvaluationError("division by zero")
        return Jet(self.value / other, self.grad / other)

    def __rtruediv__(self, other):
        if self.value == 0.0:
            raise EvaluationError("division by zero")
        val = other / self.value
        return Jet(val, -val / self.value * self.grad)

    def __neg__(self):
        return Jet(-self.value, -self.grad)

    def __pow__(self, expo):
        if isinstance(expo, Jet):
            # general u^v = exp(v log u), requires u > 0
            if self.value <= 0.0:
                raise EvaluationError("power with non-constant exponent needs positive base")
            val = self.value ** expo.value
            return Jet(val, val * (expo.grad * math.log(self.value)
                                   + expo.value / self.value * self.grad))
        return _jet_pow_const(self, expo)

    def sin(self):
        return Jet(math.sin(self.value), math.cos(self.value) * self.grad)

    def cos(self):
        return Jet(math.cos(self.value), -math.sin(self.value) * self.grad)

    def tan(self):
        t = math.tan(self.value)
        return Jet(t, (1.0 + t * t) * self.grad)

    def exp(self):
        e = math.exp(self.value)
        return Jet(e, e * self.grad)

    def log(self):
        if self.value <= 0.0:
            raise EvaluationError(f"log of nonpositive value {self.value}")
        return Jet(math.log(self.value), self.grad / self.value)

    def sqrt(self):
        if self.value < 0.0:
            raise EvaluationError(f"sqrt of negative value {self.value}")
        if self.value == 0.0:
            raise EvaluationError("sqrt not differentiable at 0")
        s = math.sqrt(self.value)
        return Jet(s, self.grad / (2.0 * s))

    def __abs__(self):
        return Jet(abs(self.value), math.copysign(1.0, self.value) * self.grad
                   if self.value != 0.0 else 0.0 * self.grad)


def _jet_pow_const(base, expo):
    e = float(expo)
    if e == int(e):
        k = int(e)
        if base.value == 0.0 and k < 0:
            raise EvaluationError("zero raised to a negative power")
        val = base.value ** k
        if k == 0:
            return Jet(1.0, 0.0 * base.grad)
        dval = k * base.value ** (k - 1)
        return Jet(val, dval * base.grad)
    if base.value < 0.0:
        raise EvaluationError(
            f"fractional power {e} of negative base {base.value}")
    if base.value == 0.0:
        if e < 0.0:
            raise EvaluationError("zero raised to a negative power")
        return Jet(0.0, np.full_like(base.grad, np.nan) if e < 1.0 else 0.0 * base.grad)
    val = base.value ** e
    return Jet(val, e * base.value ** (e - 1.0) * base.grad)


# checked scalar helpers shared by the interpreter and generated code

def _log_checked(v):
    if v <= 0.0:
        raise EvaluationError(f"log of nonpositive value {v}")
    return math.log(v)


def _sqrt_checked(v):
    if v < 0.0:
        raise EvaluationError(f"sqrt of negative value {v}")
    return math.sqrt(v)


def _div_checked(a, b):
    if b == 0.0:
        raise EvaluationError("division by zero")
    return a / b


def _pow_checked(a, b):
    if b == int(b):
        if a == 0.0 and b < 0:
            raise EvaluationError("zero raised to a negative power")
        return a ** int(b)
    if a < 0.0:
        raise EvaluationError(f"fractional power {b} of negative base {a}")
    if a == 0.0 and b < 0.0:
        raise EvaluationError("zero raised to a negative power")
    return a ** b


_SCALAR_UNARY = {
    "neg": lambda v: -v,
    "sin": math.sin,
    "cos": math.cos,
    "tan": math.tan,
    "exp": math.exp,
    "log": _log_checked,
    "sqrt": _sqrt_checked,
    "abs": abs,
}


def _eval_node(node, xs, params):
    """Evaluate over floats or Jets; xs is the sequence of per-variable values."""
    if isinstance(node, Const):
        return node.value
    if isinstance(node, Var):
        return xs[node.index]
    if isinstance(node, Param):
        return params[node.name]
    if isinstance(node, Unary):
        v = _eval_node(node.child, xs, params)
        if isinstance(v, Jet):
            if node.op == "neg":
                return -v
            if node.op == "abs":
                return abs(v)
            return getattr(v, node.op)()
        return _SCALAR_UNARY[node.op](v)
    # Binary
    a = _eval_node(node.left, xs, params)
    b = _eval_node(node.right, xs, params)
    op = node.op
    if op == "add":
        return a + b
    if op == "sub":
        return a - b
    if op == "mul":
        return a * b
    if op == "div":
        if isinstance(a, Jet) or isinstance(b, Jet):
            return (a if isinstance(a, Jet) else Jet.constant(a, _grad_len(b))) / b \
                if isinstance(b, Jet) else a / b
        return _div_checked(a, b)
    if op == "pow":
        if isinstance(a, Jet):
            return a ** (b.value if isinstance(b, Jet) and _is_const_jet(b) else b)
        if isinstance(b, Jet):
            return Jet.constant(a, len(b.grad)) ** b
        return _pow_checked(a, b)
    raise EvaluationError(f"unknown operator {op!r}")


def _grad_len(v):
    return len(v.grad) if isinstance(v, Jet) else 0


def _is_const_jet(j):
    return not np.any(j.grad)


# --- public evaluation ----------------------------------------------------

def eval_field(spec, x):
    """Evaluate f(x) componentwise. Domain failures report the component."""
    xs = [float(v) for v in x]
    if len(xs) != spec.n:
        raise EvaluationError(f"state has length {len(xs)}, expected {spec.n}")
    out = np.empty(spec.n)
    for i, comp in enumerate(spec.components):
        try:
            out[i] = _eval_node(comp, xs, spec.parameters)
        except EvaluationError as exc:
            raise EvaluationError(f"component {i + 1}: {exc}") from exc
        except (ZeroDivisionError, ValueError, OverflowError) as exc:
            raise EvaluationError(f"component {i + 1}: {exc}") from exc
    return out


def eval_jacobian(spec, x):
    """Jacobian matrix J[i, j] = df_i/dx_j at x, exact by forward-mode jets."""
    xs = [Jet.variable(float(v), j, spec.n) for j, v in enumerate(x)]
    if len(xs) != spec.n:
        raise EvaluationError(f"state has length {len(x)}, expected {spec.n}")
    J = np.empty((spec.n, spec.n))
    for i, comp in enumerate(spec.components):
        try:
            r = _eval_node(comp, xs, spec.parameters)
        except EvaluationError as exc:
            raise EvaluationError(f"component {i + 1}: {exc}") from exc
        J[i, :] = r.grad if isinstance(r, Jet) else 0.0
    return J


# --- parser ---------------------------------------------------------------

_TOKEN_RE = re.compile(r"""
    (?P<num>(\d+\.?\d*|\.\d+)([eE][+-]?\d+)?)
  | (?P<ident>[A-Za-z_][A-Za-z_0-9]*)
  | (?P<op>[-+*/^()=;])
  | (?P<ws>\s+)
""", re.VERBOSE)


def _tokenize(text):
    tokens = []
    pos = 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if m is None:
            raise ParseError(f"unexpected character {text[pos]!r}", pos)
        if m.lastgroup != "ws":
            tokens.append((m.lastgroup, m.group(), pos))
        pos = m.end()
    tokens.append(("end", "", len(text)))
    return tokens


class _Parser:
    def __init__(self, tokens, n):
        self.tokens = tokens
        self.i = 0
        self.n = n

    def peek(self):
        return self.tokens[self.i]

    def next(self):
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def expect(self, value):
        kind, val, pos = self.next()
        if val != value:
            raise ParseError(f"expected {value!r}, found {val!r}", pos)

    def expr(self):
        node = self.term()
        while self.peek()[1] in ("+", "-"):
            op = self.next()[1]
            rhs = self.term()
            node = Binary("add" if op == "+" else "sub", node, rhs)
        return node

    def term(self):
        node = self.factor()
        while self.peek()[1] in ("*", "/"):
            op = self.next()[1]
            rhs = self.factor()
            node = Binary("mul" if op == "*" else "div", node, rhs)
        return node

    def factor(self):
        kind, val, pos = self.peek()
        if val == "-":
            self.next()
            return Unary("neg", self.factor())
        if val == "+":
            self.next()
            return self.factor()
        return self.power()

    def power(self):
        base = self.atom()
        if self.peek()[1] == "^":
            self.next()
            expo = self.factor()  # right-associative, binds unary minus in exponent
            return Binary("pow", base, expo)
        return base

    def atom(self):
        kind, val, pos = self.next()
        if kind == "num":
            return Const(float(val))
        if val == "(":
            node = self.expr()
            self.expect(")")
            return node
        if kind == "ident":
            if val in _FUNC_NAMES:
                self.expect("(")
                node = self.expr()
                self.expect(")")
                return Unary(val, node)
            m = _VAR_RE.match(val)
            if m:
                idx = int(m.group(1))
                if not 1 <= idx <= self.n:
                    raise ParseError(f"unknown identifier {val!r}: variable index "
                                     f"out of range 1..{self.n}", pos)
                return Var(idx - 1)
            return Param(val)
        raise ParseError(f"unexpected token {val!r}", pos)


def parse_system(text, name="user"):
    """Parse ``n=<int>; f1=<expr>; ...; fn=<expr>; [param <name>=<real>;]*``.

    Whitespace is insignificant; variables are written x1..xn in the text
    (stored 0-indexed); anything else alphabetic resolves as a parameter.
    """
    tokens = _tokenize(text)
    i = 0

    def stmt_split():
        # split token list on ';'
        groups, cur = [], []
        for tok in tokens:
            if tok[1] == ";" or tok[0] == "end":
                if cur:
                    groups.append(cur)
                cur = []
            else:
                cur.append(tok)
        return groups

    groups = stmt_split()
    if not groups:
        raise ParseError("empty system definition", 0)
    kind, val, pos = groups[0][0]
    if val != "n":
        raise ParseError("system must start with 'n=<int>'", pos)
    if len(groups[0]) != 3 or groups[0][1][1] != "=" or groups[0][2][0] != "num":
        raise ParseError("malformed dimension declaration", pos)
    n_val = groups[0][2][1]
    n = int(float(n_val))
    if float(n_val) != n or n <= 0:
        raise ParseError(f"dimension must be a positive integer, got {n_val}", groups[0][2][2])

    comps = {}
    params = {}
    for g in groups[1:]:
        kind, val, pos = g[0]
        if val == "param":
            if len(g) < 4 or g[1][0] != "ident" or g[2][1] != "=":
                raise ParseError("malformed parameter declaration", pos)
            pname = g[1][1]
            # parameter value: optionally signed numeric literal
            rest = g[3:]
            sign = 1.0
            if rest and rest[0][1] in ("-", "+"):
                sign = -1.0 if rest[0][1] == "-" else 1.0
                rest = rest[1:]
            if len(rest) != 1 or rest[0][0] != "num":
                raise ParseError(f"parameter {pname!r} needs a numeric value", pos)
            params[pname] = sign * float(rest[0][1])
            continue
        m = re.match(r"^f([0-9]+)$", val) if kind == "ident" else None
        if not m:
            raise ParseError(f"expected component 'f<k>=' or 'param', found {val!r}", pos)
        idx = int(m.group(1))
        if not 1 <= idx <= n:
            raise ParseError(f"component index f{idx} out of range 1..{n}", pos)
        if len(g) < 3 or g[1][1] != "=":
            raise ParseError(f"component f{idx} missing '='", pos)
        sub = _Parser(g[2:] + [("end", "", g[-1][2])], n)
        node = sub.expr()
        if sub.peek()[0] != "end":
            raise ParseError(f"trailing tokens after component f{idx}", sub.peek()[2])
        if idx in comps:
            raise ParseError(f"component f{idx} defined twice", pos)
        comps[idx] = node

    if sorted(comps) != list(range(1, n + 1)):
        raise ParseError(
            f"dimension mismatch: declared n={n} but components {sorted(comps)} given")
    components = tuple(comps[i] for i in range(1, n + 1))
    return SystemSpec(name=name, n=n, components=components, parameters=params)


# --- printing -------------------------------------------------------------

def _fmt_num(v):
    if v == int(v) and abs(v) < 1e16:
        return str(int(v))
    return repr(v)


def format_expr(node):
    if isinstance(node, Const):
        return _fmt_num(node.value)
    if isinstance(node, Var):
        return f"x{node.index + 1}"
    if isinstance(node, Param):
        return node.name
    if isinstance(node, Unary):
        if node.op == "neg":
            return f"(-{format_expr(node.child)})"
        return f"{node.op}({format_expr(node.child)})"
    sym = {"add": "+", "sub": "-", "mul": "*", "div": "/", "pow": "^"}[node.op]
    return f"({format_expr(node.left)}{sym}{format_expr(node.right)})"


def format_system(spec):
    parts = [f"n={spec.n}"]
    parts += [f"f{i + 1}={format_expr(c)}" for i, c in enumerate(spec.components)]
    parts += [f"param {k}={repr(v)}" for k, v in sorted(spec.parameters.items())]
    return "; ".join(parts)


# --- built-in systems -----------------------------------------------------

_LINEAR_DIAG_RE = re.compile(r"^linear-diag\(([^)]*)\)$")


def builtin(name):
    """Named example systems with their standard coefficients."""
    if name == "fixedpoint-example":
        return parse_system(
            "n=2; f1=-sin(x1)+cos(x2)-1; f2=-cos(x1)-1.5*sin(x2)+1",
            name=name)
    if name == "vanderpol":
        return parse_system("n=2; f1=x2; f2=(1-x1^2)*x2-x1", name=name)
    m = _LINEAR_DIAG_RE.match(name)
    if m:
        try:
            rates = [float(s) for s in m.group(1).split(",") if s.strip() != ""]
        except ValueError as exc:
            raise ParseError(f"bad linear-diag rates: {exc}") from exc
        if not rates:
            raise ParseError("linear-diag needs at least one rate")
        n = len(rates)
        comps = "; ".join(f"f{i + 1}=({_fmt_num(a)})*x{i + 1}" for i, a in enumerate(rates))
        return parse_system(f"n={n}; {comps}", name=name)
    raise ParseError(f"unknown builtin system {name!r}")


# --- code generation ------------------------------------------------------
# The generated functions replay exactly the jet recurrences (value and
# partial expressions unrolled once per node), so they agree with the
# interpreter to rounding while avoiding per-call tree walks.

class _Emitter:
    def __init__(self, n, params):
        self.n = n
        self.params = params
        self.lines = []
        self.k = 0

    def tmp(self, expr):
        if expr in ("0.0", "1.0") or _is_name(expr):
            return expr
        name = f"t{self.k}"
        self.k += 1
        self.lines.append(f"    {name} = {expr}")
        return name

    def value(self, node):
        v, _ = self.emit(node, want_partials=False)
        return v

    def emit(self, node, want_partials=True):
        zero = ["0.0"] * self.n
        if isinstance(node, Const):
            return repr(node.value), zero
        if isinstance(node, Param):
            return repr(float(self.params[node.name])), zero
        if isinstance(node, Var):
            d = list(zero)
            d[node.index] = "1.0"
            return f"x{node.index + 1}", d
        if isinstance(node, Unary):
            cv, cd = self.emit(node.child, want_partials)
            if node.op == "neg":
                v = self.tmp(f"-{cv}")
                return v, [d if d == "0.0" else self.tmp(f"-{d}") for d in cd]
            fns = {"sin": "sin", "cos": "cos", "tan": "tan", "exp": "exp",
                   "log": "log_", "sqrt": "sqrt_", "abs": "abs"}
            v = self.tmp(f"{fns[node.op]}({cv})")
            if not want_partials or all(d == "0.0" for d in cd):
                return v, zero
            if node.op == "sin":
                fac = self.tmp(f"cos({cv})")
            elif node.op == "cos":
                fac = self.tmp(f"-sin({cv})")
            elif node.op == "tan":
                fac = self.tmp(f"1.0 + {v}*{v}")
            elif node.op == "exp":
                fac = v
            elif node.op == "log":
                fac = self.tmp(f"1.0/{cv}")
            elif node.op == "sqrt":
                fac = self.tmp(f"0.5/{v}")
            else:  # abs
                fac = self.tmp(f"copysign(1.0, {cv})")
            return v, [d if d == "0.0" else self.tmp(f"{fac}*{d}") for d in cd]
        # Binary
        av, ad = self.emit(node.left, want_partials)
        bv, bd = self.emit(node.right, want_partials)
        op = node.op
        if op == "add":
            v = self.tmp(f"{av} + {bv}")
            return v, [self._lin(da, "1.0", db, "1.0") for da, db in zip(ad, bd)]
        if op == "sub":
            v = self.tmp(f"{av} - {bv}")
            return v, [self._lin(da, "1.0", db, "-1.0") for da, db in zip(ad, bd)]
        if op == "mul":
            v = self.tmp(f"{av}*{bv}")
            return v, [self._lin(da, bv, db, av) for da, db in zip(ad, bd)]
        if op == "div":
            v = self.tmp(f"div_({av}, {bv})")
            if not want_partials:
                return v, zero
            inv = self.tmp(f"1.0/{bv}")
            out = []
            for da, db in zip(ad, bd):
                if da == "0.0" and db == "0.0":
                    out.append("0.0")
                elif db == "0.0":
                    out.append(self.tmp(f"{da}*{inv}"))
                else:
                    out.append(self.tmp(f"({da} - {v}*{db})*{inv}"))
            return v, out
        if op == "pow":
            v = self.tmp(f"pow_({av}, {bv})")
            if not want_partials or (all(d == "0.0" for d in ad)
                                     and all(d == "0.0" for d in bd)):
                return v, zero
            if all(d == "0.0" for d in bd):  # constant exponent
                fac = self.tmp(f"{bv}*pow_({av}, {bv}-1.0)")
                return v, [d if d == "0.0" else self.tmp(f"{fac}*{d}") for d in ad]
            la = self.tmp(f"log_({av})")
            out = []
            for da, db in zip(ad, bd):
                terms = []
                if db != "0.0":
                    terms.append(f"{db}*{la}")
                if da != "0.0":
                    terms.append(f"{bv}*{da}/{av}")
                out.append("0.0" if not terms else self.tmp(f"{v}*({' + '.join(terms)})"))
            return v, out
        raise EvaluationError(f"unknown operator {op!r}")

    def _lin(self, da, ca, db, cb):
        terms = []
        if da != "0.0":
            terms.append(da if ca == "1.0" else f"{ca}*{da}" if ca != "-1.0" else f"-{da}")
        if db != "0.0":
            terms.append(db if cb == "1.0" else f"{cb}*{db}" if cb != "-1.0" else f"-({db})")
        if not terms:
            return "0.0"
        expr = " + ".join(terms)
        return self.tmp(expr)


def _is_name(expr):
    return re.match(r"^-?[A-Za-z_][A-Za-z_0-9]*$", expr) is not None


_CODEGEN_GLOBALS = {
    "sin": math.sin, "cos": math.cos, "tan": math.tan, "exp": math.exp,
    "abs": abs, "copysign": math.copysign,
    "log_": _log_checked, "sqrt_": _sqrt_checked,
    "div_": _div_checked, "pow_": _pow_checked,
}


def compile_field(spec):
    """Compile f to ``callable(x1, ..., xn) -> tuple`` of plain floats."""
    em = _Emitter(spec.n, spec.parameters)
    vals = [em.value(c) for c in spec.components]
    args = ", ".join(f"x{i + 1}" for i in range(spec.n))
    src = [f"def field({args}):"] + em.lines + [f"    return ({', '.join(vals)},)"]
    ns = dict(_CODEGEN_GLOBALS)
    exec("\n".join(src), ns)
    return ns["field"]


def compile_jacobian(spec):
    """Compile the exact Jacobian to ``callable(x1, ..., xn) -> tuple of rows``.

    Same forward-mode recurrences as the Jet class, unrolled at compile time.
    """
    em = _Emitter(spec.n, spec.parameters)
    rows = []
    for c in spec.components:
        _, partials = em.emit(c)
        rows.append(f"({', '.join(partials)},)")
    args = ", ".join(f"x{i + 1}" for i in range(spec.n))
    src = [f"def jac({args}):"] + em.lines + [f"    return ({', '.join(rows)},)"]
    ns = dict(_CODEGEN_GLOBALS)
    exec("\n".join(src), ns)
    return ns["jac"]
