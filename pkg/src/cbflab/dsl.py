"""Scalar expression language: parsing, evaluation, printing and symbolic
partial derivatives.

Grammar (EBNF)::

    expr    = term , { ("+" | "-") , term } ;
    term    = unary , { ("*" | "/") , unary } ;
    unary   = ("-" | "+") , unary | power ;
    power   = atom , [ ("^" | "**") , unary ] ;      (* right-associative *)
    atom    = number | name | name , "(" , expr , ")" | "(" , expr , ")" ;
    number  = digits , [ "." , digits ] , [ ("e" | "E") , [ "+" | "-" ] , digits ] ;
    name    = letter , { letter | digit | "_" } ;

Functions: sin, cos, exp, log, sqrt, abs, sign. The name ``pi`` is a constant;
every other name is a variable.
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

__all__ = [
    "Expression", "Const", "Var", "Unary", "Binary",
    "ParseError", "EvaluationError", "UnboundVariableError", "DomainError",
    "parse_expr", "evaluate", "substitute", "differentiate", "gradient", "lambdify",
    "FUNCTIONS",
]

FUNCTIONS = ("sin", "cos", "exp", "log", "sqrt", "abs", "sign")
_BINARY_OPS = ("+", "-", "*", "/", "^")
_PREC = {"+": 1, "-": 1, "*": 2, "/": 2, "neg": 3, "^": 4}
_ATOM_PREC = 5


class ParseError(ValueError):
    """Malformed expression text; carries a 1-based line/column."""

    def __init__(self, message: str, line: int, column: int, text: str = ""):
        self.message = message
        self.line = line
        self.column = column
        self.text = text
        super().__init__(f"{message} (line {line}, column {column})")


class EvaluationError(ArithmeticError):
    pass


class UnboundVariableError(EvaluationError, KeyError):
    def __init__(self, name: str):
        self.name = name
        super().__init__(f"unbound variable {name!r}")

    def __str__(self) -> str:
        return self.args[0]


class DomainError(EvaluationError):
    """Raised when a subexpression is evaluated outside its real domain."""

    def __init__(self, message: str, subexpr: "Expression"):
        self.subexpr = subexpr
        super().__init__(f"{message} in subexpression '{subexpr}'")


# --------------------------------------------------------------------------
# AST


class Expression:
    """Immutable scalar expression node."""

    __slots__ = ()

    def evaluate(self, bindings: Mapping[str, float]) -> float:
        return _eval(self, bindings)

    def free_vars(self) -> frozenset:
        return _free_vars(self)

    def diff(self, var: str) -> "Expression":
        return differentiate(self, var)

    def contains(self, func: str) -> bool:
        """True if the unary function ``func`` occurs anywhere in the tree."""
        if isinstance(self, Unary):
            return self.op == func or self.arg.contains(func)
        if isinstance(self, Binary):
            return self.left.contains(func) or self.right.contains(func)
        return False

    def __str__(self) -> str:
        return _to_str(self)

    # operator sugar used when building expressions programmatically
    def __add__(self, other):
        return Binary("+", self, _coerce(other))

    def __radd__(self, other):
        return Binary("+", _coerce(other), self)

    def __sub__(self, other):
        return Binary("-", self, _coerce(other))

    def __rsub__(self, other):
        return Binary("-", _coerce(other), self)

    def __mul__(self, other):
        return Binary("*", self, _coerce(other))

    def __rmul__(self, other):
        return Binary("*", _coerce(other), self)

    def __truediv__(self, other):
        return Binary("/", self, _coerce(other))

    def __rtruediv__(self, other):
        return Binary("/", _coerce(other), self)

    def __pow__(self, other):
        return Binary("^", self, _coerce(other))

    def __neg__(self):
        return Unary("neg", self)


@dataclass(frozen=True, eq=True, repr=True)
class Const(Expression):
    value: float


@dataclass(frozen=True, eq=True, repr=True)
class Var(Expression):
    name: str


@dataclass(frozen=True, eq=True, repr=True)
class Unary(Expression):
    op: str
    arg: Expression


@dataclass(frozen=True, eq=True, repr=True)
class Binary(Expression):
    op: str
    left: Expression
    right: Expression


def _coerce(value) -> Expression:
    if isinstance(value, Expression):
        return value
    if isinstance(value, str):
        return parse_expr(value)
    return Const(float(value))


# --------------------------------------------------------------------------
# Parsing

_TOKEN_RE = re.compile(
    r"(?P<ws>\s+)"
    r"|(?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)"
    r"|(?P<name>[A-Za-z_][A-Za-z0-9_]*)"
    r"|(?P<op>\*\*|[-+*/^(),])"
)


@dataclass(frozen=True)
class _Token:
    kind: str
    text: str
    pos: int


def _line_col(text: str, pos: int) -> tuple[int, int]:
    line = text.count("\n", 0, pos) + 1
    col = pos - (text.rfind("\n", 0, pos) + 1) + 1
    return line, col


def _tokenize(text: str) -> list[_Token]:
    tokens = []
    pos = 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if m is None:
            line, col = _line_col(text, pos)
            raise ParseError(f"unexpected character {text[pos]!r}", line, col, text)
        kind = m.lastgroup
        if kind != "ws":
            tok = m.group(kind)
            if kind == "op" and tok == "**":
                tok = "^"
            tokens.append(_Token(kind, tok, pos))
        pos = m.end()
    tokens.append(_Token("eof", "", len(text)))
    return tokens


class _Parser:
    def __init__(self, text: str):
        self.text = text
        self.tokens = _tokenize(text)
        self.i = 0

    def error(self, message: str, tok: _Token | None = None) -> ParseError:
        tok = tok or self.tokens[self.i]
        line, col = _line_col(self.text, tok.pos)
        return ParseError(message, line, col, self.text)

    @property
    def tok(self) -> _Token:
        return self.tokens[self.i]

    def accept(self, *ops: str) -> _Token | None:
        t = self.tok
        if t.kind == "op" and t.text in ops:
            self.i += 1
            return t
        return None

    def expect(self, op: str) -> _Token:
        t = self.accept(op)
        if t is None:
            found = "end of input" if self.tok.kind == "eof" else repr(self.tok.text)
            raise self.error(f"expected {op!r}, found {found}")
        return t

    def parse(self) -> Expression:
        if self.tok.kind == "eof":
            raise self.error("empty expression")
        e = self.expr()
        if self.tok.kind != "eof":
            raise self.error(f"unexpected token {self.tok.text!r}")
        return e

    def expr(self) -> Expression:
        e = self.term()
        while (t := self.accept("+", "-")) is not None:
            e = Binary(t.text, e, self.term())
        return e

    def term(self) -> Expression:
        e = self.unary()
        while (t := self.accept("*", "/")) is not None:
            e = Binary(t.text, e, self.unary())
        return e

    def unary(self) -> Expression:
        if self.accept("-"):
            return Unary("neg", self.unary())
        if self.accept("+"):
            return self.unary()
        return self.power()

    def power(self) -> Expression:
        base = self.atom()
        if self.accept("^"):
            return Binary("^", base, self.unary())
        return base

    def atom(self) -> Expression:
        t = self.tok
        if t.kind == "num":
            self.i += 1
            value = float(t.text)
            if not math.isfinite(value):
                raise self.error("numeric literal out of range", t)
            return Const(value)
        if t.kind == "name":
            self.i += 1
            if self.accept("("):
                if t.text not in FUNCTIONS:
                    raise self.error(f"unknown function {t.text!r}", t)
                arg = self.expr()
                if self.tok.kind == "op" and self.tok.text == ",":
                    raise self.error(f"{t.text}() takes exactly one argument")
                self.expect(")")
                return Unary(t.text, arg)
            if t.text in FUNCTIONS:
                raise self.error(f"function {t.text!r} used without arguments", t)
            if t.text == "pi":
                return Const(math.pi)
            return Var(t.text)
        if self.accept("("):
            e = self.expr()
            self.expect(")")
            return e
        if t.kind == "eof":
            raise self.error("unexpected end of input")
        raise self.error(f"unexpected token {t.text!r}")


def parse_expr(text: str) -> Expression:
    """Parse ``text`` into an :class:`Expression`.

    Raises :class:`ParseError` (with line and column) on malformed input or
    unknown function names.
    """
    if not isinstance(text, str):
        raise TypeError(f"expected str, got {type(text).__name__}")
    try:
        return _Parser(text).parse()
    except RecursionError:
        raise ParseError("expression nested too deeply", 1, 1, text) from None


# --------------------------------------------------------------------------
# Printing


def _prec(e: Expression) -> int:
    if isinstance(e, Binary):
        return _PREC[e.op]
    if isinstance(e, Unary) and e.op == "neg":
        return _PREC["neg"]
    return _ATOM_PREC


def _const_str(v: float) -> str:
    if v == math.pi:
        return "pi"
    if math.isnan(v) or math.isinf(v):
        raise ValueError(f"constant {v} has no textual form")
    s = repr(float(v))
    return f"({s})" if s.startswith("-") else s


def _to_str(e: Expression) -> str:
    if isinstance(e, Const):
        return _const_str(e.value)
    if isinstance(e, Var):
        return e.name
    if isinstance(e, Unary):
        if e.op == "neg":
            inner = _to_str(e.arg)
            return f"-({inner})" if _prec(e.arg) < _PREC["neg"] else f"-{inner}"
        return f"{e.op}({_to_str(e.arg)})"
    p = _PREC[e.op]
    left, right = _to_str(e.left), _to_str(e.right)
    if e.op == "^":
        # right-associative: parenthesize a power (or anything looser) on the left
        if _prec(e.left) <= p:
            left = f"({left})"
        if _prec(e.right) < _PREC["neg"]:
            right = f"({right})"
        return f"{left}^{right}"
    # keep the tree shape exactly so that evaluation is bit-identical
    if _prec(e.left) < p:
        left = f"({left})"
    if _prec(e.right) <= p:
        right = f"({right})"
    return f"{left} {e.op} {right}"


# --------------------------------------------------------------------------
# Evaluation


def _free_vars(e: Expression) -> frozenset:
    if isinstance(e, Var):
        return frozenset((e.name,))
    if isinstance(e, Unary):
        return _free_vars(e.arg)
    if isinstance(e, Binary):
        return _free_vars(e.left) | _free_vars(e.right)
    return frozenset()


def _pow(a: float, b: float, e: Expression) -> float:
    if a < 0 and b != math.floor(b):
        raise DomainError("non-integer power of a negative base", e)
    if a == 0 and b < 0:
        raise DomainError("division by zero", e)
    try:
        return math.pow(a, b)
    except OverflowError:
        return math.inf if a > 0 or b % 2 == 0 else -math.inf


def _eval(e: Expression, b: Mapping[str, float]) -> float:
    if isinstance(e, Const):
        return e.value
    if isinstance(e, Var):
        try:
            return float(b[e.name])
        except KeyError:
            raise UnboundVariableError(e.name) from None
    if isinstance(e, Unary):
        x = _eval(e.arg, b)
        op = e.op
        if op == "neg":
            return -x
        if math.isnan(x):
            return x
        if op == "sin":
            return math.sin(x) if math.isfinite(x) else math.nan
        if op == "cos":
            return math.cos(x) if math.isfinite(x) else math.nan
        if op == "exp":
            try:
                return math.exp(x)
            except OverflowError:
                return math.inf
        if op == "log":
            if x <= 0:
                raise DomainError("log of a non-positive value", e)
            return math.log(x)
        if op == "sqrt":
            if x < 0:
                raise DomainError("sqrt of a negative value", e)
            return math.sqrt(x)
        if op == "abs":
            return abs(x)
        if op == "sign":
            return float((x > 0) - (x < 0))
        raise ValueError(f"unknown unary op {op!r}")
    x = _eval(e.left, b)
    y = _eval(e.right, b)
    op = e.op
    if op == "+":
        return x + y
    if op == "-":
        return x - y
    if op == "*":
        return x * y
    if op == "/":
        if y == 0:
            raise DomainError("division by zero", e)
        return x / y
    if op == "^":
        if math.isnan(x) or math.isnan(y):
            return math.nan
        return _pow(x, y, e)
    raise ValueError(f"unknown binary op {op!r}")


def evaluate(e: Expression | str, bindings: Mapping[str, float]) -> float:
    """Evaluate in IEEE double precision; raises on unbound names or domain errors."""
    if isinstance(e, str):
        e = parse_expr(e)
    return _eval(e, bindings)


def substitute(e: Expression, bindings: Mapping[str, Expression | float]) -> Expression:
    """Replace variables by expressions or constants; the tree is otherwise kept."""
    if isinstance(e, Var):
        return _coerce(bindings[e.name]) if e.name in bindings else e
    if isinstance(e, Unary):
        return Unary(e.op, substitute(e.arg, bindings))
    if isinstance(e, Binary):
        return Binary(e.op, substitute(e.left, bindings), substitute(e.right, bindings))
    return e


# --------------------------------------------------------------------------
# Differentiation

_ZERO = Const(0.0)
_ONE = Const(1.0)


def _is(e: Expression, v: float) -> bool:
    return isinstance(e, Const) and e.value == v


# The builders below drop structural zeros/ones produced by the derivative
# rules; they never reorder or merge user subexpressions.
def _add(a: Expression, b: Expression) -> Expression:
    if _is(a, 0.0):
        return b
    if _is(b, 0.0):
        return a
    return Binary("+", a, b)


def _sub(a: Expression, b: Expression) -> Expression:
    if _is(b, 0.0):
        return a
    if _is(a, 0.0):
        return _neg(b)
    return Binary("-", a, b)


def _neg(a: Expression) -> Expression:
    if isinstance(a, Const):
        return Const(-a.value)
    if isinstance(a, Unary) and a.op == "neg":
        return a.arg
    return Unary("neg", a)


def _mul(a: Expression, b: Expression) -> Expression:
    if _is(a, 0.0) or _is(b, 0.0):
        return _ZERO
    if _is(a, 1.0):
        return b
    if _is(b, 1.0):
        return a
    if isinstance(a, Const) and isinstance(b, Const):
        return Const(a.value * b.value)
    return Binary("*", a, b)


def _div(a: Expression, b: Expression) -> Expression:
    if _is(a, 0.0):
        return _ZERO
    if _is(b, 1.0):
        return a
    return Binary("/", a, b)


def differentiate(e: Expression | str, var: str) -> Expression:
    """Symbolic partial derivative of ``e`` with respect to ``var``.

    ``abs`` differentiates to ``sign`` (so the derivative at 0 is 0).
    """
    if isinstance(e, str):
        e = parse_expr(e)
    return _d(e, var)


def _d(e: Expression, v: str) -> Expression:
    if isinstance(e, Const):
        return _ZERO
    if isinstance(e, Var):
        return _ONE if e.name == v else _ZERO
    if v not in _free_vars(e):
        return _ZERO
    if isinstance(e, Unary):
        u = e.arg
        du = _d(u, v)
        op = e.op
        if op == "neg":
            return _neg(du)
        if op == "sin":
            return _mul(Unary("cos", u), du)
        if op == "cos":
            return _neg(_mul(Unary("sin", u), du))
        if op == "exp":
            return _mul(e, du)
        if op == "log":
            return _div(du, u)
        if op == "sqrt":
            return _div(du, _mul(Const(2.0), e))
        if op == "abs":
            return _mul(Unary("sign", u), du)
        if op == "sign":
            return _ZERO
        raise ValueError(f"unknown unary op {op!r}")
    a, b = e.left, e.right
    da, db = _d(a, v), _d(b, v)
    op = e.op
    if op == "+":
        return _add(da, db)
    if op == "-":
        return _sub(da, db)
    if op == "*":
        return _add(_mul(da, b), _mul(a, db))
    if op == "/":
        if _is(db, 0.0):
            return _div(da, b)
        return _div(_sub(_mul(da, b), _mul(a, db)), Binary("^", b, Const(2.0)))
    if op == "^":
        if _is(db, 0.0):
            if isinstance(b, Const):
                expo = Const(b.value - 1.0)
                lowered = a if expo.value == 1.0 else Binary("^", a, expo)
                if expo.value == 0.0:
                    lowered = _ONE
                return _mul(_mul(b, lowered), da)
            return _mul(_mul(b, Binary("^", a, _sub(b, _ONE))), da)
        if _is(da, 0.0):
            return _mul(_mul(e, Unary("log", a)), db)
        return _mul(e, _add(_mul(db, Unary("log", a)), _div(_mul(b, da), a)))
    raise ValueError(f"unknown binary op {op!r}")


def gradient(e: Expression, names: Sequence[str]) -> list[Expression]:
    return [differentiate(e, name) for name in names]


# --------------------------------------------------------------------------
# Vectorized compilation

_NP_FUNCS = {
    "sin": "_np.sin", "cos": "_np.cos", "exp": "_np.exp", "log": "_np.log",
    "sqrt": "_np.sqrt", "abs": "_np.abs", "sign": "_np.sign",
}


def _to_py(e: Expression, names: Mapping[str, str]) -> str:
    if isinstance(e, Const):
        v = e.value
        if math.isfinite(v):
            return f"({v!r})"
        return "_np.nan" if math.isnan(v) else ("_np.inf" if v > 0 else "(-_np.inf)")
    if isinstance(e, Var):
        try:
            return names[e.name]
        except KeyError:
            raise UnboundVariableError(e.name) from None
    if isinstance(e, Unary):
        inner = _to_py(e.arg, names)
        if e.op == "neg":
            return f"(-{inner})"
        return f"{_NP_FUNCS[e.op]}({inner})"
    left, right = _to_py(e.left, names), _to_py(e.right, names)
    if e.op == "^":
        return f"_np.power({left}, {right})"
    return f"({left} {e.op} {right})"


def lambdify(exprs: Iterable[Expression], names: Sequence[str]) -> Callable:
    """Compile expressions into one numpy function of the named variables.

    The returned function takes one positional argument per name (scalars or
    broadcastable arrays) and returns a tuple with one value per expression.
    Domain violations yield NaN/inf instead of raising; use :func:`evaluate`
    for strict checking.
    """
    exprs = list(exprs)
    mapping = {name: f"_a{i}" for i, name in enumerate(names)}
    args = ", ".join(mapping[n] for n in names)
    body = ", ".join(_to_py(e, mapping) for e in exprs)
    src = f"def _f({args}):\n    with _np.errstate(all='ignore'):\n        return ({body}{',' if exprs else ''})\n"
    scope = {"_np": np}
    exec(compile(src, "<cbflab.dsl>", "exec"), scope)
    fn = scope["_f"]
    fn.__doc__ = src
    return fn
