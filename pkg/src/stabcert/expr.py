"""Scalar expression DSL used to write time-varying matrices and perturbations.

Grammar::

    expr   := term (('+'|'-') term)*
    term   := factor (('*'|'/') factor)*
    factor := ('-')* power
    power  := atom ('^' factor)?
    atom   := number | ident | ident '(' expr (',' expr)* ')' | '(' expr ')'

So ``-2^2 == -4``, ``2^3^2 == 512`` and ``1-2-3 == -4``. Identifiers are the
constants ``pi`` and ``e``, the variables ``t``, ``eps``, ``x1``..``xn`` and the
functions listed in ``FUNCTIONS``. Arithmetic is IEEE double throughout.

Trees are immutable. ``evaluate`` walks a tree; ``compile_expr`` turns it into a
closure ``f(t, x, eps)`` for the integrators. Both go through the same
primitive helpers, so they agree bit for bit.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

from .errors import StabcertError, ValidationError

__all__ = [
    "ScalarExpr", "Num", "Const", "Var", "Neg", "BinOp", "Call",
    "EvalContext", "ExprSyntaxError", "DomainError", "UnboundVariableError",
    "parse", "evaluate", "compile_expr", "to_text", "variables",
    "max_state_index",
]


class ExprSyntaxError(ValidationError):
    """Parse failure with the UTF-8 byte offset and the tokens that would fit."""

    def __init__(self, message: str, offset: int, expected: frozenset[str] = frozenset()):
        self.offset = offset
        self.expected = frozenset(expected)
        detail = f" (expected one of: {', '.join(sorted(self.expected))})" if self.expected else ""
        super().__init__(f"{message} at byte {offset}{detail}")


class DomainError(StabcertError, ArithmeticError):
    """Evaluation left the real domain (log of x <= 0, sqrt of x < 0, x/0, overflow)."""

    def __init__(self, message: str, kind: str = "domain"):
        self.kind = kind
        super().__init__(message)


class UnboundVariableError(StabcertError, LookupError):
    pass


# ---------------------------------------------------------------------------
# arithmetic primitives (shared by the tree walker and the compiler)

def _div(a: float, b: float) -> float:
    if b == 0.0:
        raise DomainError("division by zero")
    return a / b


def _pow(a: float, b: float) -> float:
    try:
        return math.pow(a, b)
    except ValueError:
        if a == 0.0:
            raise DomainError("zero raised to a negative power") from None
        raise DomainError(f"negative base {a!r} with non-integer exponent {b!r}") from None
    except OverflowError:
        raise DomainError("overflow in ^", kind="overflow") from None


def _log(a: float) -> float:
    if not a > 0.0:
        raise DomainError(f"log of non-positive value {a!r}")
    return math.log(a)


def _sqrt(a: float) -> float:
    if a < 0.0:
        raise DomainError(f"sqrt of negative value {a!r}")
    return math.sqrt(a)


def _exp(a: float) -> float:
    try:
        return math.exp(a)
    except OverflowError:
        raise DomainError("overflow in exp", kind="overflow") from None


def _tan(a: float) -> float:
    return math.tan(a)


_BINARY: dict[str, Callable[[float, float], float]] = {
    "+": lambda a, b: a + b,
    "-": lambda a, b: a - b,
    "*": lambda a, b: a * b,
    "/": _div,
    "^": _pow,
}

# name -> (callable, min arity, max arity)
FUNCTIONS: dict[str, tuple[Callable[..., float], int, int]] = {
    "sin": (math.sin, 1, 1),
    "cos": (math.cos, 1, 1),
    "tan": (_tan, 1, 1),
    "exp": (_exp, 1, 1),
    "log": (_log, 1, 1),
    "sqrt": (_sqrt, 1, 1),
    "abs": (abs, 1, 1),
    "min": (min, 2, 64),
    "max": (max, 2, 64),
}

CONSTANTS = {"pi": math.pi, "e": math.e}

_STATE_RE = re.compile(r"x([1-9][0-9]*)\Z")


def _check_finite(value: float) -> float:
    if not math.isfinite(value):
        raise DomainError("non-finite result", kind="overflow")
    return value


# ---------------------------------------------------------------------------
# tree

class ScalarExpr:
    """Base class of expression tree nodes."""

    __slots__ = ()
    prec = 5

    def __str__(self) -> str:
        return to_text(self)


@dataclass(frozen=True)
class Num(ScalarExpr):
    value: float

    @property
    def prec(self) -> int:  # negative literals only arise programmatically
        return 5 if self.value >= 0 else 0


@dataclass(frozen=True)
class Const(ScalarExpr):
    name: str


@dataclass(frozen=True)
class Var(ScalarExpr):
    name: str


@dataclass(frozen=True)
class Neg(ScalarExpr):
    operand: ScalarExpr
    prec = 3


@dataclass(frozen=True)
class BinOp(ScalarExpr):
    op: str
    left: ScalarExpr
    right: ScalarExpr

    @property
    def prec(self) -> int:
        return {"+": 1, "-": 1, "*": 2, "/": 2, "^": 4}[self.op]


@dataclass(frozen=True)
class Call(ScalarExpr):
    func: str
    args: tuple[ScalarExpr, ...]


@dataclass(frozen=True)
class EvalContext:
    t: float = 0.0
    eps: float = 0.0
    x: tuple[float, ...] = ()

    def env(self) -> dict[str, float]:
        out = {"t": float(self.t), "eps": float(self.eps)}
        for i, xi in enumerate(self.x, start=1):
            out[f"x{i}"] = float(xi)
        return out


# ---------------------------------------------------------------------------
# lexer / parser

_TOKEN_RE = re.compile(
    r"""
    (?P<ws>\s+)
  | (?P<num>(?:[0-9]+(?:\.[0-9]*)?|\.[0-9]+)(?:[eE][+-]?[0-9]+)?)
  | (?P<ident>[A-Za-z_][A-Za-z0-9_]*)
  | (?P<op>[-+*/^(),])
    """,
    re.VERBOSE,
)


@dataclass(frozen=True)
class _Tok:
    kind: str  # num | ident | op | end
    text: str
    pos: int  # character index


def _tokenize(source: str) -> list[_Tok]:
    def byte_offset(i: int) -> int:
        return len(source[:i].encode("utf-8"))

    toks: list[_Tok] = []
    i = 0
    while i < len(source):
        m = _TOKEN_RE.match(source, i)
        if m is None:
            raise ExprSyntaxError(f"unexpected character {source[i]!r}", byte_offset(i))
        kind = m.lastgroup
        text = m.group()
        if kind == "num":
            end = m.end()
            # "1e", "1.2.3", "2x" are malformed numbers, not implicit products
            if end < len(source) and (source[end].isalnum() or source[end] in "._"):
                raise ExprSyntaxError(f"malformed number {source[i:end + 1]!r}", byte_offset(i))
        if kind != "ws":
            toks.append(_Tok(kind, text, i))
        i = m.end()
    toks.append(_Tok("end", "", len(source)))
    return toks


_ATOM_START = frozenset({"number", "identifier", "(", "-"})


class _Parser:
    def __init__(self, source: str, allowed: frozenset[str] | None):
        self.source = source
        self.toks = _tokenize(source)
        self.i = 0
        self.allowed = allowed

    def error(self, message: str, expected, tok: _Tok | None = None) -> ExprSyntaxError:
        tok = tok or self.peek
        return ExprSyntaxError(message, len(self.source[:tok.pos].encode("utf-8")), frozenset(expected))

    @property
    def peek(self) -> _Tok:
        return self.toks[self.i]

    def take(self) -> _Tok:
        tok = self.toks[self.i]
        self.i += 1
        return tok

    def accept(self, text: str) -> bool:
        if self.peek.kind == "op" and self.peek.text == text:
            self.i += 1
            return True
        return False

    def parse(self) -> ScalarExpr:
        node = self.expr()
        if self.peek.kind != "end":
            raise self.error(f"unexpected token {self.peek.text!r}",
                             {"+", "-", "*", "/", "^", "end of input"})
        return node

    def expr(self) -> ScalarExpr:
        node = self.term()
        while self.peek.kind == "op" and self.peek.text in "+-":
            op = self.take().text
            node = BinOp(op, node, self.term())
        return node

    def term(self) -> ScalarExpr:
        node = self.factor()
        while self.peek.kind == "op" and self.peek.text in "*/":
            op = self.take().text
            node = BinOp(op, node, self.factor())
        return node

    def factor(self) -> ScalarExpr:
        negations = 0
        while self.accept("-"):
            negations += 1
        node = self.power()
        for _ in range(negations):
            node = Neg(node)
        return node

    def power(self) -> ScalarExpr:
        base = self.atom()
        if self.accept("^"):
            return BinOp("^", base, self.factor())
        return base

    def atom(self) -> ScalarExpr:
        tok = self.peek
        if tok.kind == "num":
            self.take()
            return Num(float(tok.text))
        if tok.kind == "op" and tok.text == "(":
            self.take()
            node = self.expr()
            if not self.accept(")"):
                raise self.error("unbalanced parenthesis", {")"})
            return node
        if tok.kind == "ident":
            self.take()
            name = tok.text
            if name in FUNCTIONS:
                if not self.accept("("):
                    raise self.error(f"function {name!r} needs an argument list", {"("})
                args = [self.expr()]
                while self.accept(","):
                    args.append(self.expr())
                if not self.accept(")"):
                    raise self.error("unbalanced parenthesis", {")", ","})
                _, lo, hi = FUNCTIONS[name]
                if not lo <= len(args) <= hi:
                    raise self.error(f"{name} takes {lo}..{hi} arguments, got {len(args)}", set(), tok)
                return Call(name, tuple(args))
            if self.peek.kind == "op" and self.peek.text == "(":
                raise self.error(f"unknown function {name!r}", sorted(FUNCTIONS), tok)
            if name in CONSTANTS:
                return Const(name)
            if name in ("t", "eps") or _STATE_RE.match(name):
                if self.allowed is not None and name not in self.allowed:
                    raise self.error(f"variable {name!r} is not allowed here",
                                     self.allowed, tok)
                return Var(name)
            raise self.error(f"unknown identifier {name!r}",
                             {"t", "eps", "x1..xn", "pi", "e", *FUNCTIONS}, tok)
        what = "end of input" if tok.kind == "end" else repr(tok.text)
        raise self.error(f"unexpected {what}", _ATOM_START)


def parse(source: str, allowed: Sequence[str] | None = None) -> ScalarExpr:
    """Parse ``source`` into a tree.

    ``allowed`` optionally restricts which variables may appear; anything else
    is reported as a syntax error pointing at the offending identifier.
    """
    if not isinstance(source, str):
        raise ValidationError(f"expression must be a string, got {type(source).__name__}")
    return _Parser(source, None if allowed is None else frozenset(allowed)).parse()


# ---------------------------------------------------------------------------
# evaluation

def _walk(node: ScalarExpr, env: Mapping[str, float]) -> float:
    if isinstance(node, Num):
        return node.value
    if isinstance(node, Var):
        try:
            return env[node.name]
        except KeyError:
            raise UnboundVariableError(f"unbound variable {node.name!r}") from None
    if isinstance(node, Const):
        return CONSTANTS[node.name]
    if isinstance(node, Neg):
        return -_walk(node.operand, env)
    if isinstance(node, BinOp):
        return _BINARY[node.op](_walk(node.left, env), _walk(node.right, env))
    if isinstance(node, Call):
        fn = FUNCTIONS[node.func][0]
        return fn(*[_walk(a, env) for a in node.args])
    raise TypeError(f"not an expression node: {node!r}")


def evaluate(expr: ScalarExpr, ctx: EvalContext | Mapping[str, float]) -> float:
    """Evaluate ``expr`` in ``ctx``; raises ``DomainError`` for non-real results."""
    env = ctx.env() if isinstance(ctx, EvalContext) else ctx
    return _check_finite(_walk(expr, env))


def _compile(node: ScalarExpr) -> Callable[[float, Sequence[float], float], float]:
    if isinstance(node, Num):
        v = node.value
        return lambda t, x, eps: v
    if isinstance(node, Const):
        v = CONSTANTS[node.name]
        return lambda t, x, eps: v
    if isinstance(node, Var):
        if node.name == "t":
            return lambda t, x, eps: t
        if node.name == "eps":
            return lambda t, x, eps: eps
        k = int(node.name[1:]) - 1

        def state(t, x, eps):
            try:
                return x[k]
            except IndexError:
                raise UnboundVariableError(f"unbound variable {node.name!r}") from None
        return state
    if isinstance(node, Neg):
        f = _compile(node.operand)
        return lambda t, x, eps: -f(t, x, eps)
    if isinstance(node, BinOp):
        lf, rf = _compile(node.left), _compile(node.right)
        op = _BINARY[node.op]
        return lambda t, x, eps: op(lf(t, x, eps), rf(t, x, eps))
    if isinstance(node, Call):
        fn = FUNCTIONS[node.func][0]
        if len(node.args) == 1:
            af = _compile(node.args[0])
            return lambda t, x, eps: fn(af(t, x, eps))
        afs = [_compile(a) for a in node.args]
        return lambda t, x, eps: fn(*[a(t, x, eps) for a in afs])
    raise TypeError(f"not an expression node: {node!r}")


def compile_expr(expr: ScalarExpr) -> Callable[[float, Sequence[float], float], float]:
    """Return a closure ``f(t, x, eps)`` computing ``evaluate`` on the same path."""
    inner = _compile(expr)

    def f(t, x=(), eps=0.0):
        return _check_finite(inner(t, x, eps))
    f.expr = expr
    return f


# ---------------------------------------------------------------------------
# printing

def _fmt_num(v: float) -> str:
    if v.is_integer() and abs(v) < 1e16:
        return str(int(v))
    return repr(v)


def _wrap(node: ScalarExpr, min_prec: int) -> str:
    text = to_text(node)
    return f"({text})" if node.prec < min_prec else text


def to_text(expr: ScalarExpr) -> str:
    """Render with the fewest parentheses that reparse to the same tree."""
    if isinstance(expr, Num):
        return _fmt_num(expr.value)
    if isinstance(expr, (Var, Const)):
        return expr.name
    if isinstance(expr, Neg):
        return "-" + _wrap(expr.operand, 3)
    if isinstance(expr, BinOp):
        if expr.op in "+-":
            return f"{_wrap(expr.left, 1)} {expr.op} {_wrap(expr.right, 2)}"
        if expr.op in "*/":
            return f"{_wrap(expr.left, 2)} {expr.op} {_wrap(expr.right, 3)}"
        return f"{_wrap(expr.left, 5)}^{_wrap(expr.right, 3)}"
    if isinstance(expr, Call):
        return f"{expr.func}({', '.join(to_text(a) for a in expr.args)})"
    raise TypeError(f"not an expression node: {expr!r}")


# ---------------------------------------------------------------------------
# introspection

def variables(expr: ScalarExpr) -> frozenset[str]:
    """Names of all variables referenced by ``expr``."""
    if isinstance(expr, Var):
        return frozenset({expr.name})
    if isinstance(expr, Neg):
        return variables(expr.operand)
    if isinstance(expr, BinOp):
        return variables(expr.left) | variables(expr.right)
    if isinstance(expr, Call):
        out: frozenset[str] = frozenset()
        for a in expr.args:
            out |= variables(a)
        return out
    return frozenset()


def max_state_index(expr: ScalarExpr) -> int:
    idx = [int(v[1:]) for v in variables(expr) if _STATE_RE.match(v)]
    return max(idx, default=0)
