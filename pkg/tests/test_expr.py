import math

import pytest
from hypothesis import given, settings, strategies as st

from stabcert import expr as ex
from stabcert.expr import (BinOp, Call, DomainError, EvalContext, ExprSyntaxError, Neg, Num,
                           Var, compile_expr, evaluate, parse, to_text)


def ev(src, **env):
    env.setdefault("t", 0.0)
    return evaluate(parse(src), env)


@pytest.mark.parametrize("src, value", [
    ("2^3^2", 512.0),
    ("-2^2", -4.0),
    ("1-2-3", -4.0),
    ("2*3+4", 10.0),
    ("2+3*4", 14.0),
    ("(2+3)*4", 20.0),
    ("8/4/2", 1.0),
    ("--3", 3.0),
    ("2^-1", 0.5),
    ("-2^-2", -0.25),
    ("max(1, 5, 3)", 5.0),
    ("min(4, -1)", -1.0),
    ("pi", math.pi),
    ("1e-3 * 2", 0.002),
    (".5 + 1.", 1.5),
])
def test_precedence_and_literals(src, value):
    assert ev(src) == value


def test_examples_from_systems():
    assert ev("exp(-t)*cos(t^2/2)", t=1.0) == pytest.approx(0.3228445825, abs=1e-10)
    assert ev("x1 + eps*x2", x1=1.0, x2=2.0, eps=0.1) == pytest.approx(1.2, abs=1e-15)
    assert ev("1/(1+t^2)^(3/2)", t=0.0) == 1.0


def test_eval_context():
    e = parse("t + eps*x2 - x1")
    assert evaluate(e, EvalContext(t=1.0, eps=2.0, x=(3.0, 4.0))) == 6.0


def test_compiled_matches_tree_walk():
    e = parse("sin(t)*x1^2/(1+sqrt(x1^2+x2^2)) + eps*exp(-2*t)")
    f = compile_expr(e)
    for t, x in [(0.0, (1.0, 2.0)), (3.7, (-0.2, 5.0)), (11.0, (0.0, 0.0))]:
        assert f(t, x, 0.3) == evaluate(e, EvalContext(t, 0.3, x))


@pytest.mark.parametrize("src, kind", [
    ("1/0", "domain"),
    ("log(0)", "domain"),
    ("log(-1)", "domain"),
    ("sqrt(-1)", "domain"),
    ("(-8)^(1/3)", "domain"),
    ("exp(1000)", "overflow"),
    ("10^400", "overflow"),
])
def test_domain_errors(src, kind):
    with pytest.raises(DomainError) as info:
        ev(src)
    assert info.value.kind == kind


@pytest.mark.parametrize("src, offset", [
    ("1 +", 3),
    ("(1 + 2", 6),
    ("2 * * 3", 4),
    ("foo(1)", 0),
    ("sin(1, 2)", 0),
    ("1 $ 2", 2),
    ("3x", 0),
])
def test_syntax_errors_carry_offset(src, offset):
    with pytest.raises(ExprSyntaxError) as info:
        parse(src)
    assert info.value.offset == offset


def test_offset_is_utf8_bytes():
    with pytest.raises(ExprSyntaxError) as info:
        parse("t + ε")
    assert info.value.offset == 4


def test_allowed_variables():
    parse("t + 1", allowed=("t",))
    with pytest.raises(ExprSyntaxError):
        parse("x1 + t", allowed=("t",))


def test_unknown_identifier_rejected():
    with pytest.raises(ExprSyntaxError):
        parse("y + 1")
    with pytest.raises(ExprSyntaxError):
        parse("x0")


def test_print_examples():
    assert to_text(parse("t+1")) == "t + 1"
    assert to_text(Num(0.0)) == "0"
    neg_sq = Neg(BinOp("^", Var("t"), Num(2.0)))
    assert evaluate(parse(to_text(neg_sq)), {"t": 2.0}) == -4.0
    assert to_text(BinOp("^", Num(-2.0), Num(2.0))) == "(-2)^2"
    assert to_text(BinOp("-", Num(1.0), BinOp("-", Num(2.0), Num(3.0)))) == "1 - (2 - 3)"
    assert to_text(BinOp("^", BinOp("^", Num(2.0), Num(3.0)), Num(2.0))) == "(2^3)^2"


def test_variables_and_max_index():
    e = parse("x3*t + eps*x1")
    assert ex.variables(e) == {"x1", "x3", "t", "eps"}
    assert ex.max_state_index(e) == 3


# random trees ------------------------------------------------------------

_leaf = st.one_of(
    st.sampled_from([0.0, 1.0, 2.0, 0.5, 3.25, -1.5, 1e-3, 7.0]).map(Num),
    st.sampled_from(["t", "eps", "x1", "x2"]).map(Var),
)


def _extend(children):
    return st.one_of(
        children.map(Neg),
        st.tuples(st.sampled_from("+-*/^"), children, children).map(lambda a: BinOp(*a)),
        st.tuples(st.sampled_from(["sin", "cos", "exp", "log", "sqrt", "abs", "tan"]),
                  children).map(lambda a: Call(a[0], (a[1],))),
        st.tuples(st.sampled_from(["min", "max"]), children, children).map(
            lambda a: Call(a[0], (a[1], a[2]))),
    )


trees = st.recursive(_leaf, _extend, max_leaves=12)
contexts = st.tuples(st.floats(-5, 5), st.floats(0, 2), st.floats(-5, 5), st.floats(-5, 5))


def _outcome(e, ctx):
    t, eps, x1, x2 = ctx
    try:
        return evaluate(e, EvalContext(t, eps, (x1, x2)))
    except DomainError as err:
        return ("error", err.kind)


@settings(max_examples=200, deadline=None)
@given(trees, st.lists(contexts, min_size=1, max_size=100))
def test_round_trip_is_exact(e, ctxs):
    back = parse(to_text(e))
    for ctx in ctxs:
        a, b = _outcome(e, ctx), _outcome(back, ctx)
        assert a == b or (isinstance(a, float) and math.isnan(a) and math.isnan(b))


@settings(max_examples=100, deadline=None)
@given(trees, contexts)
def test_evaluation_is_pure(e, ctx):
    first = _outcome(e, ctx)
    for _ in range(3):
        assert _outcome(e, ctx) == first


@settings(max_examples=100, deadline=None)
@given(trees, contexts)
def test_compiled_path_is_identical(e, ctx):
    t, eps, x1, x2 = ctx
    f = compile_expr(e)
    try:
        got = f(t, (x1, x2), eps)
    except DomainError as err:
        got = ("error", err.kind)
    assert got == _outcome(e, ctx)
