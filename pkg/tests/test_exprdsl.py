import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import PROPERTY_CASES
from gbsde.errors import DiagonalityError, ExprSyntaxError, NumericalDomainError
from gbsde.exprdsl import (
    FUNCTIONS,
    Binary,
    Call,
    Dims,
    EvalContext,
    Num,
    Unary,
    Var,
    evaluate,
    evaluate_array,
    lipschitz_probe,
    parse,
    to_source,
)


@pytest.mark.parametrize(
    "src, ctx, expected",
    [
        ("2*x1 + 1", EvalContext(0.0, x=[3.0]), 7.0),
        ("max(y1, 0)", EvalContext(0.0, y=[-2.0]), 0.0),
        ("abs(z1)", EvalContext(0.0, z=[-1.5]), 1.5),
        ("exp(-t)*x1", EvalContext(0.0, x=[5.0]), 5.0),
        ("x1^2", EvalContext(0.0, x=[-3.0]), 9.0),
        ("2^3^2", EvalContext(0.0), 512.0),
        ("-2^2", EvalContext(0.0), -4.0),
        ("1 - 2 - 3", EvalContext(0.0), -4.0),
        ("8 / 4 / 2", EvalContext(0.0), 1.0),
        ("pow(y1, 2) + min(1, y2)", EvalContext(0.0, y=[3.0, 4.0]), 10.0),
    ],
)
def test_evaluate_examples(src, ctx, expected):
    assert evaluate(parse(src), ctx) == pytest.approx(expected, abs=1e-15)


@pytest.mark.parametrize("src", ["1/x1", "log(x1)", "sqrt(x1 - 1)"])
def test_domain_errors(src):
    with pytest.raises(NumericalDomainError) as info:
        evaluate(parse(src), EvalContext(0.0, x=[0.0]))
    assert "subexpression" in str(info.value)


@pytest.mark.parametrize(
    "src, column",
    [("2*+x1", 3), ("x1 +", 5), ("foo(x1)", 1), ("max(x1)", 1), ("x1 x2", 4), ("(x1", 4), ("w1", 1)],
)
def test_syntax_errors_report_position(src, column):
    with pytest.raises(ExprSyntaxError) as info:
        parse(src)
    assert info.value.line == 1
    assert info.value.column == column


def test_syntax_error_on_second_line():
    with pytest.raises(ExprSyntaxError) as info:
        parse("x1 +\n * 2")
    assert (info.value.line, info.value.column) == (2, 2)


def test_dimension_checks():
    with pytest.raises(ExprSyntaxError):
        parse("x3", Dims(k=2))
    with pytest.raises(ExprSyntaxError):
        parse("y1", Dims(allow=frozenset({"t", "x"})))
    assert parse("z2_1", Dims(d=1, own=2)) == Var("z1")
    with pytest.raises(DiagonalityError):
        parse("z1_1", Dims(d=1, own=2))


def test_evaluate_array_broadcasts_constants():
    out = evaluate_array(parse("3"), {}, (4,))
    assert out.shape == (4,) and np.all(out == 3.0)


def test_lipschitz_probe_linear():
    est = lipschitz_probe(parse("2*y1"), {"y1": (-10, 10)}, samples=500)
    assert est.estimate == pytest.approx(2.0, abs=1e-9)


def test_lipschitz_probe_ramp():
    est = lipschitz_probe(parse("max(y1, 0)"), {"y1": (-10, 10)}, samples=2000)
    # brute-force pairwise oracle on a dense grid
    y = np.linspace(-10, 10, 401)
    f = np.maximum(y, 0)
    dense = np.max(np.abs(np.diff(f)) / np.diff(y))
    assert dense == pytest.approx(1.0)
    assert est.estimate == pytest.approx(dense, abs=1e-6)


def test_lipschitz_probe_square_on_box():
    est = lipschitz_probe(parse("y1^2"), {"y1": (-10, 10)}, samples=5000)
    y = np.linspace(-10, 10, 100001)
    dense = np.max(np.abs(2 * y))
    assert dense == 20.0
    assert 0.99 * dense <= est.estimate <= dense


def test_lipschitz_probe_flags_declared():
    with pytest.warns(UserWarning, match="exceeds declared"):
        est = lipschitz_probe(parse("3*z1"), {"z1": (-1, 1)}, samples=200, declared=1.0)
    assert est.exceeds_declared


# ------------------------------------------------------------- properties

leaf = st.one_of(
    st.floats(-1e6, 1e6, allow_nan=False).map(Num),
    st.sampled_from(["t", "x1", "x2", "y1", "y2", "z1"]).map(Var),
)


def _extend(children):
    unary = children.map(lambda c: Unary("-", c))
    binary = st.builds(Binary, st.sampled_from(["+", "-", "*", "/", "^"]), children, children)
    one = st.builds(lambda n, a: Call(n, (a,)), st.sampled_from([n for n, k in FUNCTIONS.items() if k == 1]), children)
    two = st.builds(lambda n, a, b: Call(n, (a, b)), st.sampled_from([n for n, k in FUNCTIONS.items() if k == 2]),
                    children, children)
    return st.one_of(unary, binary, one, two)


def _depth(e) -> int:
    if isinstance(e, (Num, Var)):
        return 0
    if isinstance(e, Unary):
        return 1 + _depth(e.operand)
    if isinstance(e, Binary):
        return 1 + max(_depth(e.left), _depth(e.right))
    return 1 + max(_depth(a) for a in e.args)


exprs = st.recursive(leaf, _extend, max_leaves=40).filter(lambda e: _depth(e) <= 8)


@settings(max_examples=PROPERTY_CASES)
@given(e=exprs)
def test_print_parse_round_trip(e):
    src = to_source(e)
    assert parse(src) == e
    assert to_source(parse(src)) == src


point = st.fixed_dictionaries({v: st.floats(-3, 3) for v in ["t", "x1", "x2", "y1", "y2", "z1"]})


@settings(max_examples=PROPERTY_CASES)
@given(e=exprs, env=point)
def test_evaluate_deterministic_or_domain_error(e, env):
    def run():
        try:
            return ("ok", evaluate(e, env))
        except NumericalDomainError:
            return ("domain", None)

    first = run()
    assert run() == first
    if first[0] == "ok":
        assert math.isfinite(first[1])


@settings(max_examples=PROPERTY_CASES)
@given(
    a=st.lists(st.floats(-10, 10), min_size=2, max_size=2),
    b=st.floats(-10, 10),
    c=st.floats(-10, 10),
)
def test_lipschitz_probe_exact_bound_on_affine(a, b, c):
    e = parse(f"({a[0]!r})*y1 + ({a[1]!r})*y2 + ({b!r})*z1 + ({c!r})*x1")
    est = lipschitz_probe(e, {"y1": (-5, 5), "y2": (-5, 5), "z1": (-5, 5), "x1": (-5, 5)}, samples=200)
    # |a . dy + b dz| <= max(|a|, |b|) (|dy| + |dz|)
    true = max(math.hypot(*a), abs(b))
    assert est.estimate <= true * (1 + 1e-9) + 1e-12
