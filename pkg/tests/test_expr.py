import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import central_difference, relative_error

from kindisc.expr import (
    BinOp,
    ExpressionError,
    GrammarError,
    Num,
    Param,
    UnsupportedContextError,
    Var,
    bind,
    canonical_form,
    complexity,
    differentiate,
    evaluate,
    finite_difference,
    n_params,
    parametrize,
    parse,
    random_tree,
    serialize,
    structurally_equal,
    variables,
)

OPS = ("+", "-", "*", "/", "exp")


def _tree(seed, names=("t",), max_depth=4):
    rng = np.random.default_rng(seed)
    return random_tree(rng, OPS, names, max_depth=max_depth, method="grow")


# evaluate

def test_evaluate_constant():
    assert evaluate(parse("p1"), [5.0]) == 5.0


def test_evaluate_exponential_decay_at_zero():
    assert evaluate(parse("exp(p1 - t/p2)", ["t"]), [math.log(5), 1.0], {"t": 0.0}) == pytest.approx(5.0, abs=1e-14)


def test_evaluate_n2o_rate_by_hand():
    tree = parse("(p1*C*C)/(1 + p2*C)", ["C"])
    assert evaluate(tree, [2.0, 5.0], {"C": 5.0}) == pytest.approx(50.0 / 26.0, rel=1e-15)


def test_evaluate_division_by_zero_is_non_finite():
    assert not np.isfinite(evaluate(parse("1/t", ["t"]), [], {"t": 0.0}))


def test_evaluate_overflow_is_non_finite():
    assert not np.isfinite(evaluate(parse("exp(exp(t))", ["t"]), [], {"t": 10.0}))


def test_evaluate_rejects_wrong_theta_length():
    with pytest.raises(ExpressionError):
        evaluate(parse("p1*t", ["t"]), [1.0, 2.0], {"t": 1.0})


def test_evaluate_rejects_missing_variable():
    with pytest.raises(ExpressionError):
        evaluate(parse("p1*t", ["t"]), [1.0], {})


# differentiate

def test_derivative_of_constant_is_zero():
    d = differentiate(parse("p1"))
    assert d == Num(0.0)
    assert serialize(d) == "0.0"


def test_derivative_chain_rule():
    tree = parse("exp(p1 - t/p2)", ["t"])
    expected = parse("(0 - 1/p2) * exp(p1 - t/p2)", ["t"])
    t = np.linspace(0, 10, 7)
    theta = [0.3, 2.0]
    np.testing.assert_allclose(evaluate(differentiate(tree), theta, {"t": t}), evaluate(expected, theta, {"t": t}),
                               rtol=1e-15)


def test_derivative_quotient_rule_value():
    d = differentiate(parse("p1/(p2 + t)", ["t"]))
    assert evaluate(d, [10.0, 2.0], {"t": 0.0}) == pytest.approx(-2.5, rel=1e-15)
    assert finite_difference(parse("p1/(p2 + t)", ["t"]), [10.0, 2.0], 0.0) == pytest.approx(-2.5, rel=1e-8)


def test_derivative_rejects_multivariable_tree():
    with pytest.raises(UnsupportedContextError):
        differentiate(parse("CA*CB", ["CA", "CB"]))


@settings(max_examples=150, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.1, 9.9))
def test_derivative_matches_central_difference(seed, t):
    tree = _tree(seed)
    exact = float(np.broadcast_to(evaluate(differentiate(tree), [], {"t": np.array([t])}), (1,))[0])
    ref = central_difference(tree, t)
    if ref is None or not np.isfinite(exact):
        return
    assert relative_error(exact, ref) <= 1e-6


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_derivative_stays_in_grammar(seed):
    tree = _tree(seed)
    d = differentiate(tree)
    assert complexity(d) < 10**6
    assert set(variables(d)) <= {"t"}
    assert structurally_equal(parse(serialize(d), ["t"]), d) or serialize(parse(serialize(d), ["t"])) == serialize(d)


# complexity

@pytest.mark.parametrize("text,expected", [("p1", 1), ("exp(p1 - t)", 4), ("(p1 - t)/(p2 + t)", 7)])
def test_complexity_examples(text, expected):
    assert complexity(parse(text, ["t"])) == expected


# serialization

def test_round_trip_n2o_rate():
    tree = parse("(p1*CNO*CNO)/(1+p2*CNO)", ["CNO"])
    text = serialize(tree)
    again = parse(text, ["CNO"])
    assert again == tree
    assert serialize(again) == text


def test_parse_rejects_unknown_function():
    with pytest.raises(GrammarError):
        parse("sin(t)", ["t"])


def test_parse_rejects_dangling_operator():
    with pytest.raises(GrammarError):
        parse("p1 +", ["t"])


def test_parse_rejects_unbalanced_parentheses():
    with pytest.raises(GrammarError):
        parse("(p1 + t", ["t"])


def test_parse_rejects_unknown_variable():
    with pytest.raises(GrammarError):
        parse("p1 * x", ["t"])


def test_parse_rejects_parameter_gaps():
    with pytest.raises(ExpressionError):
        parse("p1 * p3", [])


def test_negative_literal_round_trips():
    tree = BinOp("*", Num(-2.5), Var("t"))
    assert parse(serialize(tree), ["t"]) == tree


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_serialize_parse_fixed_point(seed):
    tree = _tree(seed, names=("t", "CA"))
    text = serialize(tree)
    back = parse(text, ["t", "CA"])
    assert back == tree
    assert serialize(back) == text


# parameters

@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_parametrize_then_bind_is_identity(seed):
    tree = _tree(seed)
    ptree, theta = parametrize(tree)
    assert n_params(ptree) == theta.size
    assert not any(isinstance(n, Num) for n in _nodes(ptree))
    assert bind(ptree, theta) == tree


def _nodes(tree):
    from kindisc.expr import walk

    return list(walk(tree))


def test_parametrize_numbers_slots_in_preorder():
    ptree, theta = parametrize(parse("3*t + 4", ["t"]))
    assert serialize(ptree) == "((p1 * t) + p2)"
    assert theta.tolist() == [3.0, 4.0]


# structural equivalence

@pytest.mark.parametrize("a,b", [
    ("p1*CNO*CNO/(1 + p2*CNO)", "CNO*CNO/(3.2 + CNO*1.5)"),
    ("p1*CNO*CNO/(1 + p2*CNO)", "((p1*CNO)/(CNO + p2))*(CNO + CNO)"),
    ("(p1*CA - p2*CB)/(p3*CA + p4*CB + p5)", "(CA - 4*CB)/(CA*2 + (0.3 + CB*p1))"),
    ("p1*t", "t*p1*2"),
    ("p1 + t", "t + p1"),
])
def test_structurally_equal_up_to_constants(a, b):
    names = ["CNO", "CA", "CB", "t"]
    assert structurally_equal(parse(a, names, check_params=False), parse(b, names, check_params=False))


@pytest.mark.parametrize("a,b", [
    ("p1*CNO*CNO/(1 + p2*CNO)", "CNO*CNO/(p1 + CNO)"),
    ("CA - CB", "CA + CB"),
    ("p1*t", "t"),
    ("p1*(t + CNO)", "p1*t + p2*CNO"),
])
def test_structurally_distinct(a, b):
    names = ["CNO", "CA", "CB", "t"]
    assert not structurally_equal(parse(a, names, check_params=False), parse(b, names, check_params=False))


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_canonical_form_ignores_constant_values(seed):
    tree = _tree(seed)
    ptree, theta = parametrize(tree)
    other = bind(ptree, theta * 1.7 + 0.3)
    assert canonical_form(tree) == canonical_form(ptree) == canonical_form(other) or _has_special(theta)


def _has_special(theta):
    # 0, 1 and -1 are structural in the canonical form (x*1 == x, x+0 == x)
    return any(v in (0.0, 1.0, -1.0) for v in theta) or any(v in (0.0, 1.0, -1.0) for v in theta * 1.7 + 0.3)


def test_param_leaf_types():
    tree = parse("p1 + t", ["t"])
    assert isinstance(tree, BinOp) and isinstance(tree.left, Param) and isinstance(tree.right, Var)
