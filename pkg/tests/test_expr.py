import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from aslyap import expr as ex


def test_parse_and_evaluate_basics():
    node = ex.parse_expr("2*x1 + x2^2 - 1")
    assert ex.evaluate(node, {"x1": 3.0, "x2": 2.0}) == pytest.approx(9.0)
    assert ex.evaluate(ex.parse_expr("min(1, 2) + max(3, -1)"), {}) == 4.0
    assert ex.evaluate(ex.parse_expr("-x1^2"), {"x1": 2.0}) == -4.0  # unary binds after ^
    assert ex.evaluate(ex.parse_expr("2^3^2"), {}) == 512.0  # right-associative


def test_vectorized_evaluation():
    node = ex.parse_expr("sin(x1)*exp(x2)")
    x1 = np.array([0.0, np.pi / 2])
    x2 = np.array([0.0, 1.0])
    out = ex.evaluate(node, {"x1": x1, "x2": x2})
    assert out == pytest.approx([0.0, np.e])


def test_syntax_error_positions():
    with pytest.raises(ex.ExprError) as err:
        ex.parse_expr("x1 + ")
    assert err.value.pos == 5
    with pytest.raises(ex.ExprError):
        ex.parse_expr("x1 + * x2")
    with pytest.raises(ex.ExprError) as err:
        ex.parse_expr("x1 $ 2")
    assert "$" in str(err.value)
    with pytest.raises(ex.ExprError):
        ex.parse_expr("foo(x1)")  # unknown function
    with pytest.raises(ex.ExprError):
        ex.parse_expr("min(x1)")  # wrong arity


def test_unknown_identifier_rejected_at_compile():
    node = ex.parse_expr("x1 + bogus")
    with pytest.raises(ex.ExprError, match="bogus"):
        ex.compile_fn(node, ["x1"])


def test_compiled_matches_tree_eval():
    node = ex.parse_expr("abs(x1)*sqrt(x2) + min(x1, x2) - log(x2)")
    fn = ex.compile_fn(node, ["x1", "x2"])
    rng = np.random.Generator(np.random.Philox(key=1))
    x1 = rng.uniform(-2, 2, 64)
    x2 = rng.uniform(0.1, 3, 64)
    assert np.array_equal(fn(x1, x2), ex.evaluate(node, {"x1": x1, "x2": x2}))


@pytest.mark.parametrize(
    "text",
    [
        "x1^3 - 2*x1 + 1",
        "sin(x1)*cos(x1)",
        "exp(-x1^2)",
        "sqrt(x1^2 + 0.5)",
        "abs(x1 - 0.2)",
        "min(x1^2, 2*x1 + 3)",
        "x1 / (1 + x1^2)",
        "log(x1^2 + 1)",
    ],
)
def test_analytic_derivative_matches_central_difference(text):
    node = ex.parse_expr(text)
    d = ex.diff(node, "x1")
    rng = np.random.Generator(np.random.Philox(key=7))
    xs = rng.uniform(0.3, 1.7, 100)
    h = 1e-5
    fd = (ex.evaluate(node, {"x1": xs + h}) - ex.evaluate(node, {"x1": xs - h})) / (2 * h)
    an = ex.evaluate(d, {"x1": xs}) + np.zeros_like(xs)
    scale = 1.0 + np.abs(an)
    assert np.all(np.abs(an - fd) <= 10 * h**2 * scale + 1e-10)


def test_second_derivative_chain():
    node = ex.parse_expr("exp(x1^2)")
    d2 = ex.diff(ex.diff(node, "x1"), "x1")
    # d2/dx2 exp(x^2) = (2 + 4 x^2) exp(x^2)
    x = 0.7
    expected = (2 + 4 * x**2) * np.exp(x**2)
    assert ex.evaluate(d2, {"x1": x}) == pytest.approx(expected, rel=1e-12)


def test_abs_derivative_sign_convention():
    d = ex.diff(ex.parse_expr("abs(x1)"), "x1")
    assert ex.evaluate(d, {"x1": 2.0}) == 1.0
    assert ex.evaluate(d, {"x1": -2.0}) == -1.0


def test_simplify_folds_constants():
    node = ex.parse_expr("0*x1 + 1*x2 + (2 + 3)")
    assert ex.simplify(node) == ex.Bin("+", ex.Var("x2"), ex.Num(5.0))


_leaf = st.one_of(
    st.floats(min_value=-3, max_value=3, allow_nan=False).map(
        lambda v: ex.Num(float(np.round(v, 3)))
    ),
    st.sampled_from(["x1", "x2"]).map(ex.Var),
)


def _neg(t):
    # mirror the parser's canonical form: unary minus folds into literals
    return ex.Num(-t.value) if isinstance(t, ex.Num) else ex.Neg(t)


def _trees(depth):
    if depth == 0:
        return _leaf
    sub = _trees(depth - 1)
    return st.one_of(
        _leaf,
        st.tuples(st.sampled_from("+-*"), sub, sub).map(lambda t: ex.Bin(t[0], t[1], t[2])),
        sub.map(_neg),
        st.tuples(st.sampled_from(["sin", "cos", "exp"]), sub).map(
            lambda t: ex.Call(t[0], (t[1],))
        ),
        st.tuples(st.sampled_from(["min", "max"]), sub, sub).map(
            lambda t: ex.Call(t[0], (t[1], t[2]))
        ),
    )


@given(tree=_trees(3))
@settings(max_examples=200, deadline=None)
def test_source_round_trip(tree):
    # rendering and reparsing preserves the tree exactly
    assert ex.parse_expr(ex.to_source(tree)) == tree
