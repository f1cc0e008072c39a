import json

import numpy as np
import pytest

from conftest import grid_panel
from factorloop.grammar import (
    ArityError,
    BudgetError,
    Expr,
    ExprError,
    ExprSyntaxError,
    LookaheadError,
    UnknownOperatorError,
    WindowError,
    call,
    complexity,
    const,
    cs_rank,
    dump_library,
    evaluate,
    load_library,
    parse_expr,
    prim,
    read_expr_file,
    render,
    structural_hash,
    validate_no_lookahead,
)
from factorloop.panel import build_primitives


def test_lag_ret_two_nodes():
    e = parse_expr("lag(ret, 1)")
    assert complexity(e) == (2, 2)
    assert render(e) == "lag(ret, 1)"


def test_negative_window_rejected():
    with pytest.raises(WindowError):
        parse_expr("lag(ret, -1)")


def test_zero_window_rolling_rejected():
    with pytest.raises(WindowError):
        parse_expr("rolling_mean(price, 0)")


def test_depth_budget_cites_depth():
    text = "neg(" * 6 + "ret" + ")" * 6
    with pytest.raises(BudgetError) as exc:
        parse_expr(text, max_depth=6)
    assert exc.value.value == 7 and "7" in str(exc.value)


def test_node_budget():
    text = "add(" * 12 + "ret" + ", ret)" * 12  # 25 nodes
    with pytest.raises(BudgetError) as exc:
        parse_expr(text, max_depth=20, max_nodes=24)
    assert exc.value.kind == "nodes"


def test_exact_max_depth_ok():
    text = "neg(" * 5 + "ret" + ")" * 5
    e = parse_expr(text, max_depth=6)
    assert complexity(e)[0] == 6
    assert validate_no_lookahead(e) == []


def test_errors_are_distinct():
    with pytest.raises(UnknownOperatorError):
        parse_expr("lead(ret, 1)")
    with pytest.raises(UnknownOperatorError):
        parse_expr("neg(tomorrow)")
    with pytest.raises(ArityError):
        parse_expr("add(ret)")
    with pytest.raises(ExprSyntaxError):
        parse_expr("add(ret, price")
    with pytest.raises(ExprSyntaxError):
        parse_expr("")


def test_own_return_lag_zero_is_lookahead():
    e = Expr("lag", (prim("ret"),), window=0)
    problems = validate_no_lookahead(e)
    assert any(isinstance(p, LookaheadError) for p in problems)
    with pytest.raises(LookaheadError):
        parse_expr("lag(ret, 0)")
    # lag 0 of other primitives is allowed
    assert validate_no_lookahead(parse_expr("lag(volume, 0)")) == []


def test_complexity_examples():
    assert complexity(prim("ret")) == (1, 1)
    assert complexity(parse_expr("add(ret, ret)")) == (2, 3)


def _count(e):
    if e.op in ("prim", "const"):
        return 1, 1
    sub = [_count(a) for a in e.args]
    return 1 + max(d for d, _ in sub), 1 + sum(n for _, n in sub)


def _random_expr(rng, depth):
    from factorloop.grammar import BINARY, CROSS_SECTIONAL, UNARY, WINDOWED

    from factorloop.panel import PRIMITIVES

    if depth <= 1 or rng.random() < 0.25:
        return prim(str(rng.choice(PRIMITIVES))) if rng.random() > 0.1 else const(float(rng.integers(1, 5)))
    kind = rng.integers(4)
    if kind == 0:
        return call(str(rng.choice(UNARY)), _random_expr(rng, depth - 1))
    if kind == 1:
        return call(str(rng.choice(BINARY)), _random_expr(rng, depth - 1), _random_expr(rng, depth - 1))
    if kind == 2:
        op = str(rng.choice(WINDOWED))
        child = _random_expr(rng, depth - 1)
        return call(op, child, window=int(rng.integers(1, 6)))
    return call(str(rng.choice(CROSS_SECTIONAL)), _random_expr(rng, depth - 1))


def test_complexity_matches_recursive_oracle():
    rng = np.random.default_rng(11)
    for _ in range(200):
        e = _random_expr(rng, 6)
        assert complexity(e) == _count(e)


def test_roundtrip_and_hash():
    rng = np.random.default_rng(12)
    for _ in range(200):
        e = _random_expr(rng, 5)
        text = render(e)
        again = parse_expr(text, 99, 999)
        assert render(again) == text
        assert structural_hash(again) == structural_hash(e)
    assert render(parse_expr("  cs_rank( delta(volume,1) ) ")) == "cs_rank(delta(volume, 1))"


def test_hash_equality_iff_text_equality():
    a, b, c = parse_expr("add(ret, price)"), parse_expr("add( ret,price )"), parse_expr("add(price, ret)")
    assert structural_hash(a) == structural_hash(b)
    assert structural_hash(a) != structural_hash(c)


def test_constants_render():
    e = parse_expr("mul(ret, 2)")
    assert render(e) == "mul(ret, 2.0)"
    assert render(parse_expr("mul(ret, -0.5)")) == "mul(ret, -0.5)"


# ---------------------------------------------------------------- evaluation


def _panel(T=6, N=3, seed=0):
    rng = np.random.default_rng(seed)
    return grid_panel({"ret": rng.normal(0, 0.02, (T, N)), "price": rng.uniform(5, 20, (T, N)), "volume": rng.uniform(1e3, 1e4, (T, N))})


def test_lag_definition():
    p = _panel()
    v = evaluate(parse_expr("lag(ret, 1)"), p).values
    np.testing.assert_array_equal(v[1:], p.fields["ret"][:-1])
    assert np.isnan(v[0]).all()


def test_lag_skips_gaps():
    present = np.ones((5, 1), bool)
    present[2] = False
    ret = np.arange(5.0)[:, None]
    p = grid_panel({"ret": ret}, present)
    v = evaluate(parse_expr("lag(ret, 1)"), p).values[:, 0]
    assert v[3] == 1.0  # previous trading date of this stock
    assert np.isnan(v[2])


def test_rolling_mean_hand():
    p = grid_panel({"price": np.array([[1.0], [2.0], [3.0], [4.0]])})
    v = evaluate(parse_expr("rolling_mean(price, 3)"), p).values[:, 0]
    assert v[3] == 3.0
    assert np.isnan(v[:2]).all()


def test_windowed_ops_hand():
    x = np.array([[3.0], [1.0], [4.0], [1.0], [5.0]])
    p = grid_panel({"price": x})
    ev = lambda s: evaluate(parse_expr(s), p).values[:, 0]
    assert ev("rolling_sum(price, 2)")[4] == 6.0
    assert ev("rolling_max(price, 3)")[4] == 5.0
    assert ev("rolling_min(price, 3)")[4] == 1.0
    assert ev("delta(price, 2)")[4] == 5.0 - 4.0
    assert ev("rolling_std(price, 3)")[4] == pytest.approx(np.std([4.0, 1.0, 5.0], ddof=1))


def test_cs_rank_examples():
    np.testing.assert_array_equal(cs_rank([10.0, 20.0, 30.0]), [0.0, 0.5, 1.0])
    np.testing.assert_array_equal(cs_rank([3.0, 1.0, 3.0]), [0.75, 0.0, 0.75])
    np.testing.assert_array_equal(cs_rank([2.0, 2.0, 2.0, 2.0]), [0.5] * 4)
    n = 7
    np.testing.assert_allclose(cs_rank(np.arange(n) * 1.0), np.arange(n) / (n - 1))
    np.testing.assert_array_equal(cs_rank([np.nan, 4.0]), [np.nan, 0.5])


def test_cs_rank_via_evaluate():
    p = grid_panel({"price": np.array([[10.0, 20.0, 30.0]])})
    np.testing.assert_array_equal(evaluate(parse_expr("cs_rank(price)"), p).values[0], [0.0, 0.5, 1.0])


def test_protected_div_and_no_inf():
    p = grid_panel({"price": np.array([[1.0, 2.0, 3.0]]), "ret": np.array([[0.0, 1e-13, 2.0]])})
    v = evaluate(parse_expr("div(price, ret)"), p).values[0]
    assert np.isnan(v[0]) and np.isnan(v[1]) and v[2] == 1.5


def test_overflow_saturates_to_missing():
    p = grid_panel({"price": np.array([[1e300, 2.0]])})
    fs = evaluate(parse_expr("mul(price, price)"), p)
    assert np.isnan(fs.values[0, 0]) and fs.values[0, 1] == 4.0
    assert fs.overflow == 1


def test_log1p_of_positive():
    p = grid_panel({"ret": np.array([[-0.5, 0.0, 1.0]])})
    v = evaluate(parse_expr("log1p(ret)"), p).values[0]
    assert np.isnan(v[0]) and v[1] == 0.0 and v[2] == pytest.approx(np.log(2.0))


def test_missing_propagates():
    present = np.array([[True, False]])
    p = grid_panel({"price": np.array([[1.0, 2.0]])}, present)
    v = evaluate(parse_expr("add(price, 1)"), p).values
    assert np.isnan(v[0, 1])


def test_evaluate_window_truncates(small_planted):
    p = build_primitives(small_planted)
    e = parse_expr("rolling_mean(vol_ratio, 5)")
    full = evaluate(e, p).values
    part = evaluate(e, p, start=str(p.dates[50]), end=str(p.dates[100]))
    assert part.values.shape[0] == 51
    np.testing.assert_array_equal(part.values, full[50:101])


def test_cs_rank_monotone_invariance():
    rng = np.random.default_rng(3)
    x = rng.normal(size=50)
    np.testing.assert_array_equal(cs_rank(x), cs_rank(np.exp(3 * x) + 7))


# ---------------------------------------------------------------- files


def test_expr_file():
    exprs = read_expr_file(["# header", "neg(ret)  # trailing", "", "cs_rank(volume)"])
    assert [render(e) for e in exprs] == ["neg(ret)", "cs_rank(volume)"]


def test_library_requires_rationale():
    good = [{"id": "F1", "expr": "neg(vol_ratio)", "rationale": "attention reversal"}]
    entries = load_library(json.dumps(good))
    assert json.loads(dump_library(entries)) == good
    with pytest.raises(ExprError):
        load_library(json.dumps([{"id": "F1", "expr": "neg(ret)", "rationale": "  "}]))
