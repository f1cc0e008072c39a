import math

import numpy as np
import pytest

from factorloop.metrics import (
    EvalConfig,
    EvalMetrics,
    equity_curve,
    evaluate_factor,
    ic_tstat,
    long_only_ic,
    long_short_returns,
    max_drawdown,
    perf_summary,
    quantile_assign,
    quantile_returns,
    quantile_sort,
    rank_ic,
)


def _spearman_oracle(a, b):
    """Rank both vectors by brute force (average ties) then Pearson."""

    def ranks(x):
        r = np.empty(len(x))
        for i, v in enumerate(x):
            less = sum(1 for w in x if w < v)
            equal = sum(1 for w in x if w == v)
            r[i] = less + (equal + 1) / 2.0
        return r

    ra, rb = ranks(a), ranks(b)
    ra -= ra.mean()
    rb -= rb.mean()
    return float((ra * rb).sum() / math.sqrt((ra * ra).sum() * (rb * rb).sum()))


# ---------------------------------------------------------------- rank IC


def test_ic_perfect_and_inverse():
    rng = np.random.default_rng(0)
    r = rng.normal(size=(1, 30))
    assert rank_ic(r, r)[0] == pytest.approx(1.0)
    assert rank_ic(-r, r)[0] == pytest.approx(-1.0)


def test_ic_matches_bruteforce_spearman():
    rng = np.random.default_rng(1)
    for _ in range(50):
        a = rng.normal(size=8)
        b = rng.normal(size=8)
        a[rng.integers(8)] = a[0]  # force a tie now and then
        assert rank_ic(a[None], b[None], min_names=5)[0] == pytest.approx(_spearman_oracle(a, b), abs=1e-12)


def test_ic_excludes_thin_and_flat_dates():
    rng = np.random.default_rng(2)
    s = rng.normal(size=(3, 12))
    f = rng.normal(size=(3, 12))
    s[0, 3:] = np.nan  # only 3 names
    s[1] = 1.0  # no dispersion
    ic = rank_ic(s, f)
    assert np.isnan(ic[0]) and np.isnan(ic[1]) and np.isfinite(ic[2])


def test_ic_uses_joint_finite_names():
    rng = np.random.default_rng(3)
    s = rng.normal(size=20)
    f = rng.normal(size=20)
    f[[2, 7]] = np.nan
    keep = np.isfinite(f)
    assert rank_ic(s[None], f[None])[0] == pytest.approx(_spearman_oracle(s[keep], f[keep]), abs=1e-12)


def test_ic_monotone_invariance():
    rng = np.random.default_rng(4)
    s = rng.normal(size=(20, 40))
    f = rng.normal(size=(20, 40))
    np.testing.assert_allclose(rank_ic(s, f), rank_ic(np.exp(2 * s) - 3, f), atol=1e-12)


# ---------------------------------------------------------------- t-stat


def test_ic_tstat_examples():
    mean, t, _ = ic_tstat([0.1, -0.1])
    assert mean == 0 and t == 0
    mean, t, icir = ic_tstat([0.02, 0.04, 0.06])
    assert mean == pytest.approx(0.04)
    assert t == pytest.approx(0.04 / (0.02 / math.sqrt(3)), rel=1e-12)
    assert t == pytest.approx(3.4641016, abs=1e-6)
    assert icir == pytest.approx(2.0)
    mean, t, icir = ic_tstat([0.03] * 5)
    assert math.isnan(t) and math.isnan(icir)


def test_ic_tstat_ignores_nan_and_short():
    assert ic_tstat([0.02, np.nan, 0.04, 0.06])[1] == pytest.approx(3.4641016, abs=1e-6)
    assert math.isnan(ic_tstat([0.1])[1])


# ---------------------------------------------------------------- quantiles


def test_quantile_sort_exact_division():
    s = np.array([5.0, 1.0, 9.0, 3.0, 7.0, 2.0, 8.0, 4.0, 6.0, 10.0])
    q = quantile_sort(s, 10)
    np.testing.assert_array_equal(q, s.astype(int))
    assert q[np.argmax(s)] == 10


def test_quantile_sort_remainder_goes_to_bottom():
    q = quantile_sort(np.arange(11.0), 10)
    sizes = np.bincount(q, minlength=11)[1:]
    assert sizes.tolist() == [2] + [1] * 9


def test_quantile_sort_matches_sort_slice_oracle():
    rng = np.random.default_rng(5)
    s = rng.normal(size=100)
    q = quantile_sort(s, 5)
    order = np.argsort(s)
    expected = np.zeros(100, int)
    for k in range(5):
        expected[order[20 * k : 20 * (k + 1)]] = k + 1
    np.testing.assert_array_equal(q, expected)


def test_quantile_sort_thin_date_skipped():
    assert quantile_sort(np.arange(4.0), 5) is None
    buckets, skipped = quantile_assign(np.array([np.arange(4.0), np.arange(4.0)]), 2)
    assert not skipped.any()
    _, skipped = quantile_assign(np.array([[1.0, np.nan, np.nan], [1.0, 2.0, 3.0]]), 2)
    assert skipped.tolist() == [True, False]


def test_quantile_ties_break_by_stock_order():
    q = quantile_sort(np.ones(4), 2)
    assert q.tolist() == [1, 1, 2, 2]


def test_long_short_hand():
    buckets = np.array([[1, 1, 2, 2]])
    returns = np.array([[0.00, 0.02, 0.02, 0.04]])
    assert long_short_returns(buckets, returns, 2)[0] == pytest.approx(0.02)
    assert long_short_returns(buckets, np.full((1, 4), 0.01), 2)[0] == 0.0


def test_long_short_leg_mean_oracle():
    rng = np.random.default_rng(6)
    s = rng.normal(size=(50, 37))
    r = rng.normal(0, 0.02, size=(50, 37))
    buckets, _ = quantile_assign(s, 5)
    spread = long_short_returns(buckets, r, 5)
    for t in range(50):
        order = np.argsort(s[t], kind="stable")
        top = r[t, order[-7:]].mean()  # 37 = 5*7 + 2, extras go to the bottom buckets
        bottom = r[t, order[:8]].mean()
        assert spread[t] == pytest.approx(top - bottom, abs=1e-15)


def test_spread_of_negation_is_negated():
    rng = np.random.default_rng(7)
    s = rng.normal(size=(30, 40))
    r = rng.normal(size=(30, 40))
    a, _ = quantile_assign(s, 10)
    b, _ = quantile_assign(-s, 10)
    np.testing.assert_allclose(long_short_returns(a, r, 10), -long_short_returns(b, r, 10), atol=1e-15)


def test_quantile_returns_empty_bucket_nan():
    qr = quantile_returns(np.array([[1, 1, 0]]), np.array([[0.1, 0.3, 9.0]]), 2)
    assert qr[0, 0] == pytest.approx(0.2) and np.isnan(qr[0, 1])


# ---------------------------------------------------------------- performance


def _mdd_oracle(p):
    worst = 0.0
    for i in range(len(p)):
        for j in range(i, len(p)):
            worst = max(worst, (p[i] - p[j]) / p[i])
    return worst


def test_max_drawdown_examples():
    assert max_drawdown([100, 50, 75]) == pytest.approx(0.5)
    assert max_drawdown([1, 1, 2, 3, 3, 4]) == 0.0


def test_max_drawdown_all_pairs_oracle():
    rng = np.random.default_rng(8)
    for _ in range(30):
        p = equity_curve(rng.normal(0, 0.03, size=60))
        assert max_drawdown(p) == pytest.approx(_mdd_oracle(p), abs=1e-14)


def test_sharpe_formula():
    r = np.array([0.011, -0.009] * 50)  # mean 0.001
    sd = r.std(ddof=1)
    perf = perf_summary(r)
    assert perf.sharpe == pytest.approx(math.sqrt(252) * 0.001 / sd, rel=1e-12)
    # a series with exactly mean 0.001, std 0.01
    z = np.random.default_rng(9).normal(size=500)
    z = (z - z.mean()) / z.std(ddof=1)
    assert perf_summary(0.001 + 0.01 * z).sharpe == pytest.approx(1.5875, abs=1e-4)


def test_perf_other_fields():
    r = np.array([0.01, -0.02, 0.015, 0.005, -0.01])
    perf = perf_summary(r)
    growth = np.prod(1 + r)
    assert perf.ann_return == pytest.approx(growth ** (252 / 5) - 1)
    assert perf.ann_vol == pytest.approx(math.sqrt(252) * r.std(ddof=1))
    downside = math.sqrt(np.mean(np.minimum(r, 0) ** 2))
    assert perf.sortino == pytest.approx(math.sqrt(252) * r.mean() / downside)
    assert perf.max_drawdown == pytest.approx(_mdd_oracle(equity_curve(r)))
    assert perf.calmar == pytest.approx(perf.ann_return / perf.max_drawdown)


def test_perf_degenerate():
    flat = perf_summary(np.full(10, 0.001))
    assert math.isnan(flat.sharpe) and "zero_volatility" in flat.flags
    assert math.isnan(flat.calmar) and "zero_drawdown" in flat.flags
    assert "too_short" in perf_summary([0.01]).flags


def test_sharpe_length_invariant_on_duplication():
    r = np.random.default_rng(10).normal(0.001, 0.01, 40)
    assert perf_summary(np.concatenate([r, r])).sharpe == pytest.approx(perf_summary(r).sharpe, rel=0.02)
    # the population ratio is exactly invariant; the sample ratio differs only by the ddof factor
    n = r.size
    ratio = math.sqrt((2 * n - 1) / (2 * (n - 1)))
    assert perf_summary(np.concatenate([r, r])).sharpe == pytest.approx(perf_summary(r).sharpe * ratio, abs=1e-12)


# ---------------------------------------------------------------- long-only IC


def test_icl_full_universe_equals_ic():
    rng = np.random.default_rng(11)
    s = rng.normal(size=(40, 30))
    f = rng.normal(size=(40, 30))
    np.testing.assert_array_equal(long_only_ic(s, f, 1.0), rank_ic(s, f))


def test_icl_top_half_perfect():
    rng = np.random.default_rng(12)
    s = rng.permutation(40).astype(float)
    f = rng.normal(size=40)
    top = s >= 20
    f[top] = s[top] * 0.01  # perfectly ordered within the top half
    assert long_only_ic(s[None], f[None], 0.5)[0] == pytest.approx(1.0)


def test_icl_subset_oracle():
    rng = np.random.default_rng(13)
    s = rng.normal(size=(10, 41))
    f = rng.normal(size=(10, 41))
    icl = long_only_ic(s, f, 0.5)
    for t in range(10):
        top = np.argsort(s[t])[-21:]
        assert icl[t] == pytest.approx(_spearman_oracle(s[t, top], f[t, top]), abs=1e-12)
    with pytest.raises(ValueError):
        long_only_ic(s, f, 0.0)


# ---------------------------------------------------------------- evaluate_factor


def test_evaluate_factor_hash_and_roundtrip():
    rng = np.random.default_rng(14)
    v = rng.normal(size=(80, 30))
    f = 0.01 * v + rng.normal(0, 0.02, size=(80, 30))
    cfg = EvalConfig()
    m = evaluate_factor(v, f, cfg)
    assert m.config_hash == cfg.config_hash()
    assert m.mean_ic > 0.1 and m.ic_tstat > 3
    assert 0 < m.avg_coverage <= 1
    again = EvalMetrics.from_dict(m.to_dict())
    assert again == m
    other = evaluate_factor(v, f, EvalConfig(n_quantiles=5))
    assert other.config_hash != m.config_hash


def test_evaluate_factor_negation_flips_ic():
    rng = np.random.default_rng(15)
    v = rng.normal(size=(60, 25))
    f = rng.normal(size=(60, 25))
    a, b = evaluate_factor(v, f), evaluate_factor(-v, f)
    assert a.mean_ic == pytest.approx(-b.mean_ic, abs=1e-12)
