"""Synthetic panels with planted, known signals.

The planted-signal panel draws volume and quotes first (they are exogenous),
evaluates a hidden expression on them, and then sets

    ret[t+1] = signal * (cs_rank(hidden)[t] - 1/2) + beta * market[t+1] + noise

so the hidden expression is the ground-truth predictor of next-day returns.
Centering the rank only shifts every stock by the same constant.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .aggregation import FeatureMatrix
from .attribution import BenchmarkReturns
from .grammar import cs_rank_panel, evaluate, parse_expr
from .panel import Panel, build_primitives, winsorize_panel

EXOGENOUS = {"volume", "vol_ratio", "vol_growth", "spread"}


@dataclass(frozen=True)
class SynthParams:
    n_stocks: int = 100
    n_days: int = 750
    n_is_days: int = 150
    start: str = "2019-01-02"
    hidden_expr: str = "neg(vol_ratio)"
    signal: float = 0.02
    noise: float = 0.10
    market_vol: float = 0.01
    price_vol: float = 0.01
    ineligible_frac: float = 0.0
    late_listing_frac: float = 0.0
    seed: int = 7


def business_days(start: str, n: int) -> np.ndarray:
    first = np.busday_offset(np.datetime64(start, "D"), 0, roll="forward")
    return np.busday_offset(first, np.arange(n)).astype("datetime64[D]")


def _stock_ids(n: int) -> np.ndarray:
    return np.array([f"S{j:04d}" for j in range(n)], dtype=object)


def planted_panel(p: SynthParams = SynthParams()) -> Panel:
    """Raw (unscreened) panel whose next-day returns load on ``p.hidden_expr``."""
    rng = np.random.default_rng(p.seed)
    T, N = p.n_days, p.n_stocks
    dates = business_days(p.start, T)
    present = np.ones((T, N), dtype=bool)
    n_late = int(round(p.late_listing_frac * N))
    for j in range(N - n_late, N):
        present[: int(rng.integers(T // 2, T - 10)), j] = False

    # exogenous: log-volume AR(1) around a stock level, relative spreads
    level = rng.normal(12.0, 1.0, N)
    lv = np.empty((T, N))
    lv[0] = level + rng.normal(0, 0.3, N)
    for t in range(1, T):
        lv[t] = level + 0.9 * (lv[t - 1] - level) + rng.normal(0, 0.3, N)
    volume = np.round(np.exp(lv))
    rel_spread = np.exp(rng.normal(-6.0, 0.3, (T, N)) - 0.2 * (level - 12.0))

    expr = parse_expr(p.hidden_expr)
    used = {n.name for n in expr.walk() if n.op == "prim"}
    if not used <= EXOGENOUS:
        raise ValueError(f"hidden expression may only use {sorted(EXOGENOUS)}, got {sorted(used)}")

    exch = np.where(rng.random(N) < p.ineligible_frac, 4, rng.integers(1, 4, N))
    share = np.where(rng.random(N) < p.ineligible_frac, 12, 11)
    base_fields = {
        "ret": np.zeros((T, N)),
        "price": np.ones((T, N)),
        "volume": volume,
        "exchange_code": np.broadcast_to(exch, (T, N)).astype(float),
        "share_code": np.broadcast_to(share, (T, N)).astype(float),
        "bid": 1.0 - rel_spread / 2,
        "ask": 1.0 + rel_spread / 2,
    }
    zeros = np.zeros(T)
    pre = Panel(dates, _stock_ids(N), _mask(base_fields, present), present, {"market_ret_vw": zeros, "market_ret_sp": zeros})
    hidden = evaluate(expr, build_primitives(pre)).values
    rank = cs_rank_panel(hidden)

    market = rng.normal(0.0003, p.market_vol, T)
    beta = rng.uniform(0.5, 1.5, N)
    ret = beta[None, :] * market[:, None] + rng.normal(0.0, p.noise, (T, N))
    ret[1:] += p.signal * np.nan_to_num(rank[:-1] - 0.5, nan=0.0)
    ret = np.maximum(ret, -0.95)
    ret[~present] = np.nan
    # quoted prices follow their own low-volatility path so the price screen
    # does not bind on a fixture with deliberately noisy returns
    price = (20.0 + 80.0 * rng.random(N))[None, :] * np.exp(np.cumsum(rng.normal(0.0, p.price_vol, (T, N)), axis=0))

    fields = dict(base_fields)
    fields["ret"] = ret
    fields["price"] = price
    fields["bid"] = price * (1.0 - rel_spread / 2)
    fields["ask"] = price * (1.0 + rel_spread / 2)
    mkt = np.nanmean(np.where(present, ret, np.nan), axis=1)
    market_series = {"market_ret_vw": mkt, "market_ret_sp": mkt + rng.normal(0, 0.001, T)}
    return Panel(dates, _stock_ids(N), _mask(fields, present), present, market_series)


def planted_split(panel: Panel, n_is_days: int = 150) -> tuple[str, str, str, str]:
    """IS covers the first ``n_is_days`` dates, OOS the rest.

    The short IS keeps the in-sample t-stat of the hidden expression near 6
    while the long OOS window resolves the decile profile.
    """
    d = [str(x) for x in panel.dates]
    return d[0], d[n_is_days - 1], d[n_is_days], d[-1]


def _mask(fields, present):
    return {k: np.where(present, np.asarray(v, dtype=float), np.nan) for k, v in fields.items()}


def benchmark_returns(panel: Panel, seed: int = 11, rf: float = 0.0001) -> BenchmarkReturns:
    """Fama-French-style daily factors aligned to the panel's dates (decimals)."""
    rng = np.random.default_rng(seed)
    T = len(panel.dates)
    mkt = panel.market["market_ret_vw"] - rf
    factors = {"MKT-RF": mkt}
    for name, sd in (("SMB", 0.005), ("HML", 0.005), ("RMW", 0.003), ("CMA", 0.003), ("MOM", 0.007)):
        factors[name] = rng.normal(0.0, sd, T)
    factors["RF"] = np.full(T, rf)
    return BenchmarkReturns(panel.dates, factors, "synthetic")


def interaction_features(seed: int = 0, n_dates: int = 400, n_stocks: int = 100, interaction: float = 0.01, linear: float = 0.002, noise: float = 0.02) -> FeatureMatrix:
    """Two standard-normal factors; the target loads mostly on their product."""
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((n_dates, n_stocks, 2))
    fwd = interaction * z[..., 0] * z[..., 1] + linear * z[..., 0] + rng.normal(0, noise, (n_dates, n_stocks))
    dates = business_days("2015-01-02", n_dates)
    return FeatureMatrix(dates, _stock_ids(n_stocks), ("f1", "f2"), z, winsorize_panel(fwd), fwd)


def decay_fixture(seed: int = 0, n_dates: int = 500, n_stocks: int = 100, signal: float = 0.02, noise: float = 0.02, persistence: int = 1):
    """Scores whose predictive power lasts ``persistence`` days.

    Returns ``(scores, fwd)`` where ``fwd[t]`` is the return over (t, t+1].
    With ``signal=0`` the panel is an i.i.d. null.
    """
    rng = np.random.default_rng(seed)
    scores = rng.standard_normal((n_dates, n_stocks))
    rank = cs_rank_panel(scores) - 0.5
    fwd = rng.normal(0.0, noise, (n_dates, n_stocks))
    for lag in range(persistence):
        fwd[lag:] += signal * rank[: n_dates - lag] / persistence
    return scores, fwd
