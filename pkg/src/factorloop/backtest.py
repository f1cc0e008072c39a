"""Decile portfolios, long-short spreads, holding horizons, turnover and costs."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import spearmanr

from .attribution import nw_mean_tstat
from .metrics import ANNUALIZATION, PerfSummary, equity_curve, long_short_returns, max_drawdown, perf_summary, quantile_assign, quantile_returns


@dataclass(frozen=True)
class CostModel:
    one_way_bps: float = 3.0
    gross_exposure_scale: float = 1.0

    def __post_init__(self):
        if self.one_way_bps < 0:
            raise ValueError("one_way_bps must be >= 0")


@dataclass(frozen=True, eq=False)
class BacktestReport:
    dates: np.ndarray
    n_quantiles: int
    buckets: np.ndarray
    decile_returns: np.ndarray  # (n_dates, Q)
    spread: np.ndarray  # top minus bottom, gross
    skipped: np.ndarray
    weights: np.ndarray
    turnover: np.ndarray | None = None
    net: np.ndarray | None = None
    monotonicity: float = math.nan
    decile_perf: tuple = field(default=())
    spread_perf: PerfSummary | None = None

    def mean_decile_returns(self) -> np.ndarray:
        return np.nanmean(self.decile_returns, axis=0)


def long_short_weights(buckets: np.ndarray, n_quantiles: int) -> np.ndarray:
    """Equal weights summing to +1 on the top bucket and -1 on the bottom bucket."""
    w = np.zeros(buckets.shape)
    for q, sign in ((n_quantiles, 1.0), (1, -1.0)):
        m = buckets == q
        n = m.sum(axis=1, keepdims=True)
        w += np.where(m, sign / np.maximum(n, 1), 0.0)
    return w


def decile_monotonicity(mean_returns) -> float:
    """Spearman correlation between bucket index and mean bucket return."""
    mr = np.asarray(mean_returns, dtype=float)
    ok = np.isfinite(mr)
    if ok.sum() < 2 or np.ptp(mr[ok]) == 0:
        return math.nan
    return float(spearmanr(np.arange(1, mr.size + 1)[ok], mr[ok])[0])


def decile_backtest(scores: np.ndarray, fwd_returns: np.ndarray, dates=None, n_quantiles: int = 10) -> BacktestReport:
    """Sort each date into score buckets and track equal-weight bucket returns.

    ``scores[t]`` ranks names for the return over (t, t+1] held in
    ``fwd_returns[t]``. Names without a finite forward return are not sorted.
    """
    scores = np.asarray(scores, dtype=float)
    fwd_returns = np.asarray(fwd_returns, dtype=float)
    valid = np.isfinite(scores) & np.isfinite(fwd_returns)
    buckets, skipped = quantile_assign(scores, n_quantiles, valid)
    qr = quantile_returns(buckets, fwd_returns, n_quantiles)
    spread = qr[:, -1] - qr[:, 0]
    if dates is None:
        dates = np.arange(scores.shape[0])
    return BacktestReport(
        dates=np.asarray(dates),
        n_quantiles=n_quantiles,
        buckets=buckets,
        decile_returns=qr,
        spread=spread,
        skipped=skipped,
        weights=long_short_weights(buckets, n_quantiles),
        monotonicity=decile_monotonicity(np.nanmean(qr, axis=0)) if qr.size else math.nan,
        decile_perf=tuple(perf_summary(qr[:, q]) for q in range(n_quantiles)),
        spread_perf=perf_summary(spread),
    )


def turnover(weights: np.ndarray, fwd_returns: np.ndarray) -> np.ndarray:
    """Per-date traded fraction 0.5 * sum |w_t - drifted w_{t-1}|.

    Prior weights drift with the returns realized in between, renormalized
    within each leg so leg exposure is preserved. A full replacement of both
    legs is 2.0 (100% per side). The first date carries no turnover.
    """
    weights = np.asarray(weights, dtype=float)
    r = np.nan_to_num(np.asarray(fwd_returns, dtype=float), nan=0.0)
    out = np.zeros(weights.shape[0])
    for t in range(1, weights.shape[0]):
        prev = weights[t - 1]
        drifted = np.zeros_like(prev)
        for leg in (prev > 0, prev < 0):
            if not leg.any():
                continue
            wl = prev[leg]
            grown = wl * (1.0 + r[t - 1, leg])
            leg_ret = (wl * r[t - 1, leg]).sum() / wl.sum()
            drifted[leg] = grown / (1.0 + leg_ret)
        out[t] = 0.5 * np.abs(weights[t] - drifted).sum()
    return out


def apply_costs(gross, turnover_series, cost: CostModel = CostModel()) -> np.ndarray:
    """net = gross - bps * 1e-4 * turnover * gross_exposure_scale."""
    gross = np.asarray(gross, dtype=float)
    to = np.asarray(turnover_series, dtype=float)
    return gross - cost.one_way_bps * 1e-4 * to * cost.gross_exposure_scale


def with_costs(report: BacktestReport, fwd_returns: np.ndarray, cost: CostModel = CostModel()) -> BacktestReport:
    to = turnover(report.weights, fwd_returns)
    net = apply_costs(report.spread, to, cost)
    return BacktestReport(**{**report.__dict__, "turnover": to, "net": net})


@dataclass(frozen=True)
class HorizonStat:
    horizon: int
    mean: float  # daily
    ann_mean: float
    tstat: float
    n: int


def horizon_spreads(scores: np.ndarray, fwd_returns: np.ndarray, horizon: int, n_quantiles: int = 10) -> np.ndarray:
    """Daily spread of ``horizon`` overlapping cohorts formed on t-h+1 .. t.

    Cohort weights are fixed at formation; each cohort earns the return over
    (t, t+1]. Dates with fewer than ``horizon`` formed cohorts are NaN.
    """
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    scores = np.asarray(scores, dtype=float)
    fwd_returns = np.asarray(fwd_returns, dtype=float)
    valid = np.isfinite(scores) & np.isfinite(fwd_returns)
    buckets, _ = quantile_assign(scores, n_quantiles, valid)
    T = scores.shape[0]
    cohort = np.full((horizon, T), np.nan)
    for lag in range(horizon):
        held = np.zeros_like(buckets)
        held[lag:] = buckets[: T - lag]
        qr = quantile_returns(held, fwd_returns, n_quantiles)
        cohort[lag, lag:] = (qr[:, -1] - qr[:, 0])[lag:]
    out = cohort.mean(axis=0)  # NaN if any cohort missing
    return out


def multi_horizon(scores, fwd_returns, horizons=range(1, 8), n_quantiles: int = 10, nw_lags: int = 5) -> list[HorizonStat]:
    """Mean daily spread and Newey-West t per holding horizon."""
    stats = []
    for h in horizons:
        s = horizon_spreads(scores, fwd_returns, h, n_quantiles)
        mean, t = nw_mean_tstat(s, max(nw_lags, h))
        stats.append(HorizonStat(h, mean, mean * ANNUALIZATION, t, int(np.isfinite(s).sum())))
    return stats


# --------------------------------------------------------------------------
# calendar-quarter tables


@dataclass(frozen=True)
class QuarterRow:
    label: str
    period_return: float
    ann_return: float
    ann_vol: float
    sharpe: float
    max_drawdown: float
    n_days: int
    partial: bool = False
    avg_turnover: float = math.nan
    net_return: float = math.nan
    net_sharpe: float = math.nan


def _quarter_keys(dates) -> np.ndarray:
    d = np.asarray(dates, dtype="datetime64[M]").astype(int)
    year = d // 12 + 1970
    q = (d % 12) // 3 + 1
    return year * 10 + q


def _quarter_bounds(key: int):
    year, q = divmod(int(key), 10)
    start = np.datetime64(f"{year}-{3 * (q - 1) + 1:02d}-01", "D")
    month_after = np.datetime64(f"{year}-{3 * (q - 1) + 1:02d}", "M") + 3
    end = month_after.astype("datetime64[D]") - 1
    return start, end


def period_stats(r) -> tuple[float, PerfSummary]:
    r = np.asarray(r, dtype=float)
    r = r[np.isfinite(r)]
    return float(np.prod(1.0 + r) - 1.0), perf_summary(r)


def quarterly_table(dates, gross, turnover_series=None, net=None, slack_days: int = 5) -> list[QuarterRow]:
    """One row per calendar quarter present in ``dates``.

    The first and last quarters are flagged ``partial`` when the window
    starts or ends more than ``slack_days`` inside them.
    """
    dates = np.asarray(dates, dtype="datetime64[D]")
    gross = np.asarray(gross, dtype=float)
    keys = _quarter_keys(dates)
    rows = []
    uniq = list(dict.fromkeys(keys.tolist()))
    for i, key in enumerate(uniq):
        m = keys == key
        pr, perf = period_stats(gross[m])
        qs, qe = _quarter_bounds(key)
        partial = False
        if i == 0 and (dates[m][0] - qs) > np.timedelta64(slack_days, "D"):
            partial = True
        if i == len(uniq) - 1 and (qe - dates[m][-1]) > np.timedelta64(slack_days, "D"):
            partial = True
        extra = {}
        if turnover_series is not None:
            extra["avg_turnover"] = float(np.nanmean(np.asarray(turnover_series)[m]))
        if net is not None:
            npr, nperf = period_stats(np.asarray(net)[m])
            extra["net_return"] = npr
            extra["net_sharpe"] = nperf.sharpe
        year, q = divmod(key, 10)
        rows.append(
            QuarterRow(
                label=f"{year}Q{q}",
                period_return=pr,
                ann_return=(1.0 + pr) ** (ANNUALIZATION / max(perf.n, 1)) - 1.0 if pr > -1 else -1.0,
                ann_vol=perf.ann_vol,
                sharpe=perf.sharpe,
                max_drawdown=max_drawdown(equity_curve(gross[m][np.isfinite(gross[m])])),
                n_days=int(np.isfinite(gross[m]).sum()),
                partial=partial,
                **extra,
            )
        )
    return rows
