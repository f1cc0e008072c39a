"""Uniform factor evaluation: rank IC statistics and quantile long-short
portfolio statistics.

Every candidate goes through :func:`evaluate_factor` with the same
:class:`EvalConfig`; the config hash is stamped on the result so that two
factors scored under different protocols can be told apart.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np
from scipy.stats import rankdata

from .panel import normalize_panel

ANNUALIZATION = 252


@dataclass(frozen=True)
class EvalConfig:
    min_names: int = 10
    n_quantiles: int = 2
    leg_fraction: float = 0.5
    winsor_low: float = 0.01
    winsor_high: float = 0.99

    def config_hash(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:12]


TABLE3_COLUMNS = ("Sharpe", "IC", "ICIR", "ICL", "ICLIR", "Sortino", "Calmar", "Annual Ret", "Max DD")


@dataclass(frozen=True)
class EvalMetrics:
    mean_ic: float
    ic_tstat: float
    icir: float
    icl: float
    iclir: float
    ann_return: float
    ann_vol: float
    sharpe: float
    sortino: float
    calmar: float
    max_drawdown: float
    n_days: int
    n_valid_dates: int
    avg_coverage: float
    start: str = ""
    end: str = ""  # last date whose forward return is used
    config_hash: str = ""
    flags: tuple = ()

    def to_dict(self) -> dict:
        d = asdict(self)
        d["flags"] = list(self.flags)
        for k, v in d.items():
            if isinstance(v, float) and not math.isfinite(v):
                d[k] = None
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EvalMetrics":
        kw = {}
        for f in fields(cls):
            v = d.get(f.name)
            if f.name == "flags":
                v = tuple(v or ())
            elif f.type in ("float",) and v is None:
                v = math.nan
            kw[f.name] = v
        return cls(**kw)

    def table3_row(self) -> tuple:
        return (
            self.sharpe,
            self.mean_ic,
            self.icir,
            self.icl,
            self.iclir,
            self.sortino,
            self.calmar,
            self.ann_return,
            -self.max_drawdown,
        )


# --------------------------------------------------------------------------
# information coefficient


def _row_pearson(a: np.ndarray, b: np.ndarray, mask: np.ndarray) -> np.ndarray:
    n = mask.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        ma = np.where(mask, a, 0.0).sum(axis=1) / n
        mb = np.where(mask, b, 0.0).sum(axis=1) / n
        da = np.where(mask, a - ma[:, None], 0.0)
        db = np.where(mask, b - mb[:, None], 0.0)
        return (da * db).sum(axis=1) / np.sqrt((da * da).sum(axis=1) * (db * db).sum(axis=1))


def _masked_ranks(x: np.ndarray, mask: np.ndarray) -> np.ndarray:
    return rankdata(np.where(mask, x, np.nan), method="average", axis=1, nan_policy="omit")


def rank_ic(scores: np.ndarray, fwd_returns: np.ndarray, min_names: int = 10) -> np.ndarray:
    """Per-date Spearman correlation between scores and next-period returns.

    Dates with fewer than ``min_names`` jointly finite names or no dispersion
    on either side are NaN.
    """
    scores = np.atleast_2d(np.asarray(scores, dtype=float))
    fwd_returns = np.atleast_2d(np.asarray(fwd_returns, dtype=float))
    mask = np.isfinite(scores) & np.isfinite(fwd_returns)
    ra = _masked_ranks(scores, mask)
    rb = _masked_ranks(fwd_returns, mask)
    ic = _row_pearson(ra, rb, mask)
    n = mask.sum(axis=1)
    flat_a = np.nanmax(np.where(mask, ra, np.nan), axis=1, initial=-np.inf) == np.nanmin(np.where(mask, ra, np.nan), axis=1, initial=np.inf)
    flat_b = np.nanmax(np.where(mask, rb, np.nan), axis=1, initial=-np.inf) == np.nanmin(np.where(mask, rb, np.nan), axis=1, initial=np.inf)
    bad = (n < max(min_names, 2)) | flat_a | flat_b
    ic[bad] = np.nan
    return ic


def ic_tstat(ic) -> tuple[float, float, float]:
    """(mean IC, t-statistic, ICIR) over the finite entries of an IC series.

    ICIR is the raw per-period ratio mean/std. A constant series has an
    undefined t and ICIR (NaN).
    """
    ic = np.asarray(ic, dtype=float)
    ic = ic[np.isfinite(ic)]
    if ic.size < 2:
        return (float(ic.mean()) if ic.size else math.nan), math.nan, math.nan
    mean = float(ic.mean())
    if np.ptp(ic) == 0:
        return mean, math.nan, math.nan
    sd = float(ic.std(ddof=1))
    return mean, mean / (sd / math.sqrt(ic.size)), mean / sd


def long_only_ic(scores: np.ndarray, fwd_returns: np.ndarray, leg_fraction: float = 0.5, min_names: int = 10) -> np.ndarray:
    """Per-date rank IC restricted to the top ``leg_fraction`` of scores."""
    if not 0.0 < leg_fraction <= 1.0:
        raise ValueError("leg_fraction must be in (0, 1]")
    scores = np.atleast_2d(np.asarray(scores, dtype=float))
    fwd_returns = np.atleast_2d(np.asarray(fwd_returns, dtype=float))
    if leg_fraction == 1.0:
        return rank_ic(scores, fwd_returns, min_names)
    mask = np.isfinite(scores) & np.isfinite(fwd_returns)
    sub = np.zeros_like(mask)
    for t in range(scores.shape[0]):
        idx = np.nonzero(mask[t])[0]
        if idx.size == 0:
            continue
        k = int(math.ceil(leg_fraction * idx.size))
        order = idx[np.argsort(scores[t, idx], kind="stable")]
        sub[t, order[idx.size - k:]] = True
    return rank_ic(np.where(sub, scores, np.nan), np.where(sub, fwd_returns, np.nan), min_names)


# --------------------------------------------------------------------------
# quantile portfolios


def quantile_sort(scores, n_quantiles: int, valid=None) -> np.ndarray | None:
    """Ascending buckets 1..Q for one date (0 = unassigned).

    Ties keep stock-index order. With ``n = Q*b + r`` names, the bottom ``r``
    buckets get one extra name. Returns ``None`` if breadth < Q.
    """
    if n_quantiles < 2:
        raise ValueError("need at least 2 quantiles")
    scores = np.asarray(scores, dtype=float)
    ok = np.isfinite(scores) if valid is None else (np.asarray(valid) & np.isfinite(scores))
    idx = np.nonzero(ok)[0]
    n = idx.size
    if n < n_quantiles:
        return None
    order = idx[np.argsort(scores[idx], kind="stable")]
    base, extra = divmod(n, n_quantiles)
    sizes = np.full(n_quantiles, base)
    sizes[:extra] += 1
    out = np.zeros(scores.shape, dtype=int)
    out[order] = np.repeat(np.arange(1, n_quantiles + 1), sizes)
    return out


def quantile_assign(scores: np.ndarray, n_quantiles: int, valid: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise :func:`quantile_sort`; returns ``(buckets, skipped_dates)``."""
    scores = np.atleast_2d(scores)
    out = np.zeros(scores.shape, dtype=int)
    skipped = np.zeros(scores.shape[0], dtype=bool)
    for t in range(scores.shape[0]):
        q = quantile_sort(scores[t], n_quantiles, None if valid is None else valid[t])
        if q is None:
            skipped[t] = True
        else:
            out[t] = q
    return out, skipped


def quantile_returns(buckets: np.ndarray, returns: np.ndarray, n_quantiles: int) -> np.ndarray:
    """(n_dates, Q) equal-weight mean return of each bucket; NaN if empty."""
    out = np.full((buckets.shape[0], n_quantiles), np.nan)
    for q in range(1, n_quantiles + 1):
        m = (buckets == q) & np.isfinite(returns)
        n = m.sum(axis=1)
        with np.errstate(invalid="ignore", divide="ignore"):
            out[:, q - 1] = np.where(n > 0, np.where(m, returns, 0.0).sum(axis=1) / n, np.nan)
    return out


def long_short_returns(buckets: np.ndarray, returns: np.ndarray, n_quantiles: int) -> np.ndarray:
    """Top-bucket mean minus bottom-bucket mean per date (NaN if a leg is empty)."""
    qr = quantile_returns(np.atleast_2d(buckets), np.atleast_2d(returns), n_quantiles)
    return qr[:, -1] - qr[:, 0]


# --------------------------------------------------------------------------
# performance summary


def max_drawdown(equity) -> float:
    """Largest peak-to-trough loss of an equity path, as a positive fraction."""
    p = np.asarray(equity, dtype=float)
    if p.size == 0:
        return 0.0
    peak = np.maximum.accumulate(p)
    return float(np.max((peak - p) / peak))


def equity_curve(returns) -> np.ndarray:
    r = np.asarray(returns, dtype=float)
    return np.concatenate([[1.0], np.cumprod(1.0 + r)])


@dataclass(frozen=True)
class PerfSummary:
    ann_return: float
    ann_vol: float
    sharpe: float
    sortino: float
    max_drawdown: float
    calmar: float
    n: int
    flags: tuple = field(default=())


def perf_summary(returns) -> PerfSummary:
    """Annualized statistics of a daily return series (NaN days dropped).

    Risk-free rate is zero. Undefined ratios are NaN and named in ``flags``.
    """
    r = np.asarray(returns, dtype=float)
    r = r[np.isfinite(r)]
    n = r.size
    if n < 2:
        return PerfSummary(math.nan, math.nan, math.nan, math.nan, math.nan, math.nan, n, ("too_short",))
    flags = []
    growth = float(np.prod(1.0 + r))
    ann_ret = growth ** (ANNUALIZATION / n) - 1.0 if growth > 0 else -1.0
    mean = float(r.mean())
    sd = float(r.std(ddof=1))
    ann_vol = math.sqrt(ANNUALIZATION) * sd
    if sd > 0 and np.ptp(r) > 0:
        sharpe = math.sqrt(ANNUALIZATION) * mean / sd
    else:
        sharpe = math.nan
        flags.append("zero_volatility")
    downside = math.sqrt(float(np.mean(np.minimum(r, 0.0) ** 2)))
    if downside > 0:
        sortino = math.sqrt(ANNUALIZATION) * mean / downside
    else:
        sortino = math.nan
        flags.append("no_downside")
    mdd = max_drawdown(equity_curve(r))
    if mdd > 0:
        calmar = ann_ret / mdd
    else:
        calmar = math.nan
        flags.append("zero_drawdown")
    return PerfSummary(ann_ret, ann_vol, sharpe, sortino, mdd, calmar, n, tuple(flags))


# --------------------------------------------------------------------------
# one-stop evaluation


def evaluate_factor(values: np.ndarray, fwd_returns: np.ndarray, cfg: EvalConfig = EvalConfig(), dates=None, coverage=None) -> EvalMetrics:
    """Normalize raw factor values date by date, then compute the full metric vector.

    ``values[t]`` must be aligned with ``fwd_returns[t]`` (return over t to t+1).
    """
    z = normalize_panel(values, cfg.winsor_low, cfg.winsor_high)
    ic = rank_ic(z, fwd_returns, cfg.min_names)
    mean_ic, t, icir = ic_tstat(ic)
    icl_series = long_only_ic(z, fwd_returns, cfg.leg_fraction, cfg.min_names)
    icl, _, iclir = ic_tstat(icl_series)
    valid = np.isfinite(z) & np.isfinite(fwd_returns)
    buckets, skipped = quantile_assign(z, cfg.n_quantiles, valid)
    spread = long_short_returns(buckets, fwd_returns, cfg.n_quantiles)
    perf = perf_summary(spread)
    flags = list(perf.flags)
    if not math.isfinite(t):
        flags.append("ic_undefined")
    if skipped.any():
        flags.append(f"skipped_dates={int(skipped.sum())}")
    if coverage is None:
        with np.errstate(invalid="ignore", divide="ignore"):
            has_ret = np.isfinite(fwd_returns)
            coverage = (np.isfinite(values) & has_ret).sum(axis=1) / np.maximum(has_ret.sum(axis=1), 1)
    start = end = ""
    if dates is not None and len(dates):
        start, end = str(dates[0]), str(dates[-1])
    return EvalMetrics(
        mean_ic=mean_ic,
        ic_tstat=t,
        icir=icir,
        icl=icl,
        iclir=iclir,
        ann_return=perf.ann_return,
        ann_vol=perf.ann_vol,
        sharpe=perf.sharpe,
        sortino=perf.sortino,
        calmar=perf.calmar,
        max_drawdown=perf.max_drawdown,
        n_days=int(values.shape[0]),
        n_valid_dates=int(np.isfinite(ic).sum()),
        avg_coverage=float(np.nanmean(coverage)) if len(coverage) else math.nan,
        start=start,
        end=end,
        config_hash=cfg.config_hash(),
        flags=tuple(flags),
    )
