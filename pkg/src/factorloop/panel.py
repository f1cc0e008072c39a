"""Columnar stock-date panel: ingest, sample screens, baseline predictors and
date-by-date normalization.

All per-stock arrays are dense ``(n_dates, n_stocks)`` float grids with NaN
for absent cells; ``present`` marks which (date, stock) observations exist.
Time-series windows run over each stock's own observation history, so a gap
in trading is skipped rather than counted as a day.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field, replace
from datetime import date as _date
from typing import Callable, Iterable, Mapping, TextIO

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

logger = logging.getLogger(__name__)

REQUIRED_COLUMNS = (
    "date",
    "stock_id",
    "ret",
    "price",
    "volume",
    "exchange_code",
    "share_code",
    "market_ret_vw",
    "market_ret_sp",
)
OPTIONAL_COLUMNS = ("bid", "ask")
NUMERIC_FIELDS = ("ret", "price", "volume", "exchange_code", "share_code", "bid", "ask")
MARKET_FIELDS = ("market_ret_vw", "market_ret_sp")

# Baseline predictor set, in the order they are documented.
PRIMITIVES = (
    "ret",
    "mkt_ret",
    "price",
    "volume",
    "vol_ratio",
    "rvol20",
    "price_ma",
    "mkt_vol20",
    "vol_growth",
    "spread",
)
WINDOW = 20


class PanelError(Exception):
    """Base class for panel construction errors."""


class SchemaError(PanelError):
    def __init__(self, missing):
        self.missing = tuple(missing)
        super().__init__(f"missing required column(s): {', '.join(self.missing)}")


class DuplicateKeyError(PanelError):
    def __init__(self, day, stock_id):
        self.key = (day, stock_id)
        super().__init__(f"duplicate observation for date={day} stock_id={stock_id}")


@dataclass(frozen=True)
class IngestReport:
    n_rows: int
    n_accepted: int
    n_rejected: int
    rejections: tuple = ()  # (line number, reason)
    negative_prices: int = 0


@dataclass(frozen=True, eq=False)
class Panel:
    """Immutable stock-date panel.

    ``fields`` holds per-cell grids, ``market`` holds per-date series.
    """

    dates: np.ndarray
    stocks: np.ndarray
    fields: Mapping[str, np.ndarray]
    present: np.ndarray
    market: Mapping[str, np.ndarray]
    report: IngestReport | None = None

    def __post_init__(self):
        if len(self.dates) > 1 and not np.all(np.diff(self.dates) > np.timedelta64(0, "D")):
            raise PanelError("dates must be strictly increasing")
        for arr in list(self.fields.values()) + [self.present]:
            arr.setflags(write=False)
        for arr in self.market.values():
            arr.setflags(write=False)

    @property
    def shape(self):
        return self.present.shape

    @property
    def n_obs(self) -> int:
        return int(self.present.sum())

    @property
    def history_index(self) -> np.ndarray:
        """Per-cell position within the stock's own history (-1 if absent)."""
        idx = np.cumsum(self.present, axis=0) - 1
        return np.where(self.present, idx, -1)

    def field(self, name: str) -> np.ndarray:
        return self.fields[name]

    def date_pos(self, day) -> int:
        """Index of the last panel date <= ``day``."""
        return int(np.searchsorted(self.dates, np.datetime64(day, "D"), side="right")) - 1

    def cross_section(self, name: str, day) -> np.ndarray:
        pos = self.date_pos(day)
        if pos < 0:
            raise KeyError(day)
        return self.fields[name][pos]

    def history(self, name: str, stock_id, upto=None) -> np.ndarray:
        """Observed values of one stock, dates <= ``upto``."""
        j = int(np.searchsorted(self.stocks, stock_id))
        if j >= len(self.stocks) or self.stocks[j] != stock_id:
            raise KeyError(stock_id)
        end = len(self.dates) if upto is None else self.date_pos(upto) + 1
        col = self.fields[name][:end, j]
        return col[self.present[:end, j]]

    def truncate(self, end) -> "Panel":
        """Panel restricted to dates <= ``end``."""
        stop = self.date_pos(end) + 1
        return self.take_dates(slice(0, stop))

    def take_dates(self, sl) -> "Panel":
        return Panel(
            dates=self.dates[sl],
            stocks=self.stocks,
            fields={k: v[sl] for k, v in self.fields.items()},
            present=self.present[sl],
            market={k: v[sl] for k, v in self.market.items()},
            report=self.report,
        )

    def with_fields(self, extra: Mapping[str, np.ndarray]) -> "Panel":
        merged = dict(self.fields)
        merged.update(extra)
        return replace(self, fields=merged)

    def forward_returns(self) -> np.ndarray:
        """Return over (t, t+1]: the raw return on the next panel date."""
        ret = self.fields["ret"]
        fwd = np.full_like(ret, np.nan)
        fwd[:-1] = ret[1:]
        return fwd

    def to_rows(self) -> list[dict]:
        """Long-format records in (date, stock) order."""
        rows = []
        ti, si = np.nonzero(self.present)
        for t, j in zip(ti, si):
            row = {"date": str(self.dates[t]), "stock_id": str(self.stocks[j])}
            for name in NUMERIC_FIELDS:
                if name in self.fields:
                    row[name] = self.fields[name][t, j]
            for name in MARKET_FIELDS:
                row[name] = self.market[name][t]
            rows.append(row)
        return rows


def _fmt(x) -> str:
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return ""
    if float(x).is_integer() and abs(x) < 1e15:
        return str(int(x))
    return repr(float(x))


def write_panel_csv(panel: Panel, out: TextIO) -> None:
    cols = list(REQUIRED_COLUMNS) + [c for c in OPTIONAL_COLUMNS if c in panel.fields]
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(cols)
    for row in panel.to_rows():
        writer.writerow([row["date"], row["stock_id"]] + [_fmt(row.get(c)) for c in cols[2:]])


def _parse_float(text: str) -> float:
    text = text.strip()
    if text == "" or text.upper() in ("NA", "NAN", "."):
        return math.nan
    return float(text)


def ingest_panel(source: TextIO | str, schema: Mapping[str, str] | None = None, delimiter: str = ",") -> Panel:
    """Parse delimited text into a :class:`Panel`.

    ``schema`` maps canonical column names to the header names used in the
    file. Rows that fail to parse (bad date, non-numeric text, negative
    volume) are rejected and counted in ``panel.report``.
    """
    if isinstance(source, str):
        source = io.StringIO(source)
    schema = dict(schema or {})
    reader = csv.reader(source, delimiter=delimiter)
    try:
        header = [h.strip() for h in next(reader)]
    except StopIteration:
        raise SchemaError(REQUIRED_COLUMNS) from None
    colmap = {c: schema.get(c, c) for c in REQUIRED_COLUMNS + OPTIONAL_COLUMNS}
    missing = [colmap[c] for c in REQUIRED_COLUMNS if colmap[c] not in header]
    if missing:
        raise SchemaError(missing)
    pos = {c: header.index(colmap[c]) for c in colmap if colmap[c] in header}
    has_quotes = "bid" in pos and "ask" in pos

    records = {}
    rejections = []
    n_rows = 0
    n_negative = 0
    for lineno, row in enumerate(reader, start=2):
        if not row or all(not cell.strip() for cell in row):
            continue
        n_rows += 1
        try:
            day = _date.fromisoformat(row[pos["date"]].strip())
            stock = row[pos["stock_id"]].strip()
            if not stock:
                raise ValueError("empty stock_id")
            vals = {}
            for name in NUMERIC_FIELDS + MARKET_FIELDS:
                if name in pos:
                    vals[name] = _parse_float(row[pos[name]])
        except (ValueError, IndexError) as exc:
            rejections.append((lineno, str(exc)))
            continue
        if vals["volume"] < 0:
            rejections.append((lineno, f"negative volume {vals['volume']}"))
            continue
        key = (day, stock)
        if key in records:
            raise DuplicateKeyError(day.isoformat(), stock)
        if vals["price"] < 0:
            n_negative += 1
        records[key] = vals

    report = IngestReport(
        n_rows=n_rows,
        n_accepted=len(records),
        n_rejected=len(rejections),
        rejections=tuple(rejections),
        negative_prices=n_negative,
    )
    if rejections:
        logger.info("ingest rejected %d of %d rows", len(rejections), n_rows)
    return _build(records, has_quotes, report)


def _build(records: Mapping, has_quotes: bool, report: IngestReport | None) -> Panel:
    dates = np.array(sorted({d for d, _ in records}), dtype="datetime64[D]")
    stocks = np.array(sorted({s for _, s in records}), dtype=object)
    t_of = {d: i for i, d in enumerate(dates.astype(object))}
    s_of = {s: j for j, s in enumerate(stocks)}
    shape = (len(dates), len(stocks))
    names = [n for n in NUMERIC_FIELDS if has_quotes or n not in OPTIONAL_COLUMNS]
    grids = {n: np.full(shape, np.nan) for n in names + list(MARKET_FIELDS)}
    present = np.zeros(shape, dtype=bool)
    for (d, s), vals in records.items():
        t, j = t_of[d], s_of[s]
        present[t, j] = True
        for n in grids:
            grids[n][t, j] = vals.get(n, np.nan)
    market = {n: _first_finite(grids.pop(n)) for n in MARKET_FIELDS}
    return Panel(dates=dates, stocks=stocks, fields=grids, present=present, market=market, report=report)


def _first_finite(grid: np.ndarray) -> np.ndarray:
    # market series: first finite value across stocks (sorted id order) per date
    out = np.full(grid.shape[0], np.nan)
    finite = np.isfinite(grid)
    has = finite.any(axis=1)
    first = finite.argmax(axis=1)
    out[has] = grid[np.nonzero(has)[0], first[has]]
    return out


def panel_from_frame(df, has_quotes: bool | None = None) -> Panel:
    """Build a panel from a long-format pandas DataFrame with canonical columns."""
    if has_quotes is None:
        has_quotes = "bid" in df.columns and "ask" in df.columns
    missing = [c for c in REQUIRED_COLUMNS if c not in df.columns]
    if missing:
        raise SchemaError(missing)
    records = {}
    cols = [c for c in NUMERIC_FIELDS + MARKET_FIELDS if c in df.columns]
    for row in df[["date", "stock_id"] + cols].itertuples(index=False):
        d = row[0]
        d = d if isinstance(d, _date) else _date.fromisoformat(str(d)[:10])
        key = (d, str(row[1]))
        if key in records:
            raise DuplicateKeyError(d.isoformat(), key[1])
        records[key] = {c: float(v) for c, v in zip(cols, row[2:])}
    return _build(records, has_quotes, None)


# --------------------------------------------------------------------------
# sample screens


@dataclass(frozen=True)
class ScreenConfig:
    eligible_exchanges: frozenset = frozenset({1, 2, 3})
    common_share_codes: frozenset = frozenset({10, 11})
    min_price: float = 5.0
    min_history_days: int = 252

    def __post_init__(self):
        if self.min_price < 0:
            raise ValueError("min_price must be >= 0")
        if self.min_history_days < 1:
            raise ValueError("min_history_days must be >= 1")


@dataclass(frozen=True)
class ScreenReport:
    raw_observations: int
    raw_stocks: int
    rows: tuple  # (name, remaining_observations, remaining_stocks)

    def to_table(self) -> list[tuple]:
        return [("Raw universe", self.raw_observations, self.raw_stocks)] + list(self.rows)


def _counts(mask: np.ndarray):
    return int(mask.sum()), int(mask.any(axis=0).sum())


def apply_screens(panel: Panel, cfg: ScreenConfig) -> tuple[Panel, ScreenReport]:
    """Exchange, share-code, price and history screens, in that order.

    Price is compared in absolute value (vendor negative coding) and the
    bound is inclusive. History counts observations surviving the earlier
    screens.
    """
    keep = panel.present.copy()
    raw = _counts(keep)
    rows = []

    exch = panel.fields["exchange_code"]
    keep &= np.isin(exch, list(cfg.eligible_exchanges))
    rows.append(("Eligible exchanges",) + _counts(keep))

    share = panel.fields["share_code"]
    keep &= np.isin(share, list(cfg.common_share_codes))
    rows.append(("Common shares",) + _counts(keep))

    with np.errstate(invalid="ignore"):
        keep &= np.abs(panel.fields["price"]) >= cfg.min_price
    rows.append((f"Price >= {_fmt(cfg.min_price)}",) + _counts(keep))

    history = keep.sum(axis=0)
    keep &= (history >= cfg.min_history_days)[None, :]
    rows.append((f"History >= {cfg.min_history_days} days",) + _counts(keep))

    screened = _restrict(panel, keep)
    return screened, ScreenReport(raw_observations=raw[0], raw_stocks=raw[1], rows=tuple(rows))


def _restrict(panel: Panel, keep: np.ndarray) -> Panel:
    t_keep = keep.any(axis=1)
    s_keep = keep.any(axis=0)
    sub = keep[np.ix_(t_keep, s_keep)]
    fields = {}
    for name, grid in panel.fields.items():
        g = grid[np.ix_(t_keep, s_keep)].copy()
        g[~sub] = np.nan
        fields[name] = g
    return Panel(
        dates=panel.dates[t_keep],
        stocks=panel.stocks[s_keep],
        fields=fields,
        present=sub,
        market={k: v[t_keep].copy() for k, v in panel.market.items()},
        report=panel.report,
    )


def write_screen_report(report: ScreenReport, out: TextIO, header_lines: Iterable[str] = ()) -> None:
    for line in header_lines:
        out.write(f"# {line}\n")
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(["Screen", "Obs", "Stocks"])
    for name, obs, stocks in report.to_table():
        writer.writerow([name, obs, stocks])


# --------------------------------------------------------------------------
# per-stock time-series machinery


def apply_along_history(values: np.ndarray, present: np.ndarray, fn: Callable[[np.ndarray], np.ndarray]) -> np.ndarray:
    """Apply a column-wise time-series transform over each stock's own history.

    ``fn`` maps an ``(L, k)`` array to an ``(L, k)`` array along axis 0 and must
    only look backwards. Stocks without internal gaps are processed in one
    vectorized call; gapped stocks are compacted one at a time.
    """
    out = np.full(values.shape, np.nan)
    if values.size == 0:
        return out
    first = present.argmax(axis=0)
    last = present.shape[0] - 1 - present[::-1].argmax(axis=0)
    span = last - first + 1
    count = present.sum(axis=0)
    contiguous = (count == span) | (count == 0)
    dense = np.nonzero(contiguous & (count > 0))[0]
    if dense.size:
        res = fn(np.where(present[:, dense], values[:, dense], np.nan))
        out[:, dense] = np.where(present[:, dense], res, np.nan)
    for j in np.nonzero(~contiguous)[0]:
        rows = np.nonzero(present[:, j])[0]
        out[rows, j] = fn(values[rows, j][:, None])[:, 0]
    return out


def ts_lag(x: np.ndarray, k: int) -> np.ndarray:
    if k == 0:
        return x.copy()
    out = np.full(x.shape, np.nan)
    if k < x.shape[0]:
        out[k:] = x[:-k]
    return out


def _rolling(x: np.ndarray, w: int, reducer) -> np.ndarray:
    out = np.full(x.shape, np.nan)
    if w > x.shape[0]:
        return out
    win = sliding_window_view(x, w, axis=0)
    with np.errstate(invalid="ignore", divide="ignore", over="ignore"):
        out[w - 1:] = reducer(win)
    return out


def ts_mean(x, w):
    return _rolling(x, w, lambda v: v.mean(axis=-1))


def ts_sum(x, w):
    return _rolling(x, w, lambda v: v.sum(axis=-1))


def ts_std(x, w):
    if w < 2:
        return np.full(x.shape, np.nan)
    return _rolling(x, w, lambda v: v.std(axis=-1, ddof=1))


def ts_max(x, w):
    return _rolling(x, w, lambda v: v.max(axis=-1))


def ts_min(x, w):
    return _rolling(x, w, lambda v: v.min(axis=-1))


def ts_delta(x, w):
    return x - ts_lag(x, w)


def build_primitives(panel: Panel) -> Panel:
    """Add the ten baseline predictors as fields.

    Windowed predictors use the trailing ``WINDOW`` observations including the
    current date; shorter histories give NaN.
    """
    pres = panel.present
    ret = panel.fields["ret"]
    price = np.abs(panel.fields["price"])
    volume = panel.fields["volume"]

    def hist(values, fn):
        return apply_along_history(values, pres, fn)

    def bcast(series):
        return np.where(pres, series[:, None], np.nan)

    with np.errstate(divide="ignore", invalid="ignore"):
        vol_ma = hist(volume, lambda v: ts_mean(v, WINDOW))
        vol_ratio = volume / vol_ma
        price_ma = price / hist(price, lambda v: ts_mean(v, WINDOW))
        prev_vol = hist(volume, lambda v: ts_lag(v, 1))
        vol_growth = volume / prev_vol - 1.0
        mkt = panel.market["market_ret_vw"]
        mkt_vol = ts_std(mkt[:, None], WINDOW)[:, 0]
        if "bid" in panel.fields and "ask" in panel.fields:
            bid, ask = panel.fields["bid"], panel.fields["ask"]
            mid = 0.5 * (bid + ask)
            spread = np.where(mid > 0, (ask - bid) / mid, np.nan)
        else:
            spread = np.full(pres.shape, np.nan)

    prims = {
        "ret": np.where(pres, ret, np.nan),
        "mkt_ret": bcast(mkt),
        "price": np.where(pres, price, np.nan),
        "volume": np.where(pres, volume, np.nan),
        "vol_ratio": vol_ratio,
        "rvol20": hist(ret, lambda v: ts_std(v, WINDOW)),
        "price_ma": price_ma,
        "mkt_vol20": bcast(mkt_vol),
        "vol_growth": vol_growth,
        "spread": spread,
    }
    for name, grid in prims.items():
        grid[~np.isfinite(grid)] = np.nan
    return panel.with_fields(prims)


# --------------------------------------------------------------------------
# cross-sectional transforms


def winsorize_cross_section(values, p_low: float = 0.01, p_high: float = 0.99) -> np.ndarray:
    """Clip one date's values to linear-interpolation quantiles of its finite entries."""
    if not 0.0 <= p_low < p_high <= 1.0:
        raise ValueError("need 0 <= p_low < p_high <= 1")
    values = np.asarray(values, dtype=float)
    finite = np.isfinite(values)
    if not finite.any():
        return values.copy()
    lo, hi = np.quantile(values[finite], [p_low, p_high])
    out = values.copy()
    out[finite] = np.clip(values[finite], lo, hi)
    return out


def zscore_cross_section(values) -> tuple[np.ndarray, bool]:
    """Standardize one date with the sample (n-1) standard deviation.

    Returns ``(z, degenerate)``. Fewer than two finite values or zero
    dispersion gives zeros on the finite entries and ``degenerate=True``.
    """
    values = np.asarray(values, dtype=float)
    finite = np.isfinite(values)
    out = np.full(values.shape, np.nan)
    v = values[finite]
    if v.size < 2 or np.ptp(v) == 0:
        out[finite] = 0.0
        return out, True
    out[finite] = (v - v.mean()) / v.std(ddof=1)
    return out, False


def winsorize_panel(grid: np.ndarray, p_low: float = 0.01, p_high: float = 0.99) -> np.ndarray:
    """Row-wise (per-date) :func:`winsorize_cross_section` over a 2-D grid."""
    out = np.full(grid.shape, np.nan)
    has = np.isfinite(grid).any(axis=1)
    if has.any():
        sub = grid[has]
        q = np.nanquantile(sub, [p_low, p_high], axis=1)
        out[has] = np.clip(sub, q[0][:, None], q[1][:, None])
    return out


def zscore_panel(grid: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise z-score; returns ``(z, degenerate_rows)``."""
    finite = np.isfinite(grid)
    n = finite.sum(axis=1)
    filled = np.where(finite, grid, 0.0)
    with np.errstate(invalid="ignore", divide="ignore"):
        mean = filled.sum(axis=1) / n
        dev = np.where(finite, grid - mean[:, None], 0.0)
        std = np.sqrt((dev**2).sum(axis=1) / (n - 1))
        hi = np.where(finite, grid, -np.inf).max(axis=1)
        lo = np.where(finite, grid, np.inf).min(axis=1)
    degenerate = (n < 2) | (hi == lo)
    safe = np.where(degenerate, 1.0, std)
    z = np.where(finite, dev / safe[:, None], np.nan)
    z[degenerate] = np.where(finite[degenerate], 0.0, np.nan)
    return z, degenerate


def normalize_panel(grid: np.ndarray, p_low: float = 0.01, p_high: float = 0.99) -> np.ndarray:
    """Z-score of the winsorized values, date by date."""
    return zscore_panel(winsorize_panel(grid, p_low, p_high))[0]
