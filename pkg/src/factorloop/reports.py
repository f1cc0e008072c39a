"""Delimited-text tables and SVG line charts.

Every file starts with ``# `` header lines carrying the table title, the run's
config hash and seed, so two runs with the same inputs write identical bytes.
Numbers are formatted with fixed precision for the same reason.
"""

from __future__ import annotations

import csv
import math
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .metrics import TABLE3_COLUMNS

TABLE1_COLUMNS = ("Screen", "Obs", "Stocks")
TABLE4_COLUMNS = ("Factor", "CAPM α", "FF3 α", "FF5 α", "FF6 α")
TABLE6_COLUMNS = ("Portfolio", "CAPM α", "FF3 α", "FF5 α", "FF6 α")
TABLE5_COLUMNS = ("", "Period Ret. (%)", "Ann. Ret. (%)", "Ann. Vol. (%)", "Sharpe", "Max DD (%)", "N")
TABLE7_DECILE_COLUMNS = ("Portfolio", "Period Return (%)", "Ann. Sharpe", "N Days")
TABLE7_SPREAD_COLUMNS = ("Specification", "Period Return (%)", "Ann. Sharpe", "N Days")
TABLE8_COLUMNS = ("Portfolio", "H1", "H2", "H3", "H4", "H5", "H6", "H7")
TABLE9_COLUMNS = ("Quarter", "Avg Turnover (%)", "Gross Ret (%)", "Net Ret (%)", "Gross Sharpe", "Net Sharpe")
LIBRARY_COLUMNS = ("Factor", "Expression", "Rationale")
ATTRIBUTION_SPECS = ("CAPM", "FF3", "FF5", "FF6")


def fmt(x, digits: int = 4) -> str:
    if x is None:
        return "NA"
    if isinstance(x, (int, np.integer)) and not isinstance(x, bool):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        if not math.isfinite(x):
            return "NA"
        return f"{x:.{digits}f}"
    return str(x)


def pct(x, digits: int = 2) -> str:
    return fmt(None if x is None else 100.0 * x, digits)


def paren(x, digits: int = 2) -> str:
    s = fmt(x, digits)
    return s if s == "NA" else f"({s})"


def header_lines(title: str, config_hash: str, seed, extra: Iterable[str] = ()) -> list[str]:
    return [title, f"config_hash={config_hash} seed={seed}", *extra]


class Section:
    """One header row plus data rows; a table may hold several (panels)."""

    def __init__(self, columns: Sequence[str], rows: Iterable[Sequence], label: str = ""):
        self.columns = tuple(columns)
        self.rows = [tuple(r) for r in rows]
        self.label = label
        for r in self.rows:
            if len(r) != len(self.columns):
                raise ValueError(f"row {r!r} has {len(r)} cells for {len(self.columns)} columns")


def write_table(path, header: Sequence[str], sections: Sequence[Section], delimiter: str = ",") -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        for line in header:
            fh.write(f"# {line}\n")
        w = csv.writer(fh, delimiter=delimiter, lineterminator="\n")
        for s in sections:
            if s.label:
                fh.write(f"# {s.label}\n")
            w.writerow(s.columns)
            w.writerows(s.rows)
    return path


def read_table(path) -> list[Section]:
    """Parse a file written by ``write_table`` back into sections of strings."""
    sections: list[Section] = []
    label = ""
    cols = None
    rows: list = []
    with Path(path).open(encoding="utf-8", newline="") as fh:
        lines = fh.read().splitlines()
    data = []
    for line in lines:
        if line.startswith("# "):
            if cols is not None:
                sections.append(Section(cols, rows, label))
                cols, rows = None, []
            label = line[2:]
            continue
        data = next(csv.reader([line]))
        if cols is None:
            cols = data
        else:
            rows.append(data)
    if cols is not None:
        sections.append(Section(cols, rows, label))
    return sections


def write_series(path, header: Sequence[str], dates, columns: dict) -> Path:
    """(date, value, ...) rows; one column per named series."""
    names = list(columns)
    rows = []
    for i, d in enumerate(np.asarray(dates).astype(str)):
        rows.append((d, *(fmt(float(columns[n][i]), 8) for n in names)))
    return write_table(path, header, [Section(("date", *names), rows)])


# --------------------------------------------------------------------------
# table builders


def table1_section(report) -> Section:
    return Section(TABLE1_COLUMNS, [(name, obs, stocks) for name, obs, stocks in report.to_table()])


def table3_section(library: Sequence[dict]) -> Section:
    """One row per library member from stored metrics dictionaries."""
    rows = []
    for i, entry in enumerate(library, 1):
        m = entry["metrics"]
        mdd = m["max_drawdown"]
        # drawdowns are stored as magnitudes and printed as losses
        vals = (m["sharpe"], m["mean_ic"], m["icir"], m["icl"], m["iclir"], m["sortino"], m["calmar"], m["ann_return"], None if mdd is None else -mdd)
        rows.append((f"Factor {i}", *(fmt(v) for v in vals)))
    return Section(("", *TABLE3_COLUMNS), rows)


def library_section(library: Sequence[dict]) -> Section:
    return Section(LIBRARY_COLUMNS, [(f"Factor {i}", e["expr"], e["rationale"]) for i, e in enumerate(library, 1)])


def table4_sections(labels: Sequence[str], estimates: Sequence[dict], columns=TABLE4_COLUMNS) -> list[Section]:
    """``estimates[i]`` maps spec name to an AlphaEstimate (or None if unavailable)."""
    rows = []
    for label, est in zip(labels, estimates):
        rows.append((label, *(fmt(getattr(est.get(s), "ann_alpha", None), 3) for s in ATTRIBUTION_SPECS)))
        rows.append(("", *(paren(getattr(est.get(s), "nw_tstat", None)) for s in ATTRIBUTION_SPECS)))
    return [Section(columns, rows)]


def _perf_row(label, period_return, perf_or_row, mdd, n):
    p = perf_or_row
    return (label, pct(period_return), pct(p.ann_return), pct(p.ann_vol), fmt(p.sharpe, 2), pct(-mdd), str(n))


def table5_sections(window_label: str, full_return: float, perf, mdd: float, n: int, quarters) -> list[Section]:
    a = Section(TABLE5_COLUMNS, [_perf_row("Long-Short", full_return, perf, mdd, n)], f"Panel A: OOS {window_label}")
    b_rows = []
    for q in quarters:
        label = q.label + (" (partial)" if q.partial else "")
        b_rows.append((label, pct(q.period_return), pct(q.ann_return), pct(q.ann_vol), fmt(q.sharpe, 2), pct(-q.max_drawdown), str(q.n_days)))
    return [a, Section(TABLE5_COLUMNS, b_rows, "Panel B: Quarterly gross")]


def table7_sections(report, net_period_return: float | None = None, net_sharpe: float | None = None) -> list[Section]:
    """Decile panel and D10-D1 spread panel from a BacktestReport."""
    Q = report.n_quantiles
    rows = []
    for q in range(Q):
        r = report.decile_returns[:, q]
        r = r[np.isfinite(r)]
        rows.append((f"D{q + 1}", pct(float(np.prod(1.0 + r) - 1.0)), fmt(report.decile_perf[q].sharpe, 3), str(r.size)))
    s = report.spread[np.isfinite(report.spread)]
    spread_rows = [("Gross", pct(float(np.prod(1.0 + s) - 1.0)), fmt(report.spread_perf.sharpe, 3), str(s.size))]
    if net_period_return is not None:
        spread_rows.append(("Net", pct(net_period_return), fmt(net_sharpe, 3), str(s.size)))
    return [
        Section(TABLE7_DECILE_COLUMNS, rows, "Panel A: Decile (gross)"),
        Section(TABLE7_SPREAD_COLUMNS, spread_rows, f"Panel B: Long-short spread (D{Q}-D1)"),
    ]


def table8_section(labels: Sequence[str], horizon_stats: Sequence[Sequence]) -> Section:
    """Annualized mean spread (%) and Newey-West t per horizon, two rows per portfolio."""
    rows = []
    for label, stats in zip(labels, horizon_stats):
        stats = list(stats)[:7]
        pad = [""] * (7 - len(stats))
        rows.append((label, *(pct(s.ann_mean) for s in stats), *pad))
        rows.append(("", *(paren(s.tstat) for s in stats), *pad))
    return Section(TABLE8_COLUMNS, rows)


def table9_section(quarters) -> Section:
    rows = []
    for q in quarters:
        label = q.label + (" (partial)" if q.partial else "")
        rows.append((label, pct(q.avg_turnover), pct(q.period_return), pct(q.net_return), fmt(q.sharpe, 3), fmt(q.net_sharpe, 3)))
    return Section(TABLE9_COLUMNS, rows)


# --------------------------------------------------------------------------
# SVG line charts

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf")


def line_chart_svg(dates, series: dict, title: str = "", width: int = 720, height: int = 400, dashed: Iterable[str] = (), zero_line: bool = True) -> str:
    """Plain SVG line chart; one polyline per series, legend top-left."""
    dashed = set(dashed)
    names = list(series)
    n = len(dates)
    ys = [np.asarray(series[k], dtype=float) for k in names]
    finite = np.concatenate([y[np.isfinite(y)] for y in ys] + [np.zeros(1)])
    lo, hi = float(finite.min()), float(finite.max())
    if hi == lo:
        hi = lo + 1.0
    ml, mr, mt, mb = 60, 20, 30, 40
    pw, ph = width - ml - mr, height - mt - mb

    def px(i):
        return ml + (pw * i / max(n - 1, 1))

    def py(v):
        return mt + ph * (hi - v) / (hi - lo)

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2:.1f}" y="18" text-anchor="middle" font-family="sans-serif" font-size="14">{_esc(title)}</text>',
        f'<rect x="{ml}" y="{mt}" width="{pw}" height="{ph}" fill="none" stroke="#444"/>',
    ]
    for v in np.linspace(lo, hi, 5):
        out.append(f'<text x="{ml - 6}" y="{py(v) + 4:.1f}" text-anchor="end" font-family="sans-serif" font-size="10">{v:.3g}</text>')
    if n:
        labels = np.asarray(dates).astype(str)
        for i in sorted({0, n // 2, n - 1}):
            out.append(f'<text x="{px(i):.1f}" y="{height - mb + 16}" text-anchor="middle" font-family="sans-serif" font-size="10">{_esc(labels[i])}</text>')
    if zero_line and lo < 0 < hi:
        out.append(f'<line x1="{ml}" y1="{py(0):.1f}" x2="{ml + pw}" y2="{py(0):.1f}" stroke="#999" stroke-dasharray="4 3"/>')
    for k, (name, y) in enumerate(zip(names, ys)):
        color = PALETTE[k % len(PALETTE)]
        pts = " ".join(f"{px(i):.1f},{py(v):.1f}" for i, v in enumerate(y) if math.isfinite(v))
        dash = ' stroke-dasharray="6 4"' if name in dashed else ""
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5"{dash} points="{pts}"/>')
        out.append(f'<text x="{ml + 8}" y="{mt + 14 + 14 * k}" font-family="sans-serif" font-size="11" fill="{color}">{_esc(name)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def _esc(s: str) -> str:
    return str(s).replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


def write_chart(path, dates, series: dict, title: str = "", **kw) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(line_chart_svg(dates, series, title, **kw), encoding="utf-8")
    return path


def cumulative(r) -> np.ndarray:
    """Compounded cumulative return; missing days contribute nothing."""
    return np.cumprod(1.0 + np.nan_to_num(np.asarray(r, dtype=float))) - 1.0
