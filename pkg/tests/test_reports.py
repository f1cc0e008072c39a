import math

import numpy as np

from factorloop import reports as rp
from factorloop.backtest import QuarterRow, decile_backtest, quarterly_table, with_costs
from factorloop.metrics import TABLE3_COLUMNS, perf_summary
from factorloop.synth import business_days


def test_report_column_layouts():
    assert TABLE3_COLUMNS == ("Sharpe", "IC", "ICIR", "ICL", "ICLIR", "Sortino", "Calmar", "Annual Ret", "Max DD")
    assert rp.TABLE4_COLUMNS[1:] == ("CAPM α", "FF3 α", "FF5 α", "FF6 α")
    assert rp.TABLE8_COLUMNS[1:] == tuple(f"H{h}" for h in range(1, 8))
    assert rp.TABLE9_COLUMNS == ("Quarter", "Avg Turnover (%)", "Gross Ret (%)", "Net Ret (%)", "Gross Sharpe", "Net Sharpe")


def test_formatting():
    assert rp.fmt(None) == rp.fmt(math.nan) == "NA"
    assert rp.fmt(1.23456) == "1.2346" and rp.fmt(np.int64(3)) == "3"
    assert rp.pct(0.5953) == "59.53"
    assert rp.paren(2.5) == "(2.50)" and rp.paren(None) == "NA"


def test_table_roundtrip(tmp_path):
    secs = [rp.Section(("a", "b"), [("1", "x,y")], "Panel A: first"), rp.Section(("c",), [("2",), ("3",)], "Panel B")]
    path = rp.write_table(tmp_path / "t.csv", ["Title", "config_hash=abc seed=1"], secs)
    text = path.read_text()
    assert text.startswith("# Title\n# config_hash=abc seed=1\n# Panel A: first\na,b\n")
    back = rp.read_table(path)
    assert [s.columns for s in back] == [("a", "b"), ("c",)]
    assert back[0].rows == [("1", "x,y")] and back[1].label == "Panel B"


def test_table5_layout():
    perf = perf_summary(np.array([0.01, -0.005, 0.002]))
    q = [QuarterRow("2021Q1", 0.01, 0.2, 0.1, 2.0, 0.05, 60, partial=True)]
    a, b = rp.table5_sections("2021-01-04..2021-03-31", 0.0069, perf, 0.005, 3, q)
    assert a.columns == rp.TABLE5_COLUMNS and a.columns[0] == ""
    assert a.rows[0][0] == "Long-Short" and a.rows[0][5] == "-0.50"
    assert b.rows[0][0] == "2021Q1 (partial)" and b.rows[0][5] == "-5.00"


def test_table9_turnover_and_partition():
    dates = business_days("2021-01-04", 130)
    rng = np.random.default_rng(0)
    s, r = rng.normal(size=(130, 30)), rng.normal(0, 0.01, (130, 30))
    bt = with_costs(decile_backtest(s, r, dates), r)
    qs = quarterly_table(dates, bt.spread, bt.turnover, bt.net)
    sec = rp.table9_section(qs)
    assert sec.columns == rp.TABLE9_COLUMNS and len(sec.rows) == len(qs)
    assert sec.rows[0][1] == rp.pct(qs[0].avg_turnover)
    assert float(sec.rows[0][1]) > 100  # random daily re-sorts trade over half of each leg


def test_svg_chart(tmp_path):
    dates = business_days("2021-01-04", 50)
    r = np.random.default_rng(1).normal(0, 0.01, 50)
    svg = rp.line_chart_svg(dates, {"Gross": rp.cumulative(r), "Net <&>": rp.cumulative(r - 1e-4)}, "Title", dashed=("Net <&>",))
    assert svg.startswith("<svg") and svg.rstrip().endswith("</svg>")
    assert svg.count("<polyline") == 2 and "stroke-dasharray" in svg and "&lt;&amp;&gt;" in svg
    np.testing.assert_allclose(rp.cumulative([0.1, -0.1]), [0.1, -0.01])
