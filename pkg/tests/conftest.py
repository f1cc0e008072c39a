import io

import numpy as np
import pytest

from factorloop.panel import REQUIRED_COLUMNS, Panel, ingest_panel
from factorloop.synth import SynthParams, business_days, planted_panel


def make_csv(rows, columns=REQUIRED_COLUMNS) -> str:
    out = io.StringIO()
    out.write(",".join(columns) + "\n")
    for r in rows:
        out.write(",".join(str(r.get(c, "")) for c in columns) + "\n")
    return out.getvalue()


def row(date, stock, ret=0.01, price=10.0, volume=1000, exch=1, share=10, mvw=0.0, msp=0.0, **extra):
    d = {
        "date": date,
        "stock_id": stock,
        "ret": ret,
        "price": price,
        "volume": volume,
        "exchange_code": exch,
        "share_code": share,
        "market_ret_vw": mvw,
        "market_ret_sp": msp,
    }
    d.update(extra)
    return d


def grid_panel(fields: dict, present=None, start="2020-01-01", market=None) -> Panel:
    """Panel straight from (T, N) grids; missing required fields default to ones."""
    any_grid = np.asarray(next(iter(fields.values())), dtype=float)
    T, N = any_grid.shape
    present = np.ones((T, N), bool) if present is None else np.asarray(present, bool)
    base = {k: np.ones((T, N)) for k in ("ret", "price", "volume", "exchange_code", "share_code")}
    base.update({k: np.asarray(v, dtype=float) for k, v in fields.items()})
    base = {k: np.where(present, v, np.nan) for k, v in base.items()}
    market = market or {"market_ret_vw": np.zeros(T), "market_ret_sp": np.zeros(T)}
    stocks = np.array([f"S{j:03d}" for j in range(N)], dtype=object)
    return Panel(business_days(start, T), stocks, base, present, {k: np.asarray(v, float) for k, v in market.items()})


@pytest.fixture(scope="session")
def small_planted():
    return planted_panel(SynthParams(n_stocks=60, n_days=300, seed=3))


@pytest.fixture
def ingest_text():
    def _ingest(rows, columns=REQUIRED_COLUMNS):
        return ingest_panel(make_csv(rows, columns))

    return _ingest


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
