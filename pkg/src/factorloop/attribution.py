"""Benchmark-model alpha regressions with Newey-West standard errors."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import Mapping, TextIO

import numpy as np

BENCH_COLUMNS = ("MKT-RF", "SMB", "HML", "RMW", "CMA", "MOM", "RF")
MODEL_SPECS = {
    "CAPM": ("MKT-RF",),
    "FF3": ("MKT-RF", "SMB", "HML"),
    "FF5": ("MKT-RF", "SMB", "HML", "RMW", "CMA"),
    "FF6": ("MKT-RF", "SMB", "HML", "RMW", "CMA", "MOM"),
    "MEAN": (),
}


class SpecError(ValueError):
    pass


class SingularityError(np.linalg.LinAlgError):
    pass


@dataclass(frozen=True, eq=False)
class BenchmarkReturns:
    dates: np.ndarray
    factors: Mapping[str, np.ndarray]  # daily decimals
    source: str = ""

    def require(self, spec: str) -> tuple:
        cols = MODEL_SPECS[spec]
        missing = [c for c in cols if c not in self.factors]
        if missing:
            raise SpecError(f"{spec} needs missing factor column(s): {', '.join(missing)}")
        return cols


def ingest_factor_returns(source: TextIO | str, percent: bool = True, source_id: str = "") -> BenchmarkReturns:
    """Read a date + factor-columns file (Fama-French daily layout by default).

    Dates may be ISO ``YYYY-MM-DD`` or compact ``YYYYMMDD``. Empty cells are
    errors rather than silently filled.
    """
    if isinstance(source, str):
        source = io.StringIO(source)
    rows = [r for r in csv.reader(line for line in source if not line.startswith("#")) if r]
    header = [h.strip() for h in rows[0]]
    if header[0].lower() not in ("date", ""):
        raise SpecError(f"first column must be the date, got {header[0]!r}")
    scale = 0.01 if percent else 1.0
    dates, data = [], {h: [] for h in header[1:]}
    for lineno, row in enumerate(rows[1:], start=2):
        d = row[0].strip()
        if len(d) == 8 and d.isdigit():
            d = f"{d[:4]}-{d[4:6]}-{d[6:]}"
        dates.append(np.datetime64(d, "D"))
        for h, cell in zip(header[1:], row[1:]):
            if not cell.strip():
                raise SpecError(f"line {lineno}: empty value for {h}")
            data[h].append(float(cell) * scale)
    dates = np.array(dates, dtype="datetime64[D]")
    if len(dates) > 1 and not np.all(np.diff(dates) > np.timedelta64(0, "D")):
        raise SpecError("benchmark dates must be strictly increasing")
    return BenchmarkReturns(dates, {h: np.array(v) for h, v in data.items()}, source_id)


def write_factor_returns(bench: BenchmarkReturns, out: TextIO, percent: bool = True) -> None:
    scale = 100.0 if percent else 1.0
    cols = [c for c in BENCH_COLUMNS if c in bench.factors] + sorted(set(bench.factors) - set(BENCH_COLUMNS))
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["date"] + cols)
    for i, d in enumerate(bench.dates):
        w.writerow([str(d)] + [repr(float(bench.factors[c][i] * scale)) for c in cols])


def ols(y: np.ndarray, X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Least-squares coefficients and residuals; raises on a singular design."""
    xtx = X.T @ X
    if np.linalg.matrix_rank(X) < X.shape[1]:
        raise SingularityError("collinear regressors")
    beta = np.linalg.solve(xtx, X.T @ y)
    return beta, y - X @ beta


def newey_west_cov(X: np.ndarray, resid: np.ndarray, lags: int) -> np.ndarray:
    """HAC sandwich (X'X)^-1 S (X'X)^-1 with Bartlett weights 1 - j/(lags+1).

    No small-sample correction; ``lags=0`` is White's estimator.
    """
    if lags < 0:
        raise ValueError("lags must be >= 0")
    xu = X * resid[:, None]
    S = xu.T @ xu
    for j in range(1, lags + 1):
        w = 1.0 - j / (lags + 1.0)
        G = xu[j:].T @ xu[:-j]
        S += w * (G + G.T)
    bread = np.linalg.inv(X.T @ X)
    return bread @ S @ bread


def auto_lags(n: int) -> int:
    return int(math.floor(4.0 * (n / 100.0) ** (2.0 / 9.0)))


def nw_mean_tstat(x, lags: int = 5) -> tuple[float, float]:
    """Mean of a series and its Newey-West t-statistic."""
    x = np.asarray(x, dtype=float)
    x = x[np.isfinite(x)]
    if x.size < 3:
        return (float(x.mean()) if x.size else math.nan), math.nan
    X = np.ones((x.size, 1))
    mean = float(x.mean())
    resid = x - mean
    if not np.any(resid):
        return mean, math.nan
    se = math.sqrt(newey_west_cov(X, resid, min(lags, x.size - 1))[0, 0])
    return mean, mean / se


@dataclass(frozen=True)
class AlphaEstimate:
    spec: str
    alpha: float
    ann_alpha: float
    betas: dict
    alpha_se: float
    nw_tstat: float
    nw_lags: int
    n_obs: int
    beta_se: dict


def alpha_regression(
    dates,
    portfolio,
    bench: BenchmarkReturns,
    spec: str = "CAPM",
    nw_lags: int | None = 5,
    subtract_rf: bool = False,
) -> AlphaEstimate:
    """OLS of portfolio returns on an intercept plus the spec's factors.

    Long-short spreads are self-financing so RF is not subtracted unless
    ``subtract_rf``. ``nw_lags=None`` picks floor(4 (T/100)^(2/9)).
    """
    if spec not in MODEL_SPECS:
        raise SpecError(f"unknown model spec {spec!r}")
    cols = bench.require(spec)
    if subtract_rf and "RF" not in bench.factors:
        raise SpecError("RF column needed for excess returns")
    dates = np.asarray(dates, dtype="datetime64[D]")
    portfolio = np.asarray(portfolio, dtype=float)
    common, ia, ib = np.intersect1d(dates, bench.dates, return_indices=True)
    y = portfolio[ia]
    if subtract_rf:
        y = y - bench.factors["RF"][ib]
    X = np.column_stack([np.ones(len(common))] + [bench.factors[c][ib] for c in cols])
    ok = np.isfinite(y) & np.all(np.isfinite(X), axis=1)
    y, X = y[ok], X[ok]
    if len(y) < 3 * X.shape[1]:
        raise SpecError(f"{len(y)} overlapping observations, need {3 * X.shape[1]}")
    lags = auto_lags(len(y)) if nw_lags is None else nw_lags
    beta, resid = ols(y, X)
    cov = newey_west_cov(X, resid, lags)
    se = np.sqrt(np.diag(cov))
    alpha = float(beta[0])
    return AlphaEstimate(
        spec=spec,
        alpha=alpha,
        ann_alpha=(1.0 + alpha) ** 252 - 1.0,
        betas={c: float(b) for c, b in zip(cols, beta[1:])},
        alpha_se=float(se[0]),
        nw_tstat=alpha / se[0] if se[0] > 0 else math.nan,
        nw_lags=lags,
        n_obs=len(y),
        beta_se={c: float(s) for c, s in zip(cols, se[1:])},
    )
