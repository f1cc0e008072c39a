import io
import math

import numpy as np
import pytest

from factorloop.attribution import (
    BenchmarkReturns,
    SingularityError,
    SpecError,
    alpha_regression,
    auto_lags,
    ingest_factor_returns,
    newey_west_cov,
    nw_mean_tstat,
    ols,
    write_factor_returns,
)
from factorloop.synth import business_days

COLS = ("MKT-RF", "SMB", "HML", "RMW", "CMA", "MOM", "RF")


def _bench(n=300, seed=0, drop=()):
    rng = np.random.default_rng(seed)
    dates = business_days("2020-01-02", n)
    f = {c: rng.normal(0, 0.01, n) for c in COLS if c not in drop}
    f["RF"] = np.full(n, 0.0001)
    return BenchmarkReturns(dates, f)


def _nw_oracle(X, y, lags):
    """Textbook matrix formulas with explicit loops over observation pairs."""
    n, k = X.shape
    beta = np.linalg.inv(X.T @ X) @ X.T @ y
    u = y - X @ beta
    S = np.zeros((k, k))
    for t in range(n):
        S += u[t] ** 2 * np.outer(X[t], X[t])
    for j in range(1, lags + 1):
        w = 1 - j / (lags + 1)
        for t in range(j, n):
            S += w * u[t] * u[t - j] * (np.outer(X[t], X[t - j]) + np.outer(X[t - j], X[t]))
    bread = np.linalg.inv(X.T @ X)
    return beta, bread @ S @ bread


FIXED_X = np.column_stack([np.ones(20), np.linspace(-1, 1, 20) ** 3, np.cos(np.arange(20.0))])
FIXED_Y = 0.3 + 0.8 * FIXED_X[:, 1] - 0.2 * FIXED_X[:, 2] + np.sin(np.arange(20.0) * 1.7) * 0.1


@pytest.mark.parametrize("lags", [0, 1, 3, 5])
def test_nw_matches_matrix_oracle(lags):
    beta, resid = ols(FIXED_Y, FIXED_X)
    cov = newey_west_cov(FIXED_X, resid, lags)
    b2, cov2 = _nw_oracle(FIXED_X, FIXED_Y, lags)
    np.testing.assert_allclose(beta, b2, atol=1e-8)
    np.testing.assert_allclose(cov, cov2, atol=1e-8)


def test_nw_against_statsmodels():
    sm = pytest.importorskip("statsmodels.api")
    beta, resid = ols(FIXED_Y, FIXED_X)
    res = sm.OLS(FIXED_Y, FIXED_X).fit(cov_type="HAC", cov_kwds={"maxlags": 4, "use_correction": False})
    np.testing.assert_allclose(newey_west_cov(FIXED_X, resid, 4), res.cov_params(), atol=1e-10)


def test_lag_zero_is_white():
    beta, resid = ols(FIXED_Y, FIXED_X)
    bread = np.linalg.inv(FIXED_X.T @ FIXED_X)
    white = bread @ (FIXED_X.T * resid**2) @ FIXED_X @ bread
    np.testing.assert_allclose(newey_west_cov(FIXED_X, resid, 0), white, atol=1e-14)


def test_residuals_orthogonal():
    _, resid = ols(FIXED_Y, FIXED_X)
    np.testing.assert_allclose(FIXED_X.T @ resid, 0.0, atol=1e-8)


def test_capm_on_market_is_zero_alpha():
    b = _bench()
    est = alpha_regression(b.dates, b.factors["MKT-RF"], b, "CAPM")
    assert abs(est.alpha) < 1e-12
    assert est.betas["MKT-RF"] == pytest.approx(1.0)


def test_mean_spec_alpha_is_sample_mean():
    b = _bench()
    x = np.random.default_rng(1).normal(0.001, 0.01, len(b.dates))
    est = alpha_regression(b.dates, x, b, "MEAN")
    assert est.alpha == pytest.approx(x.mean())
    m, t = nw_mean_tstat(x, 5)
    assert est.nw_tstat == pytest.approx(t)


def test_scaling_alpha_and_t():
    b = _bench()
    rng = np.random.default_rng(2)
    x = 0.0005 + 0.3 * b.factors["SMB"] + rng.normal(0, 0.01, len(b.dates))
    a = alpha_regression(b.dates, x, b, "FF6")
    c = alpha_regression(b.dates, 3.0 * x, b, "FF6")
    assert c.alpha == pytest.approx(3 * a.alpha)
    assert c.nw_tstat == pytest.approx(a.nw_tstat)
    assert a.ann_alpha == pytest.approx((1 + a.alpha) ** 252 - 1)
    assert a.n_obs == len(b.dates) and a.nw_lags == 5


def test_zero_variance_factor_is_singular():
    b = _bench()
    b.factors["HML"] = np.zeros(len(b.dates))
    with pytest.raises(SingularityError):
        alpha_regression(b.dates, b.factors["SMB"], b, "FF3")


def test_missing_factor_named():
    b = _bench(drop=("MOM",))
    with pytest.raises(SpecError, match="MOM"):
        alpha_regression(b.dates, b.factors["SMB"], b, "FF6")


def test_too_few_observations():
    b = _bench(n=10)
    with pytest.raises(SpecError):
        alpha_regression(b.dates, b.factors["SMB"], b, "FF6")


def test_rf_subtraction_and_alignment():
    b = _bench()
    x = b.factors["MKT-RF"] + b.factors["RF"]
    est = alpha_regression(b.dates, x, b, "CAPM", subtract_rf=True)
    assert abs(est.alpha) < 1e-12
    # only the overlapping dates enter
    est = alpha_regression(b.dates[:100], x[:100], b, "CAPM")
    assert est.n_obs == 100


def test_auto_lags():
    assert auto_lags(100) == 4
    est = alpha_regression(_bench().dates, _bench().factors["SMB"], _bench(), "CAPM", nw_lags=None)
    assert est.nw_lags == auto_lags(300)


def test_ingest_percent():
    text = "date,MKT-RF,SMB\n20200102,1.0,-0.5\n20200103,2.0,0.25\n20200106,0.5,0\n20200107,-1.5,1\n20200108,3,2\n"
    b = ingest_factor_returns(text)
    np.testing.assert_allclose(b.factors["MKT-RF"], [0.01, 0.02, 0.005, -0.015, 0.03])
    assert str(b.dates[0]) == "2020-01-02"
    with pytest.raises(SpecError):
        ingest_factor_returns("date,MKT-RF\n2020-01-02,\n")
    with pytest.raises(SpecError):
        ingest_factor_returns("date,MKT-RF\n2020-01-03,1\n2020-01-02,1\n")


def test_roundtrip():
    b = _bench(n=20)
    buf = io.StringIO()
    write_factor_returns(b, buf)
    again = ingest_factor_returns(buf.getvalue())
    np.testing.assert_array_equal(again.dates, b.dates)
    for c in COLS:
        np.testing.assert_allclose(again.factors[c], b.factors[c], rtol=1e-14)
