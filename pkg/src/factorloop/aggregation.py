"""Composite scores from promoted factors: equal-weight, linear and boosted trees,
fitted walk-forward so every prediction uses only earlier training data.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .gbdt import ColumnMismatch, GbdtModel, GbdtParams, _check_columns, fit_gbdt
from .grammar import evaluate, parse_expr
from .metrics import ic_tstat, rank_ic
from .panel import Panel, normalize_panel, winsorize_panel


class SingularDesign(np.linalg.LinAlgError):
    pass


@dataclass(frozen=True, eq=False)
class FeatureMatrix:
    """Per-(date, stock) factor z-scores plus the next-day target.

    ``X`` is ``(n_dates, n_stocks, n_factors)``; ``target`` is the forward
    return winsorized per date (fitting only); ``fwd`` is the raw forward
    return used for portfolio accounting.
    """

    dates: np.ndarray
    stocks: np.ndarray
    names: tuple
    X: np.ndarray
    target: np.ndarray
    fwd: np.ndarray

    def rows(self, date_slice) -> tuple[np.ndarray, np.ndarray]:
        X = self.X[date_slice].reshape(-1, len(self.names))
        y = self.target[date_slice].reshape(-1)
        return X, y


def build_feature_matrix(panel: Panel, exprs: dict, p_low: float = 0.01, p_high: float = 0.99) -> FeatureMatrix:
    """Evaluate and z-score each named expression; attach the winsorized target."""
    names = tuple(exprs)
    grids = []
    for name in names:
        e = exprs[name]
        e = parse_expr(e) if isinstance(e, str) else e
        grids.append(normalize_panel(evaluate(e, panel).values, p_low, p_high))
    fwd = panel.forward_returns()
    fwd = np.where(panel.present, fwd, np.nan)
    X = np.stack(grids, axis=-1) if grids else np.zeros(panel.shape + (0,))
    return FeatureMatrix(panel.dates, panel.stocks, names, X, winsorize_panel(fwd, p_low, p_high), fwd)


def equal_weight_composite(z: np.ndarray) -> np.ndarray:
    """Mean of available z-scores along the last axis; NaN when fewer than half are present."""
    z = np.asarray(z, dtype=float)
    m = z.shape[-1]
    if m < 1:
        raise ValueError("need at least one factor column")
    finite = np.isfinite(z)
    n = finite.sum(axis=-1)
    with np.errstate(invalid="ignore", divide="ignore"):
        s = np.where(finite, z, 0.0).sum(axis=-1) / n
    return np.where((n > 0) & (n >= m / 2.0), s, np.nan)


@dataclass
class LinearModel:
    names: tuple
    intercept: float
    weights: np.ndarray
    ridge: float = 0.0

    def predict(self, X, names=None) -> np.ndarray:
        X = _check_columns(X, names, self.names)
        return self.intercept + X @ self.weights

    def to_json(self) -> dict:
        return {
            "kind": "linear",
            "version": 1,
            "names": list(self.names),
            "intercept": self.intercept,
            "weights": {n: float(w) for n, w in zip(self.names, self.weights)},
            "ridge": self.ridge,
        }

    @classmethod
    def from_json(cls, d: dict) -> "LinearModel":
        names = tuple(d["names"])
        return cls(names, float(d["intercept"]), np.array([d["weights"][n] for n in names]), float(d.get("ridge", 0.0)))


def fit_linear(X: np.ndarray, y: np.ndarray, ridge: float = 0.0, names=None) -> LinearModel:
    """Minimize ||y - a - X b||^2 + ridge ||b||^2 over finite rows (intercept unpenalized)."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    ok = np.isfinite(y) & np.all(np.isfinite(X), axis=1)
    X, y = X[ok], y[ok]
    k = X.shape[1]
    if names is None:
        names = tuple(f"f{i}" for i in range(k))
    if X.shape[0] < k + 1:
        raise SingularDesign(f"{X.shape[0]} rows for {k} features")
    A = np.column_stack([np.ones(X.shape[0]), X])
    if ridge == 0 and np.linalg.matrix_rank(A) < k + 1:
        raise SingularDesign("rank-deficient design; use a positive ridge penalty")
    P = np.eye(k + 1) * ridge
    P[0, 0] = 0.0
    coef = np.linalg.solve(A.T @ A + P, A.T @ y)
    return LinearModel(tuple(names), float(coef[0]), coef[1:], ridge)


def predict(model, X, names=None) -> np.ndarray:
    return model.predict(X, names)


def load_model(d: dict):
    if d["kind"] == "linear":
        return LinearModel.from_json(d)
    if d["kind"] == "gbdt":
        return GbdtModel.from_json(d)
    raise ValueError(f"unknown model kind {d['kind']!r}")


def dump_model(model) -> str:
    return json.dumps(model.to_json(), indent=1, sort_keys=True) + "\n"


# --------------------------------------------------------------------------
# walk-forward fitting


@dataclass(frozen=True)
class WalkForwardPlan:
    train_window: int = 250
    refit_every: int = 60
    embargo: int = 1

    def __post_init__(self):
        if self.train_window < 1 or self.refit_every < 1:
            raise ValueError("train_window and refit_every must be >= 1")
        if self.embargo < 1:
            raise ValueError("embargo must be >= 1 at daily horizon")

    def segments(self, n_dates: int, start: int = 0) -> list[tuple[int, int, int, int]]:
        """(train_lo, train_hi, pred_lo, pred_hi) index ranges, hi exclusive."""
        first = max(start, self.train_window + self.embargo - 1)
        out = []
        b = first
        while b < n_dates:
            hi = min(b + self.refit_every, n_dates)
            train_hi = b - self.embargo + 1
            out.append((train_hi - self.train_window, train_hi, b, hi))
            b = hi
        return out


@dataclass
class WalkForwardResult:
    scores: np.ndarray
    segments: list
    models: list = field(default_factory=list)


def fit_model(kind: str, X, y, names, ridge: float = 0.0, params: GbdtParams = GbdtParams()):
    if kind == "linear":
        return fit_linear(X, y, ridge, names)
    if kind == "gbdt":
        return fit_gbdt(X, y, params, names)
    raise ValueError(f"unknown model kind {kind!r}")


def walk_forward(fm: FeatureMatrix, plan: WalkForwardPlan, kind: str = "linear", ridge: float = 0.0, params: GbdtParams = GbdtParams(), start: int = 0) -> WalkForwardResult:
    """Refit on each trailing window and score the following block of dates.

    ``kind="equal"`` needs no fitting and scores every date.
    """
    T, N, _ = fm.X.shape
    if kind == "equal":
        return WalkForwardResult(equal_weight_composite(fm.X), [])
    scores = np.full((T, N), np.nan)
    result = WalkForwardResult(scores, [])
    for lo, hi, plo, phi in plan.segments(T, start):
        X, y = fm.rows(slice(lo, hi))
        ok = np.isfinite(y)
        if kind == "linear":
            ok &= np.all(np.isfinite(X), axis=1)
        if ok.sum() < max(10, X.shape[1] + 1):
            continue
        model = fit_model(kind, X[ok], y[ok], fm.names, ridge, params)
        Xp = fm.X[plo:phi].reshape(-1, len(fm.names))
        scores[plo:phi] = model.predict(Xp).reshape(phi - plo, N)
        result.segments.append((lo, hi, plo, phi))
        result.models.append(model)
    scores[~np.isfinite(fm.X).any(axis=-1)] = np.nan
    return result


def mean_rank_ic(scores: np.ndarray, fwd: np.ndarray, min_names: int = 10) -> float:
    ic = rank_ic(scores, fwd, min_names)
    return ic_tstat(ic)[0]


def tune_gbdt(fm: FeatureMatrix, train: slice, valid: slice, grid: dict, base: GbdtParams = GbdtParams()) -> tuple[GbdtParams, list]:
    """Pick the grid point with the best mean validation rank IC."""
    X, y = fm.rows(train)
    Xv = fm.X[valid].reshape(-1, len(fm.names))
    n_valid = fm.X[valid].shape[0]
    keys = sorted(grid)
    trials = []
    best, best_ic = base, -math.inf
    for combo in itertools.product(*(grid[k] for k in keys)):
        params = GbdtParams(**{**asdict(base), **dict(zip(keys, combo))})
        model = fit_gbdt(X, y, params, fm.names)
        s = model.predict(Xv).reshape(n_valid, -1)
        ic = mean_rank_ic(s, fm.fwd[valid])
        trials.append((dict(zip(keys, combo)), ic))
        if ic > best_ic:
            best, best_ic = params, ic
    return best, trials
