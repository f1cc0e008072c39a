"""Rule-based promotion gate plus redundancy and implementation-feasibility checks."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass

import numpy as np

from .metrics import EvalMetrics, rank_ic

PROMOTE = "Promote"
HOLD = "Hold"
RETIRE = "Retire"
_ORDER = {RETIRE: 0, HOLD: 1, PROMOTE: 2}


class ProtocolViolation(RuntimeError):
    """Metrics computed under a different protocol, or reading past the IS split."""


@dataclass(frozen=True)
class GateThresholds:
    tau_sig: float = 3.0
    tau_econ: float = 1.0
    tau_fail: float = 1.0
    hurdle_t: float = 3.0
    max_abs_corr: float = 0.8
    max_turnover: float | None = None
    decay_ratio: float = 0.25

    def __post_init__(self):
        if not self.tau_fail < self.tau_sig:
            raise ValueError("tau_fail must be below tau_sig")

    def config_hash(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()[:12]


@dataclass(frozen=True)
class GateDecision:
    verdict: str
    reasons: tuple
    metrics: EvalMetrics
    config_hash: str

    def to_dict(self) -> dict:
        return {
            "verdict": self.verdict,
            "reasons": list(self.reasons),
            "metrics": self.metrics.to_dict(),
            "config_hash": self.config_hash,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GateDecision":
        return cls(d["verdict"], tuple(d["reasons"]), EvalMetrics.from_dict(d["metrics"]), d["config_hash"])


def rank(verdict: str) -> int:
    return _ORDER[verdict]


def decide(m: EvalMetrics, th: GateThresholds, expected_hash: str | None = None, is_end=None) -> GateDecision:
    """Promote iff t >= max(tau_sig, hurdle) and Sharpe >= tau_econ;
    Retire iff t < tau_fail; Hold otherwise. Undefined metrics retire.
    """
    if expected_hash is not None and m.config_hash != expected_hash:
        raise ProtocolViolation(f"metrics hash {m.config_hash} != round hash {expected_hash}")
    if is_end is not None and m.end and np.datetime64(m.end, "D") > np.datetime64(is_end, "D"):
        raise ProtocolViolation(f"metrics reach {m.end}, past in-sample end {is_end}")
    t, sr = m.ic_tstat, m.sharpe
    cfg = th.config_hash()
    if t is None or sr is None or not (math.isfinite(t) and math.isfinite(sr)):
        return GateDecision(RETIRE, ("undefined metric",), m, cfg)
    sig = max(th.tau_sig, th.hurdle_t)
    if t >= sig and sr >= th.tau_econ:
        return GateDecision(PROMOTE, (f"t_ic {t:.3f} >= {sig}", f"sharpe {sr:.3f} >= {th.tau_econ}"), m, cfg)
    if t < th.tau_fail:
        return GateDecision(RETIRE, (f"t_ic {t:.3f} < tau_fail {th.tau_fail}",), m, cfg)
    reasons = []
    if t < sig:
        reasons.append(f"t_ic {t:.3f} < {sig}")
    if sr < th.tau_econ:
        reasons.append(f"sharpe {sr:.3f} < {th.tau_econ}")
    return GateDecision(HOLD, tuple(reasons), m, cfg)


def replay(decision: GateDecision, th: GateThresholds) -> str:
    return decide(decision.metrics, th).verdict


def redundancy_check(candidate: np.ndarray, library: list[np.ndarray], max_abs_corr: float = 0.8, min_dates: int = 60, min_names: int = 10) -> tuple[float, bool]:
    """Largest |date-averaged cross-sectional rank correlation| against the library.

    All grids share the same (dates, stocks) layout.
    """
    if not library:
        return 0.0, True
    worst = 0.0
    for member in library:
        rho = rank_ic(candidate, member, min_names)
        ok = np.isfinite(rho)
        if ok.sum() < min_dates:
            raise ValueError(f"only {int(ok.sum())} overlapping dates, need {min_dates}")
        worst = max(worst, abs(float(rho[ok].mean())))
    return worst, worst <= max_abs_corr


@dataclass(frozen=True)
class FeasibilityReport:
    passed: bool
    mean_turnover: float
    rapid_decay: bool
    notes: tuple = ()


def feasibility_check(turnover, horizon_means, th: GateThresholds) -> FeasibilityReport:
    """Turnover ceiling plus a rapid-decay flag (H2 mean below ``decay_ratio`` of H1)."""
    to = np.asarray(turnover, dtype=float)
    to = to[np.isfinite(to)]
    mean_to = float(to.mean()) if to.size else 0.0
    notes = []
    passed = True
    if th.max_turnover is not None and mean_to > th.max_turnover:
        passed = False
        notes.append(f"mean turnover {mean_to:.3f} > {th.max_turnover}")
    decay = False
    h = list(horizon_means)
    if len(h) >= 2 and h[0] > 0 and h[1] < th.decay_ratio * h[0]:
        decay = True
        notes.append(f"rapid decay: H2 {h[1]:.4g} < {th.decay_ratio} * H1 {h[0]:.4g}")
    return FeasibilityReport(passed, mean_to, decay, tuple(notes))
