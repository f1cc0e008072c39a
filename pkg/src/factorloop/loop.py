"""Closed-loop factor discovery: propose, construct, evaluate, gate, update.

Only in-sample data ever reaches the gate. The panel is cut at the IS end
before any candidate is evaluated, and the library is frozen before the
optional out-of-sample report is produced.
"""

from __future__ import annotations

import copy
import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .backtest import decile_backtest, long_short_weights, multi_horizon, turnover
from .gate import HOLD, PROMOTE, RETIRE, GateDecision, GateThresholds, decide, feasibility_check, redundancy_check, replay
from .generators import BaselineGenerator, Proposal, used_operators, used_primitives
from .grammar import MAX_DEPTH, MAX_NODES, ExprError, evaluate, parse_expr, render, structural_hash
from .metrics import EvalConfig, EvalMetrics, evaluate_factor
from .panel import Panel, normalize_panel

logger = logging.getLogger(__name__)

LOG_SCHEMA = 1


@dataclass(frozen=True)
class SplitSpec:
    is_start: str
    is_end: str
    oos_start: str
    oos_end: str

    def __post_init__(self):
        d = [np.datetime64(x, "D") for x in (self.is_start, self.is_end, self.oos_start, self.oos_end)]
        if not (d[0] <= d[1] < d[2] <= d[3]):
            raise ValueError(f"invalid split {self}: need is_start <= is_end < oos_start <= oos_end")


SPLIT_PRESETS = {
    # promotion through Dec 2020, OOS from 2021
    "default": SplitSpec("2004-01-01", "2020-12-31", "2021-01-01", "2024-12-31"),
    # same promotion cutoff, stricter external reporting window
    "default_strict": SplitSpec("2004-01-01", "2020-12-31", "2023-01-01", "2024-12-31"),
}


def parse_split(text: str) -> SplitSpec:
    """A preset name or four comma-separated ISO dates."""
    if text in SPLIT_PRESETS:
        return SPLIT_PRESETS[text]
    parts = [p.strip() for p in text.split(",")]
    if len(parts) != 4:
        raise ValueError(f"split must be a preset {sorted(SPLIT_PRESETS)} or 4 dates, got {text!r}")
    return SplitSpec(*parts)


@dataclass(frozen=True)
class CampaignConfig:
    split: SplitSpec
    rounds: int = 5
    batch_size: int = 16
    seed: int = 0
    p_exploit: float = 0.6
    hold_max_age: int = 3
    max_depth: int = MAX_DEPTH
    max_nodes: int = MAX_NODES
    n_deciles: int = 10
    thresholds: GateThresholds = GateThresholds()
    eval: EvalConfig = EvalConfig()
    oos_report: bool = True

    def config_hash(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True, default=list)
        return hashlib.sha256(blob.encode()).hexdigest()[:12]


@dataclass
class AgentState:
    round: int = 0
    seed: int = 0
    library: list = field(default_factory=list)  # {"id", "hash", "expr", "rationale", "metrics"}
    held: dict = field(default_factory=dict)  # hash -> {"expr", "rationale", "age"}
    retired: set = field(default_factory=set)
    tallies: dict = field(default_factory=lambda: {"primitive": {}, "operator": {}})
    recent: list = field(default_factory=list)  # compact outcomes for the LLM prompt

    def survivors(self) -> list[tuple[str, str]]:
        pool = [(e["expr"], e["hash"]) for e in self.library]
        pool += [(self.held[h]["expr"], h) for h in sorted(self.held)]
        return pool

    def known(self) -> set:
        return set(self.retired) | {e["hash"] for e in self.library} | set(self.held)

    def to_json(self) -> dict:
        d = asdict(self)
        d["retired"] = sorted(self.retired)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "AgentState":
        d = copy.deepcopy(d)
        d["retired"] = set(d["retired"])
        return cls(**d)

    def dumps(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True)


def _tally(state: AgentState, expr, promoted: bool):
    for kind, names in (("primitive", used_primitives(expr)), ("operator", used_operators(expr))):
        table = state.tallies.setdefault(kind, {})
        for name in names:
            counts = table.setdefault(name, [0, 0])
            counts[0] += 1
            counts[1] += int(promoted)


class Evaluator:
    """Shared in-sample evaluation context for one campaign."""

    def __init__(self, panel: Panel, cfg: CampaignConfig):
        self.cfg = cfg
        split = cfg.split
        # nothing after the IS end is visible from here on
        self.panel = panel.truncate(split.is_end)
        self.fwd = np.where(self.panel.present, self.panel.forward_returns(), np.nan)
        self.lo = int(np.searchsorted(self.panel.dates, np.datetime64(split.is_start, "D")))
        self.dates = self.panel.dates[self.lo:]
        self._z: dict[str, np.ndarray] = {}

    def raw(self, expr) -> np.ndarray:
        key = structural_hash(expr)
        if key not in self._z:
            fs = evaluate(expr, self.panel, max_depth=self.cfg.max_depth, max_nodes=self.cfg.max_nodes)
            self._z[key] = fs.values[self.lo:]
        return self._z[key]

    def metrics(self, expr) -> EvalMetrics:
        raw = self.raw(expr)
        return evaluate_factor(raw, self.fwd[self.lo:], self.cfg.eval, self.dates)

    def normalized(self, expr) -> np.ndarray:
        e = self.cfg.eval
        return normalize_panel(self.raw(expr), e.winsor_low, e.winsor_high)


def run_round(state: AgentState, gen, panel: Panel, cfg: CampaignConfig, evaluator: Evaluator | None = None, seq_start: int = 0):
    """One pass of propose -> construct -> evaluate -> gate -> update.

    Returns ``(decisions, new_state, records)``. ``records`` are log entries in
    proposal order; rejected proposals get a ``kind="rejected"`` record.
    """
    ev = evaluator or Evaluator(panel, cfg)
    th = cfg.thresholds
    new = AgentState.from_json(state.to_json())
    k = state.round + 1
    proposals = gen.propose(state, cfg.batch_size)
    records = []
    seq = seq_start
    drain = getattr(gen, "drain_transcript", None)
    if drain is not None:
        for ex in drain():
            records.append({"schema": LOG_SCHEMA, "kind": "llm_exchange", "round": k, "seq": seq, **ex})
            seq += 1
    known = state.known()
    seen: set = set()
    decisions = []
    promoted, held_new = [], []
    library_z = [ev.normalized(parse_expr(e["expr"], 99, 999)) for e in state.library]
    eval_hash = cfg.eval.config_hash()
    for i, prop in enumerate(proposals):
        base = {
            "schema": LOG_SCHEMA,
            "round": k,
            "index": i,
            "seq": seq,
            "expr": prop.expr,
            "rationale": prop.rationale,
            "provenance": {"source": prop.source, "parent": prop.parent, "move": prop.move},
            "config_hash": cfg.config_hash(),
        }
        seq += 1
        try:
            expr = parse_expr(prop.expr, cfg.max_depth, cfg.max_nodes)
        except ExprError as exc:
            records.append({**base, "kind": "rejected", "reason": f"{type(exc).__name__}: {exc}"})
            continue
        h = structural_hash(expr)
        text = render(expr)
        if h in known or h in seen:
            records.append({**base, "kind": "rejected", "reason": "duplicate", "hash": h, "expr": text})
            continue
        if not prop.rationale.strip():
            prop = Proposal(text, "(no rationale supplied)", prop.source, prop.parent, prop.move)
            base["rationale"] = prop.rationale
        seen.add(h)
        m = ev.metrics(expr)
        dec = decide(m, th, expected_hash=eval_hash, is_end=cfg.split.is_end)
        extra = {}
        if dec.verdict == PROMOTE:
            z = ev.normalized(expr)
            corr, ok = redundancy_check(z, library_z, th.max_abs_corr, min_names=cfg.eval.min_names)
            extra["redundancy"] = {"max_abs_corr": corr, "passed": ok}
            if not ok:
                dec = GateDecision(RETIRE, dec.reasons + (f"redundant: |corr| {corr:.3f} > {th.max_abs_corr}",), m, dec.config_hash)
            elif th.max_turnover is not None:
                fwd = ev.fwd[ev.lo:]
                bt = decile_backtest(z, fwd, n_quantiles=cfg.n_deciles)
                to = turnover(bt.weights, fwd)
                hz = [s.mean for s in multi_horizon(z, fwd, (1, 2), cfg.n_deciles)]
                feas = feasibility_check(to, hz, th)
                extra["feasibility"] = {"passed": feas.passed, "mean_turnover": feas.mean_turnover, "rapid_decay": feas.rapid_decay, "notes": list(feas.notes)}
                if not feas.passed:
                    dec = GateDecision(HOLD, dec.reasons + feas.notes, m, dec.config_hash)
        decisions.append((text, dec))
        records.append({**base, "kind": "candidate", "expr": text, "hash": h, "metrics": m.to_dict(), "decision": dec.to_dict(), **extra})
        _tally(new, expr, dec.verdict == PROMOTE)
        md = m.to_dict()
        new.recent.append({"round": k, "expr": text, "verdict": dec.verdict, "t_ic": md["ic_tstat"], "sharpe": md["sharpe"]})
        if dec.verdict == PROMOTE:
            promoted.append({"id": f"F{len(new.library) + len(promoted) + 1}", "hash": h, "expr": text, "rationale": prop.rationale, "metrics": m.to_dict()})
        elif dec.verdict == HOLD:
            held_new.append((h, {"expr": text, "rationale": prop.rationale, "age": 0}))
        else:
            new.retired.add(h)

    # hold aging: a candidate held for hold_max_age consecutive rounds retires
    for h in sorted(new.held):
        new.held[h]["age"] += 1
        if new.held[h]["age"] >= cfg.hold_max_age:
            new.retired.add(h)
            del new.held[h]
    for h, entry in held_new:
        entry["age"] = 1
        if entry["age"] >= cfg.hold_max_age:
            new.retired.add(h)
        else:
            new.held[h] = entry
    new.library.extend(promoted)
    new.recent = new.recent[-50:]
    new.round = k
    return decisions, new, records


@dataclass
class CampaignResult:
    state: AgentState
    log: list
    oos: list = field(default_factory=list)

    @property
    def library(self):
        return self.state.library


def run_campaign(panel: Panel, cfg: CampaignConfig, generator=None, state: AgentState | None = None, log: list | None = None, stop_after: int | None = None) -> CampaignResult:
    """Run rounds ``state.round + 1 .. cfg.rounds`` and, once frozen, the OOS report.

    Pass a saved ``state`` and ``log`` to resume; ``stop_after`` ends the run
    early (for checkpointing) without producing the OOS report.
    """
    if generator is None:
        generator = BaselineGenerator(cfg.seed, cfg.p_exploit, cfg.max_depth, cfg.max_nodes)
    state = state or AgentState(seed=cfg.seed)
    log = list(log or [])
    ev = Evaluator(panel, cfg)
    last = cfg.rounds if stop_after is None else min(stop_after, cfg.rounds)
    while state.round < last:
        _, state, records = run_round(state, generator, panel, cfg, ev, seq_start=len(log))
        log.extend(records)
        logger.info("round %d: %d records, library size %d", state.round, len(records), len(state.library))
    result = CampaignResult(state, log)
    if cfg.oos_report and state.round >= cfg.rounds:
        result.oos = oos_report(panel, state, cfg)
    return result


def oos_report(panel: Panel, state: AgentState, cfg: CampaignConfig) -> list[dict]:
    """Blind evaluation of the frozen library on the OOS window.

    Nothing computed here is written back into the agent state.
    """
    split = cfg.split
    cut = panel.truncate(split.oos_end)
    fwd = np.where(cut.present, cut.forward_returns(), np.nan)
    lo = int(np.searchsorted(cut.dates, np.datetime64(split.oos_start, "D")))
    out = []
    for entry in state.library:
        expr = parse_expr(entry["expr"], cfg.max_depth, cfg.max_nodes)
        raw = evaluate(expr, cut).values[lo:]
        m = evaluate_factor(raw, fwd[lo:], cfg.eval, cut.dates[lo:])
        z = normalize_panel(raw, cfg.eval.winsor_low, cfg.eval.winsor_high)
        bt = decile_backtest(z, fwd[lo:], cut.dates[lo:], cfg.n_deciles)
        out.append(
            {
                "id": entry["id"],
                "expr": entry["expr"],
                "metrics": m.to_dict(),
                "decile_mean_returns": [float(x) for x in bt.mean_decile_returns()],
                "decile_monotonicity": bt.monotonicity,
                "long_short_sharpe": bt.spread_perf.sharpe,
                "long_short_ann_return": bt.spread_perf.ann_return,
            }
        )
    return out


def replay_record(record: dict, th: GateThresholds) -> str:
    """Verdict recomputed from a logged candidate's metrics and check outcomes."""
    verdict = replay(GateDecision.from_dict(record["decision"]), th)
    if verdict == PROMOTE and not record.get("redundancy", {}).get("passed", True):
        return RETIRE
    if verdict == PROMOTE and not record.get("feasibility", {}).get("passed", True):
        return HOLD
    return verdict


def dump_log(records) -> str:
    return "".join(json.dumps(r, sort_keys=True, allow_nan=False, default=_json_default) + "\n" for r in records)


def _json_default(o):
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, (np.integer,)):
        return int(o)
    raise TypeError(type(o))


def load_log(text: str) -> list[dict]:
    return [json.loads(line) for line in text.splitlines() if line.strip()]
