"""Hypothesis generators: a seeded template/mutation baseline, an HTTP LLM
transport, and a replayer that re-issues proposals recorded in a log.

Generators return raw ``Proposal`` objects; parsing and validation happen in
the discovery loop so every source is held to the same grammar.
"""

from __future__ import annotations

import json
import logging
import os
import urllib.error
import urllib.request
from dataclasses import dataclass, field

import numpy as np

from .grammar import (
    BINARY,
    CROSS_SECTIONAL,
    MAX_DEPTH,
    MAX_NODES,
    OPERATORS,
    OWN_RETURN,
    UNARY,
    WINDOWED,
    Expr,
    ExprError,
    call,
    complexity,
    parse_expr,
    prim,
    render,
    validate_no_lookahead,
)
from .panel import PRIMITIVES

logger = logging.getLogger(__name__)

LLM_KEY_ENV = "FACTORLOOP_LLM_KEY"

PRIMITIVE_STORIES = {
    "ret": "short-horizon return continuation or reversal",
    "mkt_ret": "sensitivity to the market's latest move",
    "price": "price-level effects such as lottery demand in cheap stocks",
    "volume": "raw trading activity and liquidity",
    "vol_ratio": "abnormal trading activity relative to the stock's own norm",
    "rvol20": "idiosyncratic risk and the low-volatility anomaly",
    "price_ma": "distance from the recent trend (anchoring to the moving average)",
    "mkt_vol20": "market-wide risk regime",
    "vol_growth": "shifts in order flow from one day to the next",
    "spread": "liquidity cost and the compensation for bearing it",
}

OP_PHRASES = {
    "neg": "with the sign reversed",
    "abs": "in magnitude",
    "log1p": "on a log scale",
    "sign": "by direction only",
    "add": "combined additively",
    "sub": "as a difference",
    "mul": "as an interaction",
    "div": "as a ratio",
    "lag": "lagged",
    "rolling_mean": "smoothed over a trailing window",
    "rolling_std": "through its trailing dispersion",
    "rolling_sum": "accumulated over a trailing window",
    "rolling_max": "through its trailing maximum",
    "rolling_min": "through its trailing minimum",
    "delta": "as a change over a trailing window",
    "cs_rank": "ranked across stocks",
    "cs_zscore": "standardized across stocks",
}

WINDOWS = (2, 3, 5, 10, 20)
WINDOW_STEPS = (1, 2, 5)


@dataclass(frozen=True)
class Proposal:
    expr: str
    rationale: str
    source: str = "baseline"
    parent: str | None = None
    move: str | None = None


def rationale_for(expr: Expr) -> str:
    """Template rationale keyed to the primitives and operators used."""
    prims = sorted({n.name for n in expr.walk() if n.op == "prim"})
    ops = [n.op for n in expr.walk() if n.op not in ("prim", "const")]
    story = "; ".join(PRIMITIVE_STORIES.get(p, p) for p in prims) or "a constant tilt"
    how = ", ".join(dict.fromkeys(OP_PHRASES[o] for o in ops if o in OP_PHRASES))
    text = f"Tests whether {story} predicts next-day cross-sectional returns"
    if how:
        text += f", expressed {how}"
    return text + "."


def used_primitives(expr: Expr) -> list[str]:
    return sorted({n.name for n in expr.walk() if n.op == "prim"})


def used_operators(expr: Expr) -> list[str]:
    return sorted({n.op for n in expr.walk() if n.op in OPERATORS})


class BaselineGenerator:
    """Seeded exploration templates plus local mutations of survivors.

    Output is a pure function of (state, seed, n): the RNG is re-seeded from
    the seed and the state's round index on every call.
    """

    source = "baseline"

    def __init__(self, seed: int = 0, p_exploit: float = 0.6, max_depth: int = MAX_DEPTH, max_nodes: int = MAX_NODES):
        self.seed = int(seed)
        self.p_exploit = p_exploit
        self.max_depth = max_depth
        self.max_nodes = max_nodes

    def propose(self, state, n: int) -> list[Proposal]:
        if n <= 0:
            return []
        rng = np.random.default_rng([self.seed, int(state.round)])
        pool = state.survivors()
        weights = self._primitive_weights(state)
        out = []
        for _ in range(n):
            prop = None
            if pool and rng.random() < self.p_exploit:
                parent_text, parent_hash = pool[int(rng.integers(len(pool)))]
                prop = self._mutate(rng, parse_expr(parent_text, 99, 999), parent_hash)
            if prop is None:
                prop = self._explore(rng, weights)
            out.append(prop)
        return out

    def _primitive_weights(self, state) -> np.ndarray:
        tallies = state.tallies.get("primitive", {})
        w = np.array([1.0 + 2.0 * tallies.get(p, [0, 0])[1] for p in PRIMITIVES])
        return w / w.sum()

    def _ok(self, expr: Expr) -> bool:
        return not validate_no_lookahead(expr, self.max_depth, self.max_nodes)

    def _explore(self, rng, weights) -> Proposal:
        for _ in range(50):
            p = PRIMITIVES[int(rng.choice(len(PRIMITIVES), p=weights))]
            expr = self._template(rng, p, weights)
            if self._ok(expr):
                return Proposal(render(expr), rationale_for(expr), self.source, None, "explore")
        expr = call("lag", prim(OWN_RETURN), window=1)
        return Proposal(render(expr), rationale_for(expr), self.source, None, "explore")

    def _template(self, rng, p: str, weights) -> Expr:
        x = prim(p)
        w = int(rng.choice(WINDOWS))
        kind = int(rng.integers(10))
        if kind == 0:
            e = x if p != OWN_RETURN else call("lag", x, window=1)
        elif kind == 1:
            e = call("cs_rank", x)
        elif kind == 2:
            e = call("delta", x, window=int(rng.choice((1, 2, 5))))
        elif kind == 3:
            e = call("rolling_mean", x, window=w)
        elif kind == 4:
            e = call("div", x, call("rolling_mean", x, window=w))
        elif kind == 5:
            e = call("rolling_std", x, window=max(w, 3))
        elif kind == 6:
            e = call("cs_zscore", call("sub", x, call("rolling_mean", x, window=w)))
        elif kind == 7:
            e = call("lag", x, window=int(rng.choice((1, 2, 5))))
        elif kind == 8:
            q = PRIMITIVES[int(rng.choice(len(PRIMITIVES), p=weights))]
            e = call("mul", call("cs_rank", x), call("cs_rank", prim(q)))
        else:
            e = call("cs_rank", call("rolling_sum", x, window=w))
        if rng.random() < 0.5:
            e = call("neg", e)
        return e

    def _mutate(self, rng, parent: Expr, parent_hash: str) -> Proposal | None:
        moves = ["swap", "window", "wrap"]
        for _ in range(10):
            move = moves[int(rng.integers(len(moves)))]
            child = None
            if move == "swap":
                child = _swap_operator(rng, parent)
            elif move == "window":
                child = _perturb_window(rng, parent)
            else:
                op = CROSS_SECTIONAL[int(rng.integers(2))]
                if parent.op != op:
                    child = call(op, parent)
            if child is not None and render(child) != render(parent) and self._ok(child):
                return Proposal(render(child), rationale_for(child), self.source, parent_hash, move)
        return None


def _nodes_with_paths(expr: Expr, path=()):
    yield path, expr
    for i, a in enumerate(expr.args):
        yield from _nodes_with_paths(a, path + (i,))


def _replace_at(expr: Expr, path, new: Expr) -> Expr:
    if not path:
        return new
    args = list(expr.args)
    args[path[0]] = _replace_at(args[path[0]], path[1:], new)
    return Expr(expr.op, tuple(args), expr.window, expr.name, expr.value)


def _swap_operator(rng, expr: Expr) -> Expr | None:
    cands = [(p, n) for p, n in _nodes_with_paths(expr) if n.op in OPERATORS]
    if not cands:
        return None
    path, node = cands[int(rng.integers(len(cands)))]
    for group in (UNARY, BINARY, WINDOWED, CROSS_SECTIONAL):
        if node.op in group:
            others = [o for o in group if o != node.op]
            new_op = others[int(rng.integers(len(others)))]
            window = node.window
            if new_op == "rolling_std" and window is not None and window < 2:
                window = 2
            return _replace_at(expr, path, Expr(new_op, node.args, window))
    return None


def _perturb_window(rng, expr: Expr) -> Expr | None:
    cands = [(p, n) for p, n in _nodes_with_paths(expr) if n.op in WINDOWED]
    if not cands:
        return None
    path, node = cands[int(rng.integers(len(cands)))]
    step = int(rng.choice(WINDOW_STEPS)) * (1 if rng.random() < 0.5 else -1)
    w = max(1, node.window + step)
    if w == node.window:
        w = node.window + abs(step)
    return _replace_at(expr, path, Expr(node.op, node.args, w))


class LLMGenerator:
    """One-shot JSON-over-HTTP proposal source.

    The request carries a compact state summary; the reply must be a JSON
    array of ``{"expr", "rationale"}`` objects. Any transport or format
    failure falls back to ``fallback`` for the round. Every exchange is kept
    in ``transcript`` (without the credential) for the experiment log.
    """

    source = "llm"

    def __init__(self, endpoint: str, fallback: BaselineGenerator, timeout: float = 30.0, key_env: str = LLM_KEY_ENV, max_depth: int = MAX_DEPTH, max_nodes: int = MAX_NODES):
        self.endpoint = endpoint
        self.fallback = fallback
        self.timeout = timeout
        self.key_env = key_env
        self.max_depth = max_depth
        self.max_nodes = max_nodes
        self.transcript: list[dict] = []

    def summary(self, state, n: int) -> dict:
        return {
            "grammar": {
                "unary": list(UNARY),
                "binary": list(BINARY),
                "windowed": list(WINDOWED),
                "cross_sectional": list(CROSS_SECTIONAL),
                "syntax": "prefix, e.g. cs_rank(delta(volume, 1)); windows are the last integer argument",
            },
            "primitives": list(PRIMITIVES),
            "round": state.round + 1,
            "library": [{"expr": e["expr"], "rationale": e["rationale"]} for e in state.library],
            "recent": state.recent[-20:],
            "budget": {"n": n, "max_depth": self.max_depth, "max_nodes": self.max_nodes},
        }

    def _post(self, payload: dict) -> str:
        headers = {"Content-Type": "application/json"}
        key = os.environ.get(self.key_env)
        if key:
            headers["Authorization"] = f"Bearer {key}"
        req = urllib.request.Request(self.endpoint, data=json.dumps(payload).encode(), headers=headers, method="POST")
        with urllib.request.urlopen(req, timeout=self.timeout) as resp:
            return resp.read().decode()

    def propose(self, state, n: int) -> list[Proposal]:
        if n <= 0:
            return []
        request = self.summary(state, n)
        entry = {"round": state.round + 1, "request": request, "response": None, "status": "ok"}
        try:
            raw = self._post(request)
            entry["response"] = raw
            items = json.loads(raw)
            if not isinstance(items, list):
                raise ValueError("reply is not a JSON array")
        except (urllib.error.URLError, OSError, TimeoutError, ValueError) as exc:
            entry["status"] = f"fallback: {exc}"
            self.transcript.append(entry)
            logger.warning("LLM generator unavailable (%s); using baseline for this round", exc)
            return self.fallback.propose(state, n)
        self.transcript.append(entry)
        out = []
        for item in items[:n]:
            if isinstance(item, dict):
                out.append(Proposal(str(item.get("expr", "")), str(item.get("rationale", "")), self.source))
            else:
                out.append(Proposal(str(item), "", self.source))
        return out

    def drain_transcript(self) -> list[dict]:
        t, self.transcript = self.transcript, []
        return t


class ReplayGenerator:
    """Re-issues the proposals recorded in an experiment log, round by round."""

    source = "replay"

    def __init__(self, records):
        self.by_round: dict[int, list[Proposal]] = {}
        for r in records:
            if r.get("kind") in ("candidate", "rejected"):
                prov = r.get("provenance", {})
                self.by_round.setdefault(r["round"], []).append(
                    (r["index"], Proposal(r["expr"], r.get("rationale", ""), prov.get("source", "replay"), prov.get("parent"), prov.get("move")))
                )

    def propose(self, state, n: int) -> list[Proposal]:
        items = sorted(self.by_round.get(state.round + 1, []), key=lambda x: x[0])
        return [p for _, p in items][:n] if n > 0 else []


class ListGenerator:
    """Fixed proposals per round (testing and user-supplied expression files)."""

    source = "list"

    def __init__(self, rounds):
        self.rounds = [list(r) for r in rounds]

    def propose(self, state, n: int) -> list[Proposal]:
        k = state.round
        if n <= 0 or k >= len(self.rounds):
            return []
        out = []
        for item in self.rounds[k][:n]:
            if isinstance(item, Proposal):
                out.append(item)
            else:
                text = item if isinstance(item, str) else render(item)
                try:
                    rat = rationale_for(parse_expr(text, 99, 999))
                except ExprError:
                    rat = ""
                out.append(Proposal(text, rat, self.source))
        return out
