"""Bounded symbolic factor grammar.

Expressions are written in prefix functional notation, e.g.
``cs_rank(delta(volume, 1))``. Windowed operators take their window as the
last (integer) argument. The grammar has no lead operator, so every
expression is backward-looking by construction; :func:`validate_no_lookahead`
still checks window signs and budgets before anything is evaluated.
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass, field
from typing import Iterable, Iterator

import numpy as np
from scipy.stats import rankdata

from .panel import (
    PRIMITIVES,
    Panel,
    apply_along_history,
    ts_delta,
    ts_lag,
    ts_max,
    ts_mean,
    ts_min,
    ts_std,
    ts_sum,
    zscore_panel,
)

UNARY = ("neg", "abs", "log1p", "sign")
BINARY = ("add", "sub", "mul", "div")
WINDOWED = (
    "lag",
    "rolling_mean",
    "rolling_std",
    "rolling_sum",
    "rolling_max",
    "rolling_min",
    "delta",
)
CROSS_SECTIONAL = ("cs_rank", "cs_zscore")
OPERATORS = UNARY + BINARY + WINDOWED + CROSS_SECTIONAL

OWN_RETURN = "ret"
DIV_EPS = 1e-12
MAX_DEPTH = 6
MAX_NODES = 24


class ExprError(ValueError):
    """Base class for grammar violations."""


class ExprSyntaxError(ExprError):
    pass


class UnknownOperatorError(ExprError):
    def __init__(self, name):
        self.name = name
        super().__init__(f"unknown operator or primitive {name!r}")


class ArityError(ExprError):
    def __init__(self, op, expected, got):
        self.op = op
        super().__init__(f"{op} expects {expected} argument(s), got {got}")


class WindowError(ExprError):
    def __init__(self, op, window, minimum=1):
        self.op = op
        self.window = window
        super().__init__(f"{op}: window {window} must be an integer >= {minimum}")


class BudgetError(ExprError):
    def __init__(self, kind, value, limit, node=""):
        self.kind = kind
        self.value = value
        self.limit = limit
        super().__init__(f"{kind} {value} exceeds limit {limit} at {node}")


class LookaheadError(ExprError):
    pass


@dataclass(frozen=True)
class Expr:
    """Immutable expression node.

    ``op`` is ``"prim"`` (with ``name``), ``"const"`` (with ``value``) or an
    operator from :data:`OPERATORS`.
    """

    op: str
    args: tuple = ()
    window: int | None = None
    name: str | None = None
    value: float | None = None

    def __str__(self):
        return render(self)

    @property
    def text(self) -> str:
        return render(self)

    @property
    def hash(self) -> str:
        return structural_hash(self)

    def walk(self) -> Iterator["Expr"]:
        yield self
        for a in self.args:
            yield from a.walk()


def prim(name: str) -> Expr:
    return Expr("prim", name=name)


def const(value: float) -> Expr:
    return Expr("const", value=float(value))


def call(op: str, *args, window: int | None = None) -> Expr:
    return Expr(op, args=tuple(args), window=window)


def render(expr: Expr) -> str:
    if expr.op == "prim":
        return expr.name
    if expr.op == "const":
        return repr(float(expr.value))
    inner = ", ".join(render(a) for a in expr.args)
    if expr.window is not None:
        inner = f"{inner}, {expr.window}"
    return f"{expr.op}({inner})"


def structural_hash(expr: Expr) -> str:
    return hashlib.sha256(render(expr).encode()).hexdigest()[:16]


def complexity(expr: Expr) -> tuple[int, int]:
    """(depth, node count); a bare primitive is (1, 1)."""
    if not expr.args:
        return 1, 1
    depths, counts = zip(*(complexity(a) for a in expr.args))
    return 1 + max(depths), 1 + sum(counts)


# --------------------------------------------------------------------------
# parsing

_TOKEN = re.compile(r"\s*(?:(?P<num>[-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?)|(?P<id>[A-Za-z_][A-Za-z0-9_]*)|(?P<p>[(),]))")


def _tokenize(text: str) -> list[tuple[str, str]]:
    tokens = []
    pos = 0
    text = text.strip()
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if not m or m.end() == pos:
            raise ExprSyntaxError(f"unexpected character at {pos}: {text[pos:pos + 10]!r}")
        kind = m.lastgroup
        tokens.append((kind, m.group(kind)))
        pos = m.end()
    return tokens


def _arity(op: str) -> int:
    if op in BINARY:
        return 2
    return 1


class _Parser:
    def __init__(self, text):
        self.tokens = _tokenize(text)
        self.i = 0

    def peek(self):
        return self.tokens[self.i] if self.i < len(self.tokens) else (None, None)

    def take(self, value=None):
        tok = self.peek()
        if tok[0] is None:
            raise ExprSyntaxError("unexpected end of expression")
        if value is not None and tok[1] != value:
            raise ExprSyntaxError(f"expected {value!r}, got {tok[1]!r}")
        self.i += 1
        return tok

    def expr(self) -> Expr:
        kind, val = self.take()
        if kind == "num":
            return const(float(val))
        if kind != "id":
            raise ExprSyntaxError(f"unexpected {val!r}")
        if self.peek()[1] != "(":
            if val in PRIMITIVES:
                return prim(val)
            raise UnknownOperatorError(val)
        if val not in OPERATORS:
            raise UnknownOperatorError(val)
        self.take("(")
        items = [self.expr_or_window()]
        while self.peek()[1] == ",":
            self.take(",")
            items.append(self.expr_or_window())
        self.take(")")
        if val in WINDOWED:
            if len(items) != 2:
                raise ArityError(val, "1 + window", len(items))
            child, win = items
            if isinstance(child, str) or not isinstance(win, str):
                raise ArityError(val, "1 + window", len(items))
            try:
                w = int(win)
            except ValueError:
                raise WindowError(val, win) from None
            if w < 0 or (w < 1 and val != "lag"):
                raise WindowError(val, w, 0 if val == "lag" else 1)
            return call(val, child, window=w)
        exprs = [self._as_expr(x) for x in items]
        if len(exprs) != _arity(val):
            raise ArityError(val, _arity(val), len(exprs))
        return call(val, *exprs)

    def expr_or_window(self):
        kind, val = self.peek()
        if kind == "num":
            # a trailing number may be a window; keep raw text until the caller decides
            nxt = self.tokens[self.i + 1][1] if self.i + 1 < len(self.tokens) else None
            if nxt == ")":
                self.i += 1
                return val
        return self.expr()

    @staticmethod
    def _as_expr(x):
        return const(float(x)) if isinstance(x, str) else x


def parse_expr(text: str, max_depth: int = MAX_DEPTH, max_nodes: int = MAX_NODES) -> Expr:
    """Parse, then validate budgets and window directions."""
    p = _Parser(text)
    if not p.tokens:
        raise ExprSyntaxError("empty expression")
    expr = p.expr()
    if p.i != len(p.tokens):
        raise ExprSyntaxError(f"trailing input after {render(expr)!r}")
    problems = validate_no_lookahead(expr, max_depth, max_nodes)
    if problems:
        raise problems[0]
    return expr


def validate_no_lookahead(expr: Expr, max_depth: int = MAX_DEPTH, max_nodes: int = MAX_NODES) -> list[ExprError]:
    """Structural checks run before evaluation; an empty list means ok."""
    problems: list[ExprError] = []
    depth, nodes = complexity(expr)
    if depth > max_depth:
        problems.append(BudgetError("depth", depth, max_depth, render(expr)))
    if nodes > max_nodes:
        problems.append(BudgetError("nodes", nodes, max_nodes, render(expr)))
    for node in expr.walk():
        if node.op == "prim":
            if node.name not in PRIMITIVES:
                problems.append(UnknownOperatorError(node.name))
            continue
        if node.op == "const":
            continue
        if node.op not in OPERATORS:
            problems.append(UnknownOperatorError(node.op))
            continue
        if node.op in WINDOWED:
            w = node.window
            if w is None or int(w) != w:
                problems.append(WindowError(node.op, w))
            elif node.op == "lag":
                own = node.args and node.args[0].op == "prim" and node.args[0].name == OWN_RETURN
                if w < 0:
                    problems.append(WindowError("lag", w, 0))
                elif own and w < 1:
                    problems.append(LookaheadError(f"{render(node)}: lag of the own return must be >= 1"))
            elif w < 1:
                problems.append(WindowError(node.op, w))
            if len(node.args) != 1:
                problems.append(ArityError(node.op, 1, len(node.args)))
        elif node.window is not None:
            problems.append(ExprSyntaxError(f"{node.op} takes no window"))
        elif len(node.args) != _arity(node.op):
            problems.append(ArityError(node.op, _arity(node.op), len(node.args)))
    return problems


# --------------------------------------------------------------------------
# evaluation


@dataclass(frozen=True, eq=False)
class FactorSeries:
    factor_id: str
    dates: np.ndarray
    stocks: np.ndarray
    values: np.ndarray
    coverage: np.ndarray  # finite fraction of present names, per date
    overflow: int = 0


def cs_rank(values) -> np.ndarray:
    """Fractional average rank in [0, 1] over finite entries; a lone value gets 0.5."""
    values = np.asarray(values, dtype=float)
    return cs_rank_panel(values[None, :])[0]


def cs_rank_panel(grid: np.ndarray) -> np.ndarray:
    finite = np.isfinite(grid)
    clean = np.where(finite, grid, np.nan)
    out = np.full(grid.shape, np.nan)
    n = finite.sum(axis=1)
    rows = n > 0
    if rows.any():
        r = rankdata(clean[rows], method="average", axis=1, nan_policy="omit")
        denom = np.maximum(n[rows] - 1, 1)[:, None]
        frac = (r - 1.0) / denom
        single = (n[rows] == 1)[:, None]
        frac = np.where(single & finite[rows], 0.5, frac)
        out[rows] = np.where(finite[rows], frac, np.nan)
    return out


def _ts(op: str, w: int):
    return {
        "lag": lambda x: ts_lag(x, w),
        "rolling_mean": lambda x: ts_mean(x, w),
        "rolling_std": lambda x: ts_std(x, w),
        "rolling_sum": lambda x: ts_sum(x, w),
        "rolling_max": lambda x: ts_max(x, w),
        "rolling_min": lambda x: ts_min(x, w),
        "delta": lambda x: ts_delta(x, w),
    }[op]


class _Evaluator:
    def __init__(self, panel: Panel):
        self.panel = panel
        self.present = panel.present
        self.cache: dict[str, np.ndarray] = {}
        self.overflow = 0

    def __call__(self, expr: Expr) -> np.ndarray:
        key = render(expr)
        if key not in self.cache:
            self.cache[key] = self._clean(self._eval(expr))
        return self.cache[key]

    def _clean(self, out: np.ndarray) -> np.ndarray:
        inf = np.isinf(out)
        if inf.any():
            self.overflow += int(inf.sum())
            out = np.where(inf, np.nan, out)
        return np.where(self.present, out, np.nan)

    def _eval(self, e: Expr) -> np.ndarray:
        if e.op == "prim":
            return self.panel.fields[e.name].astype(float, copy=True)
        if e.op == "const":
            return np.full(self.present.shape, e.value)
        with np.errstate(all="ignore"):
            if e.op in UNARY:
                x = self(e.args[0])
                if e.op == "neg":
                    return -x
                if e.op == "abs":
                    return np.abs(x)
                if e.op == "sign":
                    return np.sign(x)
                return np.where(x >= 0, np.log1p(np.where(x >= 0, x, 0.0)), np.nan)
            if e.op in BINARY:
                a, b = self(e.args[0]), self(e.args[1])
                if e.op == "add":
                    return a + b
                if e.op == "sub":
                    return a - b
                if e.op == "mul":
                    return a * b
                ok = np.abs(b) >= DIV_EPS
                return np.where(ok, a / np.where(ok, b, 1.0), np.nan)
            if e.op in WINDOWED:
                return apply_along_history(self(e.args[0]), self.present, _ts(e.op, e.window))
            x = self(e.args[0])
            if e.op == "cs_rank":
                return cs_rank_panel(x)
            return zscore_panel(x)[0]


def evaluate(expr: Expr, panel: Panel, start=None, end=None, max_depth: int = MAX_DEPTH, max_nodes: int = MAX_NODES) -> FactorSeries:
    """Evaluate ``expr`` on ``panel`` over dates in ``[start, end]``.

    The panel is cut at ``end`` before any computation, so nothing after the
    window can leak in.
    """
    problems = validate_no_lookahead(expr, max_depth, max_nodes)
    if problems:
        raise problems[0]
    if end is not None:
        panel = panel.truncate(end)
    ev = _Evaluator(panel)
    values = ev(expr)
    lo = 0 if start is None else int(np.searchsorted(panel.dates, np.datetime64(start, "D")))
    values = values[lo:]
    pres = panel.present[lo:]
    with np.errstate(invalid="ignore", divide="ignore"):
        coverage = np.isfinite(values).sum(axis=1) / np.maximum(pres.sum(axis=1), 1)
    return FactorSeries(
        factor_id=structural_hash(expr),
        dates=panel.dates[lo:],
        stocks=panel.stocks,
        values=values,
        coverage=coverage,
        overflow=ev.overflow,
    )


# --------------------------------------------------------------------------
# expression files


def read_expr_file(lines: Iterable[str]) -> list[Expr]:
    out = []
    for line in lines:
        line = line.split("#", 1)[0].strip()
        if line:
            out.append(parse_expr(line))
    return out


@dataclass(frozen=True)
class LibraryEntry:
    id: str
    expr: str
    rationale: str
    metrics: dict = field(default_factory=dict, compare=False)

    def to_json(self) -> dict:
        d = {"id": self.id, "expr": self.expr, "rationale": self.rationale}
        if self.metrics:
            d["metrics"] = self.metrics
        return d


def load_library(text: str) -> list[LibraryEntry]:
    entries = []
    for item in json.loads(text):
        if not str(item.get("rationale", "")).strip():
            raise ExprError(f"library entry {item.get('id')} has no rationale")
        parse_expr(item["expr"])
        entries.append(LibraryEntry(item["id"], item["expr"], item["rationale"], item.get("metrics", {})))
    return entries


def dump_library(entries: Iterable[LibraryEntry]) -> str:
    return json.dumps([e.to_json() for e in entries], indent=2, sort_keys=True) + "\n"
