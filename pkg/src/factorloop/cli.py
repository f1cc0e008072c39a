"""Command-line entry point.

    factorloop synth     --config run.ini --out fixture/
    factorloop ingest    --config run.ini
    factorloop discover  --config run.ini [--seed N] [--llm-endpoint URL]
    factorloop backtest  --config run.ini
    factorloop aggregate --config run.ini [--model linear|gbdt|equal] [--cost-bps 3]
    factorloop attribute --config run.ini

Every stage reads its inputs from files under the output directory and writes
its results there, so stages can be rerun independently.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import __version__
from .aggregation import build_feature_matrix, walk_forward
from .attribution import MODEL_SPECS, alpha_regression, ingest_factor_returns, nw_mean_tstat, write_factor_returns
from .backtest import decile_backtest, multi_horizon, quarterly_table, with_costs
from .config import ConfigError, Paths, RunConfig, load_config, write_config
from .generators import BaselineGenerator, LLMGenerator
from .grammar import ExprError, LibraryEntry, dump_library, evaluate, load_library, parse_expr, read_expr_file, render
from .loop import AgentState, SplitSpec, dump_log, load_log, parse_split, run_campaign
from .metrics import equity_curve, evaluate_factor, max_drawdown, perf_summary
from .panel import PanelError, ScreenConfig, apply_screens, build_primitives, ingest_panel, normalize_panel, write_panel_csv, write_screen_report
from . import reports as rp
from . import synth

logger = logging.getLogger("factorloop")

SCREENED = "panel_screened.csv"
LOG = "experiment_log.jsonl"
STATE = "agent_state.json"
LIBRARY = "library.json"


class CommandError(RuntimeError):
    pass


# --------------------------------------------------------------------------
# shared helpers


def _settings(args) -> RunConfig:
    cfg = load_config(args.config)
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, seed=args.seed)
    if getattr(args, "out", None):
        cfg = replace(cfg, paths=replace(cfg.paths, out=str(Path(args.out).resolve())))
    if getattr(args, "split", None):
        cfg = replace(cfg, split=parse_split(args.split))
    if getattr(args, "cost_bps", None) is not None:
        cfg = replace(cfg, costs=replace(cfg.costs, one_way_bps=args.cost_bps))
    if getattr(args, "model", None):
        cfg = replace(cfg, aggregation=replace(cfg.aggregation, model=args.model))
    if getattr(args, "llm_endpoint", None):
        cfg = replace(cfg, generator=replace(cfg.generator, kind="llm", llm_endpoint=args.llm_endpoint))
    return cfg


def _out(cfg: RunConfig) -> Path:
    out = Path(cfg.paths.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _header(cfg: RunConfig, title: str, *extra: str) -> list[str]:
    return rp.header_lines(title, cfg.config_hash(), cfg.seed, extra)


def _require(path: Path, what: str) -> Path:
    if not path.is_file():
        raise CommandError(f"{what} not found: {path}")
    return path


def _read_panel(path: Path):
    with _require(path, "panel file").open(encoding="utf-8", newline="") as fh:
        return ingest_panel(fh)


def _screened(cfg: RunConfig):
    return _read_panel(_out(cfg) / SCREENED)


def _library(cfg: RunConfig) -> list[LibraryEntry]:
    path = _require(_out(cfg) / LIBRARY, "library file (run `discover` first)")
    return load_library(path.read_text(encoding="utf-8"))


def _oos_slice(panel, cfg: RunConfig):
    """Panel cut at the OOS end, forward returns, and the OOS start index."""
    cut = panel.truncate(cfg.split.oos_end)
    fwd = np.where(cut.present, cut.forward_returns(), np.nan)
    lo = int(np.searchsorted(cut.dates, np.datetime64(cfg.split.oos_start, "D")))
    if lo >= len(cut.dates):
        raise CommandError(f"no panel dates on or after OOS start {cfg.split.oos_start}")
    return cut, fwd, lo


# --------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    """Planted-signal panel, benchmark file, baseline factor file and a config."""
    out = Path(args.out or "fixture").resolve()
    out.mkdir(parents=True, exist_ok=True)
    seed = 7 if args.seed is None else args.seed
    params = synth.SynthParams(
        n_stocks=args.n_stocks, n_days=args.n_days, n_is_days=args.n_is_days, noise=args.noise, seed=seed, ineligible_frac=args.ineligible_frac, late_listing_frac=args.late_listing_frac
    )
    panel = synth.planted_panel(params)
    with (out / "panel.csv").open("w", encoding="utf-8", newline="") as fh:
        write_panel_csv(panel, fh)
    with (out / "benchmark.csv").open("w", encoding="utf-8", newline="") as fh:
        write_factor_returns(synth.benchmark_returns(panel, seed + 4), fh)
    (out / "baseline_factors.txt").write_text("# price-only baseline factors\nneg(rolling_sum(ret, 5))\nrolling_std(ret, 20)\nneg(div(price, price_ma))\n", encoding="utf-8")
    (out / "synth_params.json").write_text(json.dumps(asdict(params), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    is_start, is_end, oos_start, oos_end = synth.planted_split(panel, params.n_is_days)
    cfg = RunConfig(
        paths=Paths(panel=str(out / "panel.csv"), benchmark=str(out / "benchmark.csv"), out=str(out / "run"), baseline_factors=str(out / "baseline_factors.txt")),
        split=SplitSpec(is_start, is_end, oos_start, oos_end),
        screens=ScreenConfig(min_history_days=min(252, params.n_is_days // 2)),
        seed=seed,
    )
    # a lighter booster keeps the fixture pipeline quick; real runs use the defaults
    gb = replace(cfg.aggregation.gbdt, n_trees=100, learning_rate=0.1)
    cfg = replace(cfg, aggregation=replace(cfg.aggregation, train_window=min(250, params.n_is_days - 10), refit_every=120, gbdt=gb))
    write_config(cfg, args.config)
    print(f"wrote {out / 'panel.csv'} ({panel.n_obs} rows) and config {args.config}")
    return 0


def cmd_ingest(args) -> int:
    cfg = _settings(args)
    if not cfg.paths.panel:
        raise CommandError("config has no [paths] panel")
    raw = _read_panel(Path(cfg.paths.panel))
    screened, report = apply_screens(raw, cfg.screens)
    out = _out(cfg)
    with (out / SCREENED).open("w", encoding="utf-8", newline="") as fh:
        write_panel_csv(screened, fh)
    ing = raw.report
    extra = [f"rows_read={ing.n_rows} rows_rejected={ing.n_rejected} negative_prices={ing.negative_prices}"] if ing is not None else []
    with (out / "table1_screens.csv").open("w", encoding="utf-8", newline="") as fh:
        write_screen_report(report, fh, _header(cfg, "Sample construction", *extra))
    print(f"screened panel: {screened.n_obs} obs, {len(screened.stocks)} stocks -> {out / SCREENED}")
    return 0


def _generator(cfg: RunConfig):
    base = BaselineGenerator(cfg.seed, cfg.p_exploit)
    if cfg.generator.kind == "llm":
        if not cfg.generator.llm_endpoint:
            raise CommandError("generator kind 'llm' needs an endpoint")
        return LLMGenerator(cfg.generator.llm_endpoint, base, cfg.generator.llm_timeout)
    if cfg.generator.kind != "baseline":
        raise CommandError(f"unknown generator kind {cfg.generator.kind!r}")
    return base


def cmd_discover(args) -> int:
    cfg = _settings(args)
    out = _out(cfg)
    panel = build_primitives(_screened(cfg))
    camp = cfg.campaign()
    state, log = None, []
    if args.resume and (out / STATE).is_file():
        state = AgentState.from_json(json.loads((out / STATE).read_text(encoding="utf-8")))
        log = load_log((out / LOG).read_text(encoding="utf-8")) if (out / LOG).is_file() else []
    result = run_campaign(panel, camp, _generator(cfg), state, log, stop_after=args.stop_after)
    (out / LOG).write_text(dump_log(result.log), encoding="utf-8")
    (out / STATE).write_text(result.state.dumps() + "\n", encoding="utf-8")
    entries = [LibraryEntry(e["id"], e["expr"], e["rationale"], e["metrics"]) for e in result.library]
    (out / LIBRARY).write_text(dump_library(entries), encoding="utf-8")
    header = _header(cfg, "In-sample metrics of promoted factors", f"window={cfg.split.is_start}..{cfg.split.is_end}")
    rp.write_table(out / "table3_is.csv", header, [rp.table3_section(result.library)])
    rp.write_table(out / "library.csv", _header(cfg, "Factor library"), [rp.library_section(result.library)])
    if result.oos:
        (out / "oos_report.json").write_text(json.dumps(result.oos, indent=1, sort_keys=True, default=_jsonable) + "\n", encoding="utf-8")
    print(f"round {result.state.round}/{camp.rounds}: library {len(result.library)}, log {len(result.log)} records")
    return 0


def _jsonable(o):
    if isinstance(o, float) and not np.isfinite(o):
        return None
    if isinstance(o, np.generic):
        return o.item()
    raise TypeError(type(o))


def _factor_scores(panel, entries, cfg: RunConfig):
    cut, fwd, lo = _oos_slice(panel, cfg)
    e = cfg.eval
    prim = build_primitives(cut)
    for entry in entries:
        raw = evaluate(parse_expr(entry.expr), prim).values[lo:]
        yield entry, raw, normalize_panel(raw, e.winsor_low, e.winsor_high), fwd[lo:], cut.dates[lo:]


def cmd_backtest(args) -> int:
    cfg = _settings(args)
    out = _out(cfg)
    entries = _library(cfg)
    panel = _screened(cfg)
    Q = cfg.aggregation.n_deciles
    window = f"window={cfg.split.oos_start}..{cfg.split.oos_end}"
    lib_dicts, labels, horizons, series, dates = [], [], [], {}, None
    decile_rows = []
    for i, (entry, raw, z, fwd, dates) in enumerate(_factor_scores(panel, entries, cfg), 1):
        m = evaluate_factor(raw, fwd, cfg.eval, dates)
        lib_dicts.append({"expr": entry.expr, "rationale": entry.rationale, "metrics": m.to_dict()})
        bt = decile_backtest(z, fwd, dates, Q)
        label = f"Factor {i}"
        labels.append(label)
        horizons.append(multi_horizon(z, fwd, range(1, 8), Q))
        series[label] = bt.spread
        rp.write_table(out / f"table7_factor{i}.csv", _header(cfg, f"Decile portfolios: {label} = {entry.expr}", window, f"decile_monotonicity={rp.fmt(bt.monotonicity)}"), rp.table7_sections(bt))
        decile_rows.append(_decile_row(label, bt))
    rp.write_table(out / "table3_oos.csv", _header(cfg, "Out-of-sample metrics of library factors", window), [rp.table3_section(lib_dicts)])
    cols = ("Factor", "Low", *[str(q) for q in range(2, Q)], "High", "High-Low")
    rp.write_table(out / "table_deciles.csv", _header(cfg, "Annualized decile returns (%) and t-statistics", window), [rp.Section(cols, [r for pair in decile_rows for r in pair])])
    rp.write_table(out / "table8_horizons.csv", _header(cfg, "Annualized D10-D1 return (%) by holding horizon, Newey-West t", window), [rp.table8_section(labels, horizons)])
    if dates is not None:
        rp.write_series(out / "series_factor_spreads.csv", _header(cfg, "Daily D10-D1 gross returns", window), dates, series)
        rp.write_chart(out / "chart_factor_cumulative.svg", dates, {k: rp.cumulative(v) for k, v in series.items()}, "Cumulative D10-D1 return by factor")
    print(f"backtested {len(entries)} factor(s) over {window}")
    return 0


def _decile_row(label, bt):
    cols = [bt.decile_returns[:, q] for q in range(bt.n_quantiles)] + [bt.spread]
    stats = [nw_mean_tstat(c[np.isfinite(c)], 5) for c in cols]
    return (label, *(rp.pct(252 * m) for m, _ in stats)), ("", *(rp.paren(t) for _, t in stats))


def _composite(fm, cfg: RunConfig, kind: str, lo: int):
    agg = cfg.aggregation
    res = walk_forward(fm, agg.plan(), kind, agg.ridge, agg.gbdt, start=lo)
    return res.scores


def _feature_matrix(panel, exprs: dict, cfg: RunConfig):
    cut = panel.truncate(cfg.split.oos_end)
    fm = build_feature_matrix(build_primitives(cut), exprs, cfg.eval.winsor_low, cfg.eval.winsor_high)
    lo = int(np.searchsorted(cut.dates, np.datetime64(cfg.split.oos_start, "D")))
    if lo >= len(cut.dates):
        raise CommandError(f"no panel dates on or after OOS start {cfg.split.oos_start}")
    return fm, lo


def cmd_aggregate(args) -> int:
    cfg = _settings(args)
    out = _out(cfg)
    entries = _library(cfg)
    if not entries:
        raise CommandError("library is empty; nothing to aggregate")
    panel = _screened(cfg)
    fm, lo = _feature_matrix(panel, {e.id: e.expr for e in entries}, cfg)
    Q = cfg.aggregation.n_deciles
    dates = fm.dates[lo:]
    fwd = fm.fwd[lo:]
    window = f"window={cfg.split.oos_start}..{cfg.split.oos_end}"
    models = [cfg.aggregation.model] + [m for m in (args.compare or "").split(",") if m and m != cfg.aggregation.model]
    spreads, long_only, scores_out = {}, {}, {}
    for kind in models:
        scores = _composite(fm, cfg, kind, lo)[lo:]
        bt = with_costs(decile_backtest(scores, fwd, dates, Q), fwd, cfg.costs)
        name = kind.capitalize() if kind != "gbdt" else "GBDT"
        spreads[name] = bt.spread
        long_only[name] = bt.decile_returns[:, -1]
        scores_out[kind] = scores
        if kind != cfg.aggregation.model:
            continue
        primary, primary_name = bt, name
    bt = primary
    gross = bt.spread
    full = float(np.prod(1.0 + gross[np.isfinite(gross)]) - 1.0)
    perf = perf_summary(gross)
    mdd = max_drawdown(equity_curve(gross[np.isfinite(gross)]))
    quarters = quarterly_table(dates, gross, bt.turnover, bt.net)
    label = f"{dates[0]}..{dates[-1]}" if len(dates) else ""
    cost = f"one_way_bps={cfg.costs.one_way_bps} model={cfg.aggregation.model}"
    rp.write_table(out / "table5_composite.csv", _header(cfg, f"Out-of-sample performance of the {primary_name} composite long-short strategy", window, cost), rp.table5_sections(label, full, perf, mdd, perf.n, quarters))
    net_full = float(np.prod(1.0 + bt.net[np.isfinite(bt.net)]) - 1.0)
    rp.write_table(out / "table7_composite.csv", _header(cfg, f"Decile portfolio performance, {primary_name} composite", window, cost, f"decile_monotonicity={rp.fmt(bt.monotonicity)}"), rp.table7_sections(bt, net_full, perf_summary(bt.net).sharpe))
    rp.write_table(out / "table9_costs.csv", _header(cfg, "Quarterly cost and turnover diagnostics", window, cost), [rp.table9_section(quarters)])
    hz = [multi_horizon(scores_out[k], fwd, range(1, 8), Q) for k in scores_out]
    rp.write_table(out / "table8_composite.csv", _header(cfg, "Annualized D10-D1 return (%) by holding horizon, Newey-West t", window), [rp.table8_section(list(spreads), hz)])
    rp.write_series(out / "series_composite.csv", _header(cfg, "Composite daily returns", window, cost), dates, {"gross": gross, "net": bt.net, "turnover": bt.turnover})
    port = {f"{k} long-short": v for k, v in spreads.items()}
    port.update({f"{k} long-only": v for k, v in long_only.items()})
    rp.write_series(out / "series_portfolios.csv", _header(cfg, "Composite portfolio daily returns", window), dates, port)
    rp.write_chart(out / "chart_gross_net.svg", dates, {"Gross": rp.cumulative(gross), "Net": rp.cumulative(bt.net)}, "Cumulative long-short return: gross vs net", dashed=("Net",))
    rp.write_chart(out / "chart_deciles.svg", dates, {f"D{q + 1}": rp.cumulative(bt.decile_returns[:, q]) for q in range(Q)}, "Cumulative decile returns")
    if len(spreads) > 1:
        rp.write_chart(out / "chart_models.svg", dates, {k: rp.cumulative(v) for k, v in spreads.items()}, "Cumulative long-short return by aggregation model")
    if cfg.paths.baseline_factors:
        _baseline_comparison(cfg, panel, spreads, models, dates, fwd, lo, out, window)
    np.save(out / "composite_scores.npy", scores_out[cfg.aggregation.model])
    print(f"{primary_name} composite: OOS Sharpe {perf.sharpe:.2f}, D{Q}-D1 period return {100 * full:.2f}%")
    return 0


def _baseline_comparison(cfg, panel, spreads, models, dates, fwd, lo, out, window):
    path = _require(Path(cfg.paths.baseline_factors), "baseline factor file")
    exprs = read_expr_file(path.read_text(encoding="utf-8").splitlines())
    if not exprs:
        return
    fm, _ = _feature_matrix(panel, {f"B{i}": render(e) for i, e in enumerate(exprs, 1)}, cfg)
    curves = {}
    for kind in models:
        s = _composite(fm, cfg, kind, lo)[lo:]
        bt = decile_backtest(s, fwd, dates, cfg.aggregation.n_deciles)
        name = kind.capitalize() if kind != "gbdt" else "GBDT"
        curves[f"Baseline-{name}"] = bt.spread
    for k, v in spreads.items():
        curves[f"Library-{k}"] = v
    rows = [(k, rp.pct(perf_summary(v).ann_return), rp.fmt(perf_summary(v).sharpe, 3)) for k, v in curves.items()]
    rp.write_table(out / "table_baseline_comparison.csv", _header(cfg, "Library vs baseline factor composites (D10-D1)", window), [rp.Section(("Specification", "Ann. Ret. (%)", "Sharpe"), rows)])
    labels = {k: f"{k} ({rp.pct(perf_summary(v).ann_return)}%)" for k, v in curves.items()}
    rp.write_chart(out / "chart_baseline_comparison.svg", dates, {labels[k]: rp.cumulative(v) for k, v in curves.items()}, "Cumulative D10-D1 return: library vs baseline factors")


def _read_series(path: Path) -> tuple[np.ndarray, dict]:
    secs = rp.read_table(_require(path, "series file"))
    s = secs[-1]
    dates = np.array([r[0] for r in s.rows], dtype="datetime64[D]")
    cols = {}
    for j, name in enumerate(s.columns[1:], 1):
        cols[name] = np.array([np.nan if r[j] == "NA" else float(r[j]) for r in s.rows])
    return dates, cols


def cmd_attribute(args) -> int:
    cfg = _settings(args)
    out = _out(cfg)
    if not cfg.paths.benchmark:
        raise CommandError("config has no [paths] benchmark")
    with _require(Path(cfg.paths.benchmark), "benchmark file").open(encoding="utf-8", newline="") as fh:
        bench = ingest_factor_returns(fh)
    window = f"window={cfg.split.oos_start}..{cfg.split.oos_end}"
    done = 0
    for src, dst, title, cols in (
        ("series_factor_spreads.csv", "table4_alphas.csv", "Risk-adjusted alphas of library factors (annualized, Newey-West t)", rp.TABLE4_COLUMNS),
        ("series_portfolios.csv", "table6_alphas.csv", "Risk-adjusted alphas of composite portfolios (annualized, Newey-West t)", rp.TABLE6_COLUMNS),
    ):
        if not (out / src).is_file():
            continue
        dates, cols_ = _read_series(out / src)
        labels, ests = [], []
        for name, r in cols_.items():
            row = {}
            for spec in rp.ATTRIBUTION_SPECS:
                if all(c in bench.factors for c in MODEL_SPECS[spec]):
                    # long-only legs are not self-financing, so they earn the excess over RF
                    excess = name.endswith("long-only") and "RF" in bench.factors
                    row[spec] = alpha_regression(dates, r, bench, spec, nw_lags=5, subtract_rf=excess)
            labels.append(name)
            ests.append(row)
        rp.write_table(out / dst, _header(cfg, title, window, "nw_lags=5"), rp.table4_sections(labels, ests, cols))
        done += 1
    if not done:
        raise CommandError("no return series found; run `backtest` or `aggregate` first")
    print(f"wrote {done} attribution table(s) to {out}")
    return 0


# --------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="factorloop", description="Closed-loop formulaic factor discovery and evaluation.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", required=True, help="INI run configuration")
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--out", default=None, help="output directory (overrides [paths] out)")
        sp.add_argument("--split", default=None, help="preset name or is_start,is_end,oos_start,oos_end")
        return sp

    sp = sub.add_parser("synth", help="write a planted-signal fixture and a matching config")
    sp.add_argument("--config", required=True, help="path of the config file to write")
    sp.add_argument("--seed", type=int, default=None)
    sp.add_argument("--out", default=None, help="fixture directory")
    sp.add_argument("--n-stocks", type=int, default=synth.SynthParams.n_stocks)
    sp.add_argument("--n-days", type=int, default=synth.SynthParams.n_days)
    sp.add_argument("--n-is-days", type=int, default=synth.SynthParams.n_is_days)
    sp.add_argument("--noise", type=float, default=synth.SynthParams.noise)
    sp.add_argument("--ineligible-frac", type=float, default=0.05)
    sp.add_argument("--late-listing-frac", type=float, default=0.05)
    sp.set_defaults(func=cmd_synth)

    common(sub.add_parser("ingest", help="parse and screen the raw panel")).set_defaults(func=cmd_ingest)

    sp = common(sub.add_parser("discover", help="run the discovery campaign"))
    sp.add_argument("--llm-endpoint", default=None)
    sp.add_argument("--resume", action="store_true", help="continue from the saved agent state")
    sp.add_argument("--stop-after", type=int, default=None, help="stop after this round (checkpoint)")
    sp.set_defaults(func=cmd_discover)

    common(sub.add_parser("backtest", help="OOS single-factor reports")).set_defaults(func=cmd_backtest)

    sp = common(sub.add_parser("aggregate", help="walk-forward composite and cost reports"))
    sp.add_argument("--model", choices=("linear", "gbdt", "equal"), default=None)
    sp.add_argument("--cost-bps", type=float, default=None)
    sp.add_argument("--compare", default=None, help="extra models to chart, e.g. gbdt,equal")
    sp.set_defaults(func=cmd_aggregate)

    common(sub.add_parser("attribute", help="alpha regressions on benchmark factors")).set_defaults(func=cmd_attribute)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (CommandError, ConfigError, PanelError, ExprError, OSError, ValueError) as exc:
        print(f"factorloop {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
