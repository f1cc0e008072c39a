"""Run configuration read from an INI file.

Sections: [paths] [panel] [split] [campaign] [generator] [gate] [eval]
[aggregation] [costs]. Unknown keys are an error so typos do not silently
fall back to defaults. Relative paths resolve against the config file.
"""

from __future__ import annotations

import configparser
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .aggregation import WalkForwardPlan
from .backtest import CostModel
from .gate import GateThresholds
from .gbdt import GbdtParams
from .loop import CampaignConfig, SplitSpec, parse_split
from .metrics import EvalConfig
from .panel import ScreenConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Paths:
    panel: str = ""
    benchmark: str = ""
    out: str = "out"
    baseline_factors: str = ""


@dataclass(frozen=True)
class GeneratorSettings:
    kind: str = "baseline"  # baseline | llm
    llm_endpoint: str = ""
    llm_timeout: float = 30.0


@dataclass(frozen=True)
class AggregationSettings:
    model: str = "linear"  # linear | gbdt | equal
    ridge: float = 0.0
    train_window: int = 250
    refit_every: int = 60
    embargo: int = 1
    n_deciles: int = 10
    gbdt: GbdtParams = GbdtParams()

    def plan(self) -> WalkForwardPlan:
        return WalkForwardPlan(self.train_window, self.refit_every, self.embargo)


@dataclass(frozen=True)
class RunConfig:
    paths: Paths = Paths()
    split: SplitSpec = field(default_factory=lambda: parse_split("default"))
    screens: ScreenConfig = ScreenConfig()
    thresholds: GateThresholds = GateThresholds()
    eval: EvalConfig = EvalConfig()
    generator: GeneratorSettings = GeneratorSettings()
    aggregation: AggregationSettings = AggregationSettings()
    costs: CostModel = CostModel()
    rounds: int = 5
    batch_size: int = 16
    p_exploit: float = 0.6
    hold_max_age: int = 3
    seed: int = 0

    def campaign(self) -> CampaignConfig:
        return CampaignConfig(
            split=self.split,
            rounds=self.rounds,
            batch_size=self.batch_size,
            seed=self.seed,
            p_exploit=self.p_exploit,
            hold_max_age=self.hold_max_age,
            n_deciles=self.aggregation.n_deciles,
            thresholds=self.thresholds,
            eval=self.eval,
        )

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self), default=sorted))

    def config_hash(self) -> str:
        """Hash of everything that affects results; output paths are excluded."""
        d = self.to_dict()
        d.pop("paths")
        blob = json.dumps(d, sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:12]


def _coerce(cls, section: configparser.SectionProxy, name: str):
    kw = {}
    types = {f.name: f for f in fields(cls)}
    for key, raw in section.items():
        if key not in types:
            raise ConfigError(f"[{name}] unknown key {key!r}")
        default = getattr(cls(), key) if _has_defaults(cls) else None
        kw[key] = _convert(raw, default, f"[{name}] {key}")
    return kw


def _has_defaults(cls) -> bool:
    try:
        cls()
        return True
    except TypeError:
        return False


def _convert(raw: str, default, where: str):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            return raw.lower() in ("1", "true", "yes", "on")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, frozenset):
            return frozenset(int(x) for x in raw.replace(",", " ").split())
        if default is None and raw.lower() in ("", "none"):
            return None
        if default is None:
            return float(raw)
    except ValueError as exc:
        raise ConfigError(f"{where}: cannot parse {raw!r}") from exc
    return raw


RUN_KEYS = ("rounds", "batch_size", "p_exploit", "hold_max_age", "seed")


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    cp.read(path, encoding="utf-8")
    known = {"paths", "panel", "split", "campaign", "generator", "gate", "eval", "aggregation", "gbdt", "costs"}
    extra = set(cp.sections()) - known
    if extra:
        raise ConfigError(f"unknown section(s): {', '.join(sorted(extra))}")
    cfg = RunConfig()
    try:
        if cp.has_section("paths"):
            kw = _coerce(Paths, cp["paths"], "paths")
            kw = {k: str((path.parent / v).resolve()) if v and k != "out" else v for k, v in kw.items()}
            if kw.get("out"):
                kw["out"] = str((path.parent / kw["out"]).resolve())
            cfg = replace(cfg, paths=replace(cfg.paths, **kw))
        if cp.has_section("panel"):
            cfg = replace(cfg, screens=replace(cfg.screens, **_coerce(ScreenConfig, cp["panel"], "panel")))
        if cp.has_section("split"):
            sec = cp["split"]
            if "preset" in sec:
                cfg = replace(cfg, split=parse_split(sec["preset"]))
            else:
                cfg = replace(cfg, split=SplitSpec(sec["is_start"], sec["is_end"], sec["oos_start"], sec["oos_end"]))
        if cp.has_section("campaign"):
            sec = cp["campaign"]
            kw = {}
            for key, raw in sec.items():
                if key not in RUN_KEYS:
                    raise ConfigError(f"[campaign] unknown key {key!r}")
                kw[key] = _convert(raw, getattr(cfg, key), f"[campaign] {key}")
            cfg = replace(cfg, **kw)
        if cp.has_section("generator"):
            cfg = replace(cfg, generator=replace(cfg.generator, **_coerce(GeneratorSettings, cp["generator"], "generator")))
        if cp.has_section("gate"):
            cfg = replace(cfg, thresholds=replace(cfg.thresholds, **_coerce(GateThresholds, cp["gate"], "gate")))
        if cp.has_section("eval"):
            cfg = replace(cfg, eval=replace(cfg.eval, **_coerce(EvalConfig, cp["eval"], "eval")))
        if cp.has_section("aggregation"):
            cfg = replace(cfg, aggregation=replace(cfg.aggregation, **_coerce(AggregationSettings, cp["aggregation"], "aggregation")))
        if cp.has_section("gbdt"):
            gb = replace(cfg.aggregation.gbdt, **_coerce(GbdtParams, cp["gbdt"], "gbdt"))
            cfg = replace(cfg, aggregation=replace(cfg.aggregation, gbdt=gb))
        if cp.has_section("costs"):
            cfg = replace(cfg, costs=replace(cfg.costs, **_coerce(CostModel, cp["costs"], "costs")))
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"{path}: {exc}") from exc
    return cfg


def write_config(cfg: RunConfig, path) -> Path:
    """Write an INI file that ``load_config`` reads back to an equal RunConfig."""
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str

    def put(name, obj, skip=()):
        cp[name] = {}
        for f in fields(obj):
            if f.name in skip:
                continue
            v = getattr(obj, f.name)
            if isinstance(v, frozenset):
                v = " ".join(str(x) for x in sorted(v))
            cp[name][f.name] = "none" if v is None else str(v)

    put("paths", cfg.paths)
    put("panel", cfg.screens)
    put("split", cfg.split)
    cp["campaign"] = {k: str(getattr(cfg, k)) for k in RUN_KEYS}
    put("generator", cfg.generator)
    put("gate", cfg.thresholds)
    put("eval", cfg.eval)
    put("aggregation", cfg.aggregation, skip=("gbdt",))
    put("gbdt", cfg.aggregation.gbdt)
    put("costs", cfg.costs)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        cp.write(fh)
    return path
