import filecmp
import json
import math
import shutil
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from factorloop import reports as rp
from factorloop.cli import main
from factorloop.config import load_config, write_config
from factorloop.metrics import TABLE3_COLUMNS


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    ini = root / "run.ini"
    assert run("synth", "--config", ini, "--out", root / "fx", "--n-days", 450) == 0
    cfg = load_config(ini)
    gb = replace(cfg.aggregation.gbdt, n_trees=20)
    write_config(replace(cfg, aggregation=replace(cfg.aggregation, gbdt=gb)), ini)
    for cmd in ("ingest", "discover", "backtest"):
        assert run(cmd, "--config", ini) == 0
    assert run("aggregate", "--config", ini, "--compare", "gbdt,equal") == 0
    assert run("attribute", "--config", ini) == 0
    return ini, Path(load_config(ini).paths.out)


def test_every_stage_writes(pipeline):
    _, out = pipeline
    for name in (
        "panel_screened.csv", "table1_screens.csv", "experiment_log.jsonl", "agent_state.json", "library.json",
        "table3_is.csv", "table3_oos.csv", "table7_factor1.csv", "table8_horizons.csv", "table5_composite.csv",
        "table7_composite.csv", "table9_costs.csv", "series_composite.csv", "chart_gross_net.svg", "chart_models.svg",
        "table_baseline_comparison.csv", "table4_alphas.csv", "table6_alphas.csv", "oos_report.json",
    ):
        assert (out / name).is_file(), name


def test_headers_carry_hash_and_seed(pipeline):
    ini, out = pipeline
    cfg = load_config(ini)
    for path in out.glob("*.csv"):
        if path.name == "panel_screened.csv":
            continue
        head = path.read_text().splitlines()[:3]
        assert f"# config_hash={cfg.config_hash()} seed={cfg.seed}" in head, path.name


def test_table1_rows(pipeline):
    _, out = pipeline
    sec = rp.read_table(out / "table1_screens.csv")[-1]
    assert sec.columns == rp.TABLE1_COLUMNS
    assert len(sec.rows) == 5  # raw universe plus four screens
    obs = [int(r[1]) for r in sec.rows]
    assert obs == sorted(obs, reverse=True)


def test_library_and_table3(pipeline):
    _, out = pipeline
    lib = json.loads((out / "library.json").read_text())
    assert lib, "planted fixture should promote at least one factor"
    sec = rp.read_table(out / "table3_oos.csv")[-1]
    assert sec.columns[1:] == TABLE3_COLUMNS
    assert len(sec.rows) == len(lib)


def test_table4_columns_and_capm_on_market(pipeline):
    _, out = pipeline
    sec = rp.read_table(out / "table4_alphas.csv")[-1]
    assert sec.columns == rp.TABLE4_COLUMNS
    sec6 = rp.read_table(out / "table6_alphas.csv")[-1]
    assert sec6.columns == rp.TABLE6_COLUMNS
    assert any(r[0] == "Linear long-short" for r in sec6.rows)


def test_quarterly_partition_in_emitted_table(pipeline):
    _, out = pipeline
    series = rp.read_table(out / "series_composite.csv")[-1]
    gross = np.array([float(r[1]) for r in series.rows if r[1] != "NA"])
    t5 = rp.read_table(out / "table5_composite.csv")
    quarters = [float(r[1]) / 100 for r in t5[1].rows]
    full = float(t5[0].rows[0][1]) / 100
    assert sum(math.log1p(q) for q in quarters) == pytest.approx(math.log1p(full), abs=2e-4)  # 2dp rounding in print
    assert math.log1p(full) == pytest.approx(np.log1p(gross).sum(), abs=1e-4)


def test_reruns_are_byte_identical(pipeline, tmp_path):
    ini, out = pipeline
    snap = tmp_path / "snap"
    shutil.copytree(out, snap)
    for cmd in ("ingest", "discover", "backtest", "attribute"):
        assert run(cmd, "--config", ini) == 0
    for path in snap.iterdir():
        assert filecmp.cmp(path, out / path.name, shallow=False), path.name


def test_zero_cost_gross_equals_net(pipeline, tmp_path):
    ini, _ = pipeline
    o = tmp_path / "zc"
    shutil.copytree(pipeline[1], o)
    assert run("aggregate", "--config", ini, "--out", o, "--cost-bps", 0) == 0
    sec = rp.read_table(o / "series_composite.csv")[-1]
    assert all(r[1] == r[2] for r in sec.rows)


def test_zero_rounds_empty_library(pipeline, tmp_path):
    ini, out = pipeline
    cfg = load_config(ini)
    o = tmp_path / "k0"
    o.mkdir()
    shutil.copy(out / "panel_screened.csv", o)
    ini0 = write_config(replace(cfg, rounds=0, paths=replace(cfg.paths, out=str(o))), tmp_path / "k0.ini")
    assert run("discover", "--config", ini0) == 0
    assert json.loads((o / "library.json").read_text()) == []
    assert run("aggregate", "--config", ini0) == 2


def test_resume_matches_uninterrupted(pipeline, tmp_path):
    ini, out = pipeline
    o = tmp_path / "res"
    o.mkdir()
    shutil.copy(out / "panel_screened.csv", o)
    assert run("discover", "--config", ini, "--out", o, "--stop-after", 2) == 0
    assert run("discover", "--config", ini, "--out", o, "--resume") == 0
    assert (o / "experiment_log.jsonl").read_bytes() == (out / "experiment_log.jsonl").read_bytes()
    assert (o / "library.json").read_bytes() == (out / "library.json").read_bytes()


def test_seed_changes_log(pipeline, tmp_path):
    ini, out = pipeline
    o = tmp_path / "s42"
    o.mkdir()
    shutil.copy(out / "panel_screened.csv", o)
    assert run("discover", "--config", ini, "--out", o, "--seed", 42) == 0
    first = (o / "experiment_log.jsonl").read_bytes()
    assert run("discover", "--config", ini, "--out", o, "--seed", 42) == 0
    assert (o / "experiment_log.jsonl").read_bytes() == first
    assert first != (out / "experiment_log.jsonl").read_bytes()


def test_missing_inputs_fail_cleanly(tmp_path, capsys):
    assert run("ingest", "--config", tmp_path / "absent.ini") == 2
    assert "absent.ini" in capsys.readouterr().err
    ini = tmp_path / "run.ini"
    ini.write_text(f"[paths]\npanel = {tmp_path / 'nope.csv'}\nbenchmark = {tmp_path / 'nobench.csv'}\nout = o\n")
    assert run("ingest", "--config", ini) == 2
    assert "nope.csv" in capsys.readouterr().err
    assert run("attribute", "--config", ini) == 2
    assert "nobench.csv" in capsys.readouterr().err
