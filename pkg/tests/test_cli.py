from __future__ import annotations

import json
from collections import Counter

import pandas as pd
import pytest
import yaml

from nudgelab import cli
from nudgelab.analysis import quick_effects
from nudgelab.config import ConfigError, load_config, stream_seed
from nudgelab.pipeline import read_snapshots, run_simulate
from nudgelab.trial_sim import clean_panel, randomize, simulate_trial, synth_population


def _cfg(tmp_path, name="run.yaml", **extra):
    body = {"seed": 21, "population": 45, "hte_trees": 30, "permutations": 49, **extra}
    path = tmp_path / name
    path.write_text(yaml.safe_dump(body))
    return path


def _run_all(cfg_path, out):
    assert cli.main(["simulate", "--config", str(cfg_path), "--out", str(out)]) == 0
    for r in range(1, 6):
        assert cli.main(["nudge", "--round", str(r), "--config", str(cfg_path), "--out", str(out)]) == 0
    assert cli.main(["analyze", "--config", str(cfg_path), "--out", str(out)]) == 0


def _digests(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def two_runs(tmp_path_factory):
    base = tmp_path_factory.mktemp("cli")
    cfg = _cfg(base)
    _run_all(cfg, base / "a")
    _run_all(cfg, base / "b")
    return cfg, base / "a", base / "b"


def test_full_runs_byte_identical(two_runs):
    _, a, b = two_runs
    da, db = _digests(a), _digests(b)
    assert set(da) == set(db)
    differ = [k for k in da if da[k] != db[k]]
    # the manifest embeds the output directory; everything else must match exactly
    assert differ == ["analysis/manifest.json"]
    ma = json.loads(da["analysis/manifest.json"])
    mb = json.loads(db["analysis/manifest.json"])
    ma["config"].pop("out"), mb["config"].pop("out")
    assert ma == mb


def test_manifest_contents(two_runs):
    _, a, _ = two_runs
    m = json.loads((a / "analysis" / "manifest.json").read_text())
    assert m["seed"] == 21
    assert set(m["versions"]) >= {"nudgelab", "numpy", "pandas", "scipy", "numba", "pyyaml"}
    top = {p.name for p in a.iterdir() if p.is_file()}
    assert set(m["inputs"]) == top
    produced = {p.name for p in (a / "analysis").iterdir() if p.name != "manifest.json"}
    assert set(m["outputs"]) == produced
    assert m["streams"]["trial"] == stream_seed(21, "trial")
    for name, status in m["analyses"].items():
        assert status == "done" or status.startswith("skipped: "), (name, status)
    assert m["notes"]["content_shares"] == "dictionary_share_proxy"


def test_analyze_rerun_identical(two_runs):
    cfg, a, _ = two_runs
    before = _digests(a / "analysis")
    assert cli.main(["analyze", "--config", str(cfg), "--out", str(a)]) == 0
    assert _digests(a / "analysis") == before


def test_report_prints_and_writes(two_runs, capsys):
    cfg, a, _ = two_runs
    capsys.readouterr()
    assert cli.main(["report", "--config", str(cfg), "--out", str(a)]) == 0
    text = capsys.readouterr().out
    assert "Adjusted contrasts" in text and (a / "analysis" / "report.txt").read_text() == text


def test_nudge_rerun_idempotent(two_runs):
    cfg, a, _ = two_runs
    before = (a / "bundles_round1.jsonl").read_bytes()
    assert cli.main(["nudge", "--round", "1", "--config", str(cfg), "--out", str(a)]) == 0
    assert (a / "bundles_round1.jsonl").read_bytes() == before
    assert len(before.splitlines()) == 45


def test_hte_toggle_recorded(tmp_path, two_runs):
    _, a, _ = two_runs
    cfg = _cfg(tmp_path, "nohte.yaml", analyses={"hte": False})
    assert cli.main(["analyze", "--config", str(cfg), "--out", str(a)]) == 0
    m = json.loads((a / "analysis" / "manifest.json").read_text())
    assert m["analyses"]["hte"] == "disabled"


def test_exit_codes(tmp_path, capsys):
    out = tmp_path / "fresh"
    cfg = _cfg(tmp_path)
    assert cli.main(["nudge", "--round", "1", "--config", str(cfg), "--out", str(out)]) == 3
    assert cli.main(["analyze", "--config", str(cfg), "--out", str(out)]) == 3
    assert cli.main(["report", "--config", str(cfg), "--out", str(out)]) == 3
    assert cli.main(["nudge", "--round", "6", "--config", str(cfg), "--out", str(out)]) == 2
    assert cli.main(["simulate", "--config", str(_cfg(tmp_path, "tiny.yaml", population=2)), "--out", str(out)]) == 2
    (tmp_path / "noseed.yaml").write_text("population: 30\n")
    assert cli.main(["simulate", "--config", str(tmp_path / "noseed.yaml")]) == 2
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert cli.main(["simulate", "--config", str(cfg), "--out", str(blocker / "sub")]) == 1
    with pytest.raises(SystemExit) as ei:
        cli.main(["simulate", "--seed", "-1"])
    assert ei.value.code == 2
    capsys.readouterr()


def test_config_validation():
    with pytest.raises(ConfigError):
        load_config(seed=1, bogus=3)
    with pytest.raises(ConfigError):
        load_config(seed=1, arm_curves={"electricity": {"T2": [0.95] * 5}})
    with pytest.raises(ConfigError):
        load_config(seed=2**64)
    assert load_config(seed=2**64 - 1).seed == 2**64 - 1
    assert stream_seed(1, "a") != stream_seed(1, "b") and stream_seed(1, "a") == stream_seed(1, "a")


def test_simulate_default_population(tmp_path):
    cfg = load_config(seed=3)
    res = run_simulate(cfg, tmp_path)
    assert res["n"] == 233
    sizes = Counter(pd.read_csv(tmp_path / "assignment.csv")["arm"])
    assert all(74 <= s <= 81 for s in sizes.values()), sizes
    assert len(read_snapshots(tmp_path / "profiles_round0.jsonl")) == 233
    panel = pd.read_csv(tmp_path / "panel.csv")
    assert {"participant_id", "arm", "cluster_id", "date", "phase", "round", "resource", "value",
            "missing"} <= set(panel.columns)


def test_null_pipeline_nominal_rejections():
    cfg = load_config(seed=0, calibration="null")
    rejections = 0
    for seed in range(60):
        pop = synth_population(120, stream_seed(seed, "population"))
        a = randomize(pop.clusters, 3, stream_seed(seed, "randomize"))
        panel, _ = clean_panel(simulate_trial(pop, a, cfg.sim_config(), stream_seed(seed, "trial")))
        eff = quick_effects(panel, pop.profiles)
        rejections += eff["contrasts"]["omnibus"].p_value < 0.05
    assert rejections / 60 <= 0.15
