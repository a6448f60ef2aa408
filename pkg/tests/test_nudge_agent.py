from __future__ import annotations

import dataclasses
import datetime as dt
import http.server
import json
import threading

import pytest
from hypothesis import given, strategies as st

from nudgelab.knowledge_base import Library, SuggestionRecord, default_library
from nudgelab.nudge_agent import (AssemblyError, BackendError, Candidate, InsufficientDataError,
                                  PoolUnderfullError, RemoteBackend, ScreeningExhaustedError, TemplateBackend,
                                  assemble_bundle, generate_bundle, load_analogy_table, read_bundles, round_sig,
                                  safety_screen, stage1_usage_feedback, stage2_select, stage3_quantify,
                                  write_bundles)
from nudgelab.nudge_agent.agent import APPROX_MARKER, risk_flags
from nudgelab.pipeline import load_all_bundles

WINDOW = ("2024-03-01", "2024-03-07")


def _series(values, start="2024-03-01"):
    d0 = dt.date.fromisoformat(start)
    return tuple(((d0 + dt.timedelta(days=i)).isoformat(), v) for i, v in enumerate(values))


@pytest.fixture
def person(make_profile):
    return make_profile(consumption_history={"electricity": _series([2, 2, 2, 4, 4, 4]),
                                             "hot_water": _series([40.0] * 7)})


# -- stage 1 --------------------------------------------------------------------------

def test_stage1_examples(person):
    fb = stage1_usage_feedback(person, [person], WINDOW)
    e, h = fb["electricity"], fb["hot_water"]
    assert (e.trend, e.percent_change) == ("up", 100.0)
    assert e.total_since_last == 18 and e.peer_ratio == 1.0
    assert h.trend == "flat" and h.peer_ratio == 1.0
    assert sum(s for _, s in e.appliance_breakdown) == pytest.approx(1.0, abs=1e-9)


def test_stage1_empty_window(person):
    with pytest.raises(InsufficientDataError):
        stage1_usage_feedback(person, [person], ("2025-01-01", "2025-01-07"))
    with pytest.raises(InsufficientDataError):
        stage1_usage_feedback(person, [], WINDOW)


@given(st.lists(st.lists(st.one_of(st.none(), st.floats(0.1, 50)), min_size=7, max_size=7)
                .filter(lambda v: any(x is not None for x in v)), min_size=1, max_size=6))
def test_stage1_totals_brute_force(make_profile, rows):
    people = [make_profile(f"P{i}", consumption_history={"electricity": _series(v), "hot_water": _series(v)})
              for i, v in enumerate(rows)]
    all_obs = [x for v in rows for x in v if x is not None]
    for p, v in zip(people, rows):
        fb = stage1_usage_feedback(p, people, WINDOW)["electricity"]
        obs = [x for x in v if x is not None]
        assert fb.total_since_last == pytest.approx(sum(obs))
        assert fb.peer_ratio == pytest.approx((sum(obs) / len(obs)) / (sum(all_obs) / len(all_obs)))
        assert fb.peer_ratio > 0


# -- stage 2 --------------------------------------------------------------------------

def test_stage2_pool_and_determinism(person):
    lib, be = default_library(), TemplateBackend()
    fb = stage1_usage_feedback(person, [person], WINDOW)
    a = stage2_select(person, lib, be, fb, seed=3)
    b = stage2_select(person, lib, be, fb, seed=3)
    for res in ("electricity", "hot_water"):
        assert len(a.pools[res]) == 4
        assert sorted(c.source for c in a.pools[res]) == ["generated"] * 2 + ["library"] * 2
        assert [c.id for c in a.selected[res]] == [c.id for c in b.selected[res]]
        assert len(a.selected[res]) == 2
    assert [line.split(":")[0] for line in a.new_summary.splitlines()] == \
        ["habits", "likely_adoption", "largest_savings", "past_effectiveness"]


def test_stage2_no_immediate_repeat(person):
    lib, be = default_library(), TemplateBackend()
    fb = stage1_usage_feedback(person, [person], WINDOW)
    first = stage2_select(person, lib, be, fb, seed=3)
    top = first.pools["hot_water"][0].id
    again = dataclasses.replace(person, prior_suggestions=((1, (top,)),), round=1)
    second = stage2_select(again, lib, be, fb, seed=3)
    assert top not in [c.id for c in second.selected["hot_water"]]
    assert second.pools["hot_water"][0].id == top


def test_stage2_empty_library(person):
    fb = stage1_usage_feedback(person, [person], WINDOW)
    with pytest.raises(PoolUnderfullError):
        stage2_select(person, Library(()), TemplateBackend(), fb)


# -- stage 3 --------------------------------------------------------------------------

def _shower(strategy="duration_control", text="Take shorter showers."):
    return SuggestionRecord("H9", "showering", "shower", strategy, "hot_water", text)


def test_stage3_shower_arithmetic(make_profile):
    p = make_profile(usage_params={"shower_flow_lpm": 30.0, "showers_per_week": 5.0})
    sc = stage3_quantify(_shower(), p, load_analogy_table())
    # 0.5 min x 30 L/min x 5/week x 52/12 weeks = 325 L -> two significant figures
    assert sc.estimated_saving == 330.0 and sc.unit == "L"
    assert sc.approximate_flag and APPROX_MARKER in sc.prose
    assert sc.analogy == "enough water to make 110 cups of medium coffee"


def test_stage3_zero_and_qualitative(make_profile):
    p = make_profile()
    zero = stage3_quantify(_shower(), p, load_analogy_table(), delta=0.0)
    assert zero.estimated_saving == 0.0 and zero.analogy == "no change"
    q = stage3_quantify(_shower("monitoring_feedback", "Check your card."), p, load_analogy_table())
    assert q.estimated_saving is None and q.analogy == ""


@given(st.floats(1e-6, 1e9))
def test_round_sig_two_figures(x):
    r = round_sig(x)
    # r must be exactly the double nearest some two-significant-figure decimal
    assert float(f"{r:.1e}") == r
    assert abs(r - x) <= 0.05 * x + 1e-12


# -- assembly and screening ----------------------------------------------------------

def test_assembly_rules(person):
    fb = stage1_usage_feedback(person, [person], WINDOW)
    assert assemble_bundle("T1", "P001", 1, fb).format == "image_report"
    assert assemble_bundle("C", "P001", 1, fb).format == "text_link"
    s2 = stage2_select(person, default_library(), TemplateBackend(), fb)
    with pytest.raises(AssemblyError):
        assemble_bundle("C", "P001", 1, fb, s2)
    with pytest.raises(AssemblyError):
        assemble_bundle("T2", "P001", 1, fb)
    tab = load_analogy_table()
    scen = {r: [stage3_quantify(c, person, tab) for c in s2.selected[r]] for r in s2.selected}
    b = assemble_bundle("T2", "P001", 1, fb, s2, scen)
    assert len(b.suggestion_ids()) == 4


def _t2(person):
    fb = stage1_usage_feedback(person, [person], WINDOW)
    s2 = stage2_select(person, default_library(), TemplateBackend(), fb)
    tab = load_analogy_table()
    q = lambda c: stage3_quantify(c, person, tab)
    scen = {r: [q(c) for c in s2.selected[r]] for r in s2.selected}
    return assemble_bundle("T2", "P001", 1, fb, s2, scen), s2, q


def test_screen_benign(person):
    b, s2, q = _t2(person)
    out, flags = safety_screen(b, s2.pools, q)
    assert flags == [] and out is b


def test_screen_replaces_risky(person):
    b, s2, q = _t2(person)
    risky = SuggestionRecord("X1", "showering", "shower", "frequency_reduction", "hot_water",
                             "Skip showers entirely on weekdays.")
    b.suggestions["hot_water"][0] = risky
    b.scenarios["hot_water"][0] = dataclasses.replace(b.scenarios["hot_water"][0], suggestion_id="X1")
    kept = b.suggestions["hot_water"][1]
    kept_scen = b.scenarios["hot_water"][1]
    out, flags = safety_screen(b, s2.pools, q)
    assert [f["suggestion_id"] for f in flags] == ["X1"]
    ids = [s.id for s in out.suggestions["hot_water"]]
    assert "X1" not in ids and len(ids) == 2
    assert out.suggestions["hot_water"][0] is kept and out.scenarios["hot_water"][0] is kept_scen


def test_screen_exhausted(person):
    b, s2, q = _t2(person)
    bad = [Candidate(SuggestionRecord(f"B{i}", "showering", "shower", "frequency_reduction", "hot_water",
                                      "Stop taking showers for a week."), "library") for i in range(4)]
    b.suggestions["hot_water"] = [c.record for c in bad[:2]]
    b.scenarios["hot_water"] = [q(c) for c in bad[:2]]
    with pytest.raises(ScreeningExhaustedError):
        safety_screen(b, {"electricity": s2.pools["electricity"], "hot_water": bad}, q)


def test_deny_list_patterns():
    assert risk_flags("Set the air conditioner to 10°C overnight") == ["extreme_temperature"]
    assert risk_flags("Set the air conditioner to 26 degrees C") == []
    assert risk_flags("Bypass the meter to cut costs") == ["appliance_tampering"]


def test_bundle_round_trip_and_determinism(tmp_path, person):
    args = (person, "T2", 1, [person], WINDOW, default_library(), TemplateBackend(), load_analogy_table(), 5)
    a, b = generate_bundle(*args), generate_bundle(*args)
    write_bundles(tmp_path / "a.jsonl", [a])
    write_bundles(tmp_path / "b.jsonl", [b])
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
    back = read_bundles(tmp_path / "a.jsonl")[0]
    assert back.suggestion_ids() == a.suggestion_ids()


def test_pipeline_t2_invariants(small_run):
    cfg, out = small_run
    bundles = load_all_bundles(out, 5)
    assert len(bundles) == 60 * 5
    last: dict[str, set] = {}
    for b in sorted(bundles, key=lambda b: (b.participant_id, b.round)):
        if b.arm != "T2":
            assert not b.suggestion_ids()
            continue
        for res in ("electricity", "hot_water"):
            assert len(b.suggestions[res]) == 2 and len(b.scenarios[res]) == 2
            for sc in b.scenarios[res]:
                assert sc.approximate_flag
                assert sc.estimated_saving is None or sc.estimated_saving >= 0
                assert APPROX_MARKER in sc.prose
        ids = set(b.suggestion_ids())
        assert not ids & last.get(b.participant_id, set())
        last[b.participant_id] = ids


# -- remote backend -----------------------------------------------------------------

class _Fake(http.server.BaseHTTPRequestHandler):
    script: list = []
    seen: list = []

    def do_POST(self):
        body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
        _Fake.seen.append((body, self.headers.get("Authorization")))
        status = _Fake.script.pop(0) if _Fake.script else 200
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.end_headers()
        if status == 200:
            self.wfile.write(json.dumps({"fields": {"echo": body["seed"]}}).encode())

    def log_message(self, *a):
        pass


@pytest.fixture
def fake_server():
    srv = http.server.HTTPServer(("127.0.0.1", 0), _Fake)
    t = threading.Thread(target=srv.serve_forever, daemon=True)
    t.start()
    _Fake.seen.clear()
    yield f"http://127.0.0.1:{srv.server_port}/generate"
    srv.shutdown()


def test_remote_retries_then_succeeds(fake_server):
    _Fake.script = [429, 503]
    be = RemoteBackend(fake_server, api_key="k", backoff=0.0, max_retries=3)
    assert be.generate({"task": "x"}, seed=9) == {"echo": 9}
    assert len(_Fake.seen) == 3
    assert _Fake.seen[0][0] == {"fields": {"task": "x"}, "seed": 9, "max_length": 2048}
    assert _Fake.seen[0][1] == "Bearer k"


def test_remote_gives_up(fake_server):
    _Fake.script = [500] * 10
    be = RemoteBackend(fake_server, backoff=0.0, max_retries=2)
    with pytest.raises(BackendError) as ei:
        be.generate({}, seed=0)
    assert ei.value.attempts == 3 and ei.value.retryable and ei.value.last_status == 500


def test_remote_client_error_not_retried(fake_server):
    _Fake.script = [400]
    be = RemoteBackend(fake_server, backoff=0.0)
    with pytest.raises(BackendError) as ei:
        be.generate({}, seed=0)
    assert ei.value.attempts == 1 and not ei.value.retryable and len(_Fake.seen) == 1


def test_remote_requires_endpoint(monkeypatch):
    monkeypatch.delenv("NUDGELAB_BACKEND_URL", raising=False)
    with pytest.raises(BackendError):
        RemoteBackend()
