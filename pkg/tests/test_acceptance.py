"""End-to-end acceptance suite.

Each test checks one acceptance criterion and prints a single
``criterion N PASS|FAIL: ...`` line (visible with ``pytest -s``).
"""

from __future__ import annotations

import itertools
import time
from fractions import Fraction

import numpy as np
import pandas as pd
from scipy import stats

from nudgelab import cli
from nudgelab.analysis import quick_effects
from nudgelab.config import load_config, stream_seed
from nudgelab.hte_meta import LEARNERS, estimate_ites
from nudgelab.nudge_agent.agent import APPROX_MARKER
from nudgelab.pipeline import load_all_bundles, run_nudge, run_simulate
from nudgelab.stats_core import f_statistic, km_survival, ols, permutation_test, product_limit
from nudgelab.text_metrics import CATEGORIES, count_keywords, parse_dictionaries
from nudgelab.trajectory_cluster import agglomerate, corr_distance, distance_matrix
from nudgelab.tree_learners import BoostConfig, fit_boost, importance
from nudgelab.trial_sim import clean_panel, randomize, simulate_trial, synth_population


def _verdict(n: int, ok: bool, detail: str) -> None:
    print(f"\ncriterion {n} {'PASS' if ok else 'FAIL'}: {detail}")


# -- 1: least squares ----------------------------------------------------------------

def test_c01_least_squares_oracle():
    t0 = time.perf_counter()
    rng = np.random.default_rng(101)
    worst = 0.0
    for _ in range(50):
        k = int(rng.integers(1, 7))
        n = int(rng.integers(k + 3, 41))
        X = np.column_stack([np.ones(n), rng.normal(size=(n, k))])
        y = X @ rng.normal(size=k + 1) + rng.normal(size=n)
        coef, *_ = ols(X, y)
        worst = max(worst, np.abs(coef - np.linalg.solve(X.T @ X, X.T @ y)).max())

    X = np.column_stack([np.ones(6), np.arange(6.0)])
    y = np.array([1, 3, 2, 6, 4, 7], dtype=float)
    g = np.array(["a", "b", "a", "b", "a", "b"])
    coef, cov, resid, _ = ols(X, y, clusters=g)
    bread = np.linalg.inv(X.T @ X)
    meat = sum(np.outer(X[g == c].T @ resid[g == c], X[g == c].T @ resid[g == c]) for c in ("a", "b"))
    direct = 2 / 1 * 5 / 4 * bread @ meat @ bread
    hand = np.array([[144 * 5 / 35**2, 24 / 245], [24 / 245, 4 * 5 / 35**2]])
    sw_err = max(np.abs(cov - direct).max(), np.abs(cov - hand).max())
    coef_err = np.abs(coef - [25 / 21, 37 / 35]).max()
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-8 and sw_err < 1e-10 and coef_err < 1e-12 and elapsed < 5
    _verdict(1, ok, f"max coef err {worst:.1e}, sandwich err {sw_err:.1e}, {elapsed:.2f}s")
    assert ok


# -- 2: Kaplan-Meier -------------------------------------------------------------------

KM_FIXTURES = [
    # (durations, events, {t: S(t)} by hand)
    ([1, 2, 3], [1, 1, 0], {1: Fraction(2, 3), 2: Fraction(1, 3), 3: Fraction(1, 3)}),
    ([2, 2, 2], [1, 0, 1], {1: Fraction(1), 2: Fraction(1, 3)}),
    ([1, 3, 5, 5], [0, 0, 0, 0], {1: Fraction(1), 5: Fraction(1)}),
    ([4], [1], {3: Fraction(1), 4: Fraction(0)}),
    ([1, 1, 2, 2, 3, 3, 4, 5, 5, 5], [1, 0, 1, 1, 0, 1, 1, 0, 1, 0],
     {1: Fraction(9, 10), 2: Fraction(27, 40), 3: Fraction(9, 16), 4: Fraction(27, 64), 5: Fraction(9, 32)}),
    ([1, 2, 2, 3, 4, 4, 5], [1, 1, 0, 1, 1, 1, 0],
     {1: Fraction(6, 7), 2: Fraction(5, 7), 3: Fraction(15, 28), 4: Fraction(5, 28), 5: Fraction(5, 28)}),
]


def _exact(x: float) -> Fraction:
    return Fraction(x).limit_denominator(10**6)


def test_c02_kaplan_meier_oracle():
    bad = []
    for dur, ev, want in KM_FIXTURES:
        curve = product_limit(dur, [bool(e) for e in ev], times=sorted(set(dur) | set(want)))
        got = {t: _exact(curve.at(t)) for t in want}
        if got != want:
            bad.append((dur, got, want))
    events = pd.DataFrame(
        [("a", 1, "open", 1.0)] + [("b", 1, "reply", 3.0), ("b", 2, "reply", 60.0)]
        + [("c", r, "reply", 5.0) for r in range(1, 6)],
        columns=["participant_id", "round", "kind", "hours_after_nudge"])
    km = km_survival(events, {"a": "C", "b": "C", "c": "C"})["C"]
    from_events = [_exact(km.at(t)) for t in range(1, 6)]
    if from_events != [Fraction(2, 3)] + [Fraction(1, 3)] * 4:
        bad.append(("events", from_events))
    ok = not bad
    _verdict(2, ok, f"{len(KM_FIXTURES) + 1} fixtures exact" if ok else f"mismatches {bad}")
    assert ok


# -- 3: permutation validity ---------------------------------------------------------

def test_c03_permutation_uniform_under_null():
    t0 = time.perf_counter()
    rng = np.random.default_rng(303)
    pvals = []
    for rep in range(200):
        sizes = rng.choice([1, 1, 1, 1, 2, 3], size=60)
        clusters = np.repeat(np.arange(60), sizes)[:60]
        n_cl = clusters.max() + 1
        arm_of = np.array(["C", "T1", "T2"])[rng.permutation(n_cl) % 3]
        labels = arm_of[clusters]
        y = rng.normal(size=n_cl)[clusters] * 0.5 + rng.normal(size=60)
        pvals.append(permutation_test(y, labels, f_statistic, B=500, seed=rep, clusters=clusters))
    ks = stats.kstest(pvals, "uniform")
    elapsed = time.perf_counter() - t0
    ok = ks.pvalue > 0.01 and elapsed < 60
    _verdict(3, ok, f"KS p={ks.pvalue:.3f} over 200 null datasets, {elapsed:.1f}s")
    assert ok


# -- 4: clustering oracle --------------------------------------------------------------

def _brute_force_merges(vectors):
    n = len(vectors)
    clusters = {i: [i] for i in range(n)}
    seq, nid = [], n
    while len(clusters) > 1:
        best = None
        for a, b in itertools.combinations(sorted(clusters), 2):
            link = max(corr_distance(vectors[i], vectors[j]) for i in clusters[a] for j in clusters[b])
            if best is None or (link, a, b) < best:
                best = (link, a, b)
        link, a, b = best
        clusters[nid] = clusters.pop(a) + clusters.pop(b)
        seq.append((a, b, link))
        nid += 1
    return seq


def test_c04_complete_linkage_oracle():
    rng = np.random.default_rng(404)
    mismatches = 0
    for _ in range(100):
        n = int(rng.integers(2, 13))
        vecs = rng.normal(size=(n, int(rng.integers(3, 6))))
        if rng.random() < 0.2:
            vecs[1] = 2 * vecs[0] + 1  # exact ties at distance zero
        got = [(m.left, m.right, m.distance) for m in agglomerate(distance_matrix(vecs))]
        mismatches += got != _brute_force_merges(vecs)
    ok = mismatches == 0
    _verdict(4, ok, f"{100 - mismatches}/100 merge sequences identical")
    assert ok


# -- 5: meta-learner recovery ------------------------------------------------------

def _synthetic(n, delta, seed):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, 5))
    arms = np.where(rng.permutation(n) % 2 == 0, "T2", "C")
    y = X[:, 0] + 0.5 * X[:, 1] + delta * (arms == "T2") + rng.normal(0, 0.5, n)
    return X, y, arms


def test_c05_meta_learner_recovery():
    t0 = time.perf_counter()
    X, y, arms = _synthetic(600, -0.5, 505)
    res = estimate_ites(X, y, arms, "T2", folds=5, seed=505)
    means = {m: float(res.column(m).mean()) for m in (*LEARNERS, "ensemble")}
    effect_ok = all(-0.6 <= v <= -0.4 for v in means.values())
    worst_null = 0.0
    for s in range(20):
        X, y, arms = _synthetic(600, 0.0, 1000 + s)
        r = estimate_ites(X, y, arms, "T2", folds=5, seed=s)
        sd = y.std(ddof=1)
        worst_null = max(worst_null, max(abs(r.column(m).mean()) / sd for m in (*LEARNERS, "ensemble")))
    elapsed = time.perf_counter() - t0
    ok = effect_ok and worst_null <= 0.1 and elapsed < 180
    shown = ", ".join(f"{k} {v:+.3f}" for k, v in means.items())
    _verdict(5, ok, f"effect means [{shown}]; worst null |mean|/SD {worst_null:.3f}; {elapsed:.0f}s")
    assert ok


# -- 6: boosted importance -------------------------------------------------------

def test_c06_boosted_importance():
    hits, worst_sum = 0, 0.0
    for seed in range(20):
        rng = np.random.default_rng(600 + seed)
        X = rng.normal(size=(233, 11))
        y = 3.0 * X[:, 0] + rng.normal(size=233)  # signal R^2 = 0.9
        imp = importance(fit_boost(X, y, BoostConfig()))
        hits += imp.values[0] > 0.5
        worst_sum = max(worst_sum, abs(imp.values.sum() - 1.0))
    ok = hits >= 18 and worst_sum <= 1e-9
    _verdict(6, ok, f"true feature > 0.5 in {hits}/20 seeds; max |sum - 1| {worst_sum:.1e}")
    assert ok


# -- 7: calibrated end-to-end recovery ------------------------------------------------

def test_c07_calibrated_recovery(tmp_path):
    cfg = load_config(seed=0)
    est, truth, ordered, omni, eng = [], [], [], [], []
    for s in range(100):
        pop = synth_population(233, stream_seed(s, "population"))
        a = randomize(pop.clusters, 3, stream_seed(s, "randomize"))
        raw = simulate_trial(pop, a, cfg.sim_config(), stream_seed(s, "trial"))
        panel, _ = clean_panel(raw, cfg.cleaning_rules())
        e = quick_effects(panel, pop.profiles)
        c = e["contrasts"]
        ate = raw.truth["ate"]["electricity"]
        est.append(c["T2-C"].estimate)
        truth.append(ate["T2"] - ate["C"])
        # T2 lowest, and T1 nearer to C than to T2
        ordered.append(c["T2-C"].estimate < 0 and c["T2-T1"].estimate < 0
                       and abs(c["T1-C"].estimate) < abs(c["T2-T1"].estimate))
        omni.append(c["omnibus"].p_value < 0.05)
        eng.append([e["engagement"][k] for k in ("C", "T1", "T2")])
    targets = np.array([raw.truth["engagement_targets"][k] for k in ("C", "T1", "T2")])
    rel = abs(np.mean(est) / np.mean(truth) - 1)
    eng_gap = np.abs(np.mean(eng, axis=0) - targets).max()

    t0 = time.perf_counter()
    out = tmp_path / "run"
    assert cli.main(["simulate", "--seed", "7", "--out", str(out)]) == 0
    for r in range(1, 6):
        assert cli.main(["nudge", "--round", str(r), "--seed", "7", "--out", str(out)]) == 0
    assert cli.main(["analyze", "--seed", "7", "--out", str(out)]) == 0
    elapsed = time.perf_counter() - t0

    ok = rel <= 0.25 and np.mean(ordered) >= 0.9 and np.mean(omni) >= 0.8 and eng_gap <= 0.05 and elapsed < 60
    _verdict(7, ok, f"T2-C mean {np.mean(est):+.3f} vs truth {np.mean(truth):+.3f} ({rel:.1%}); "
                    f"ordering {np.mean(ordered):.0%}; omnibus {np.mean(omni):.0%}; "
                    f"engagement gap {eng_gap * 100:.1f} pp; full pipeline {elapsed:.1f}s")
    assert ok


# -- 8: agent determinism and contract ----------------------------------------------

def test_c08_agent_determinism_and_contract(tmp_path):
    cfg = load_config(seed=8)
    for d in ("a", "b"):
        run_simulate(cfg, tmp_path / d)
        for r in range(1, 6):
            run_nudge(cfg, tmp_path / d, r)
    same = all((tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
               for f in [f"bundles_round{r}.jsonl" for r in range(1, 6)])
    bundles = load_all_bundles(tmp_path / "a", 5)
    violations, n_t2 = [], 0
    last: dict[str, set] = {}
    for b in sorted(bundles, key=lambda b: (b.participant_id, b.round)):
        if b.arm != "T2":
            if b.suggestion_ids():
                violations.append((b.participant_id, b.round, "suggestions outside T2"))
            continue
        n_t2 += 1
        for res in ("electricity", "hot_water"):
            sug, sc = b.suggestions[res], b.scenarios[res]
            if len(sug) != 2 or len(sc) != 2:
                violations.append((b.participant_id, b.round, res, "counts"))
            if not all(s.approximate_flag and APPROX_MARKER in s.prose for s in sc):
                violations.append((b.participant_id, b.round, res, "marker"))
        ids = set(b.suggestion_ids())
        if ids & last.get(b.participant_id, set()):
            violations.append((b.participant_id, b.round, "repeat"))
        last[b.participant_id] = ids
    ok = same and len(bundles) == 233 * 5 and not violations and n_t2 > 0
    _verdict(8, ok, f"byte-identical={same}; {len(bundles)} bundles, {n_t2} T2 checked, "
                    f"{len(violations)} violations")
    assert ok


# -- 9: greedy matcher oracle -----------------------------------------------------------

MATCH_DICT = """
[usage_gap]
more than
higher than average
[appliance_context]
air conditioner
air
water heater
[planning_action]
set a timer
plan
[social_norms]
your neighbors
[encouraging_efficacy]
you can
great job
"""

# message -> hand-traced counts (usage, appliance, planning, social, efficacy)
TRACES = [
    ("Turn off the air conditioner.", (0, 1, 0, 0, 0)),
    ("Open the air vent; fresh air helps.", (0, 2, 0, 0, 0)),
    ("air conditioner air conditioner air", (0, 3, 0, 0, 0)),
    ("Your neighbors use more than you.", (1, 0, 0, 1, 0)),
    ("You can set a timer for the water heater.", (0, 1, 1, 0, 1)),
    ("Great job! Great job!", (0, 0, 0, 0, 2)),
    ("Usage higher than average this week", (1, 0, 0, 0, 0)),
    ("higher than expected", (0, 0, 0, 0, 0)),
    ("Plan ahead and plan again", (0, 0, 2, 0, 0)),
    ("planning is key", (0, 0, 0, 0, 0)),
    ("airconditioner", (0, 0, 0, 0, 0)),
    ("air-conditioner", (0, 1, 0, 0, 0)),
    ("The water heater and the air conditioner run more than 8 hours.", (1, 2, 0, 0, 0)),
    ("You can, you can!", (0, 0, 0, 0, 2)),
    ("set a timer, set the timer", (0, 0, 1, 0, 0)),
    ("your neighbor", (0, 0, 0, 0, 0)),
    ("YOUR NEIGHBORS did a great job", (0, 0, 0, 1, 1)),
    ("", (0, 0, 0, 0, 0)),
    ("123 456 !!!", (0, 0, 0, 0, 0)),
    ("air air air", (0, 3, 0, 0, 0)),
    ("conditioner air", (0, 1, 0, 0, 0)),
    ("water heater heater water", (0, 1, 0, 0, 0)),
    ("more than more than more", (2, 0, 0, 0, 0)),
    ("higher than average more than average", (2, 0, 0, 0, 0)),
    ("you can plan your neighbors plan", (0, 0, 2, 1, 1)),
    ("heater water air conditioner water heater", (0, 2, 0, 0, 0)),
    ("Great jobs", (0, 0, 0, 0, 0)),
    ("great job you can set a timer", (0, 0, 1, 0, 2)),
    ("air, conditioner", (0, 1, 0, 0, 0)),
    ("The air conditioner is higher than average; you can plan.", (1, 1, 1, 0, 1)),
]


def test_c09_greedy_matcher_oracle():
    d = parse_dictionaries(MATCH_DICT)
    bad = []
    for i, (text, want) in enumerate(TRACES):
        got = count_keywords(text, d, str(i)).counts
        if tuple(got[c] for c in CATEGORIES) != want:
            bad.append((text, got))
    ok = len(TRACES) == 30 and not bad
    _verdict(9, ok, f"{30 - len(bad)}/30 messages match hand traces" + (f"; {bad}" if bad else ""))
    assert ok


# -- 10: cleaning rule ------------------------------------------------------------

def _cleaning_fixture():
    rows = []
    for pid, n_missing in (("P14", 14), ("P15", 15), ("P00", 0), ("P35", 35)):
        for day in range(35):
            miss = day < n_missing
            rows.append((pid, "C", pid, f"d{day:02d}", "intervention", day // 7 + 1, "electricity",
                         np.nan if miss else 3.0, miss))
    return pd.DataFrame(rows, columns=["participant_id", "arm", "cluster_id", "date", "phase", "round",
                                       "resource", "value", "missing"])


def test_c10_cleaning_boundary():
    out, _ = clean_panel(_cleaning_fixture())
    excluded = out.groupby("participant_id")["excluded"].first().to_dict()
    want = {"P00": False, "P14": False, "P15": True, "P35": True}
    ok = {k: bool(v) for k, v in excluded.items()} == want
    _verdict(10, ok, f"exclusions {excluded}")
    assert ok
