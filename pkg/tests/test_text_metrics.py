from __future__ import annotations

import numpy as np
import pandas as pd
import pytest
from hypothesis import assume, given, strategies as st

from nudgelab.text_metrics import (CATEGORIES, ContentProfile, DictionaryError, KeywordDictionary, count_keywords,
                                   group_shares, load_dictionaries, match_phrases, parse_dictionaries,
                                   profiles_frame, round_drift, tokenize)

FIXTURE = """
# fixture dictionaries
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


@pytest.fixture(scope="module")
def d():
    return parse_dictionaries(FIXTURE)


def test_longest_match_first():
    kd = KeywordDictionary({"appliance_context": ("air conditioner", "air")})
    assert match_phrases("air conditioner air", kd) == {"air conditioner": 1, "air": 1}


def test_empty_and_repeat(d):
    p = count_keywords("", d)
    assert p.total == 0 and p.shares is None and all(v == 0 for v in p.counts.values())
    assert count_keywords("Great job! great job, GREAT JOB.", d).counts["encouraging_efficacy"] == 3


def test_punctuation_and_numbers_removed(d):
    p = count_keywords("You used 12% more-than your neighbors; 3 plans? plan!", d)
    assert p.counts["usage_gap"] == 1 and p.counts["social_norms"] == 1 and p.counts["planning_action"] == 1


def test_multi_category_phrase_credits_each():
    kd = KeywordDictionary({"usage_gap": ("your neighbors",), "social_norms": ("your neighbors",)})
    p = count_keywords("your neighbors", kd)
    assert p.counts["usage_gap"] == 1 and p.counts["social_norms"] == 1
    assert p.matched_units == 2


def test_char_mode_cjk():
    kd = KeywordDictionary({"appliance_context": ("空调", "空调遥控器"), "planning_action": ("定时",)})
    p = count_keywords("把空调遥控器设为定时，空调26度。", kd, mode="char")
    assert p.counts["appliance_context"] == 2 and p.counts["planning_action"] == 1


def test_dictionary_validation():
    with pytest.raises(DictionaryError):
        KeywordDictionary({"usage_gap": ("a", "A")})
    with pytest.raises(DictionaryError):
        KeywordDictionary({"usage_gap": ("...",)})
    with pytest.raises(DictionaryError):
        KeywordDictionary({"weather": ("rain",)})
    with pytest.raises(DictionaryError):
        parse_dictionaries("orphan phrase\n[usage_gap]\nx")


def test_shipped_dictionaries_load():
    kd = load_dictionaries()
    assert set(kd.categories) == set(CATEGORIES)


words = st.sampled_from(["air", "conditioner", "more", "than", "plan", "you", "can", "set", "a", "timer", "x"])


@given(st.lists(words, max_size=40))
def test_matched_units_bounded_and_deterministic(tokens):
    d = parse_dictionaries(FIXTURE)
    text = " ".join(tokens)
    p = count_keywords(text, d)
    assert 0 <= p.matched_units <= p.n_units == len(tokens)
    assert count_keywords(text.upper(), d).counts == p.counts
    assert count_keywords(text, d).counts == p.counts
    if p.total:
        assert sum(p.shares.values()) == pytest.approx(1.0)


phrase = st.lists(st.sampled_from(["a", "b", "c", "d"]), min_size=1, max_size=3).map(" ".join)


@given(st.lists(phrase, min_size=2, max_size=6, unique=True), st.lists(st.sampled_from("abcd"), max_size=30),
       st.data())
def test_phrase_removal(phrases, tokens, data):
    kd = KeywordDictionary({"usage_gap": tuple(phrases)})
    text = " ".join(tokens)
    removed = data.draw(st.sampled_from(phrases))
    before = match_phrases(text, kd)
    after = match_phrases(text, kd.without("usage_gap", removed))
    rt = set(removed.split())
    for p in phrases:
        if p == removed:
            continue
        if not (set(p.split()) & rt):
            assert after.get(p, 0) == before.get(p, 0)
        elif f" {p} " in f" {removed} " and len(p) < len(removed):
            assert after.get(p, 0) >= before.get(p, 0)


def _corpus():
    """30 messages: personalized ones plan more and grow usage-gap phrasing by round."""
    msgs = []
    for r in range(1, 6):
        for j in range(3):
            gap = " ".join(["more than"] * r)
            msgs.append((f"p{r}{j}", r, "personalized", f"{gap} you can set a timer plan air"))
            msgs.append((f"c{r}{j}", r, "conventional", "more than your neighbors great job air"))
    return msgs


def test_fixture_corpus_drift_and_shares(d):
    profs = [count_keywords(t, d, mid, r, cls) for mid, r, cls, t in _corpus()]
    assert len(profs) == 30
    drift = round_drift([p for p in profs if p.arm_class == "personalized"]).set_index("category")
    assert list(drift.columns) == ["early", "middle", "final", "increasing"]
    assert drift.loc["usage_gap", "early"] == 1.5 and drift.loc["usage_gap", "final"] == 5.0
    assert bool(drift.loc["usage_gap", "increasing"])
    assert not bool(drift.loc["appliance_context", "increasing"])
    sh = group_shares(profs).set_index("arm_class")
    assert (sh["method"] == "dictionary_share_proxy").all()
    assert sh.loc["personalized", "planning_action"] > sh.loc["conventional", "planning_action"]
    assert np.allclose(sh[list(CATEGORIES)].sum(axis=1), 1.0)
    f = profiles_frame(profs)
    assert list(f.columns) == ["message_id", "round", "arm_class", *CATEGORIES]


def test_flat_drift_identical_messages(d):
    profs = [count_keywords("you can plan", d, str(r), r) for r in range(1, 6)]
    drift = round_drift(profs)
    assert (drift["early"] == drift["final"]).all() and not drift["increasing"].any()


def test_group_share_edge_cases(d):
    one = count_keywords("great job", d, "m", 1, "personalized")
    empty = count_keywords("nothing here", d, "n", 1, "conventional")
    sh = group_shares([one, empty])
    assert list(sh["arm_class"]) == ["personalized"]
    assert sh.iloc[0]["encouraging_efficacy"] == 1.0
    other = count_keywords("air", d, "o", 1, "conventional")
    sh = group_shares([one, other]).set_index("arm_class")
    assert float(sh.loc["personalized", list(CATEGORIES)] @ sh.loc["conventional", list(CATEGORIES)]) == 0.0
