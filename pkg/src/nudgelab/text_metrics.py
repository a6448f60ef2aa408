"""Dictionary-based content analysis of nudge messages.

Keyword counting is greedy longest-match-first: phrases are tried from the
longest down, and every matched span is consumed so shorter phrases cannot
reuse its tokens. Consumed spans act as barriers; tokens on either side of a
removed span do not become adjacent.

Category shares computed here are a dictionary-share proxy for topic
proportions, not a fitted topic model.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import pandas as pd

CATEGORIES = ("usage_gap", "appliance_context", "planning_action", "social_norms", "encouraging_efficacy")
STAGES = {"early": (1, 2), "middle": (3, 4), "final": (5,)}
SHARE_METHOD = "dictionary_share_proxy"

_STRIP = re.compile(r"[\d\W_]+", re.UNICODE)
_HEADER = re.compile(r"^\[([A-Za-z_]+)\]$")


class DictionaryError(ValueError):
    pass


def tokenize(text: str) -> list[str]:
    """Lowercase, drop punctuation and digits, split on whitespace."""
    return _STRIP.sub(" ", text.lower()).split()


def _normalize_chars(text: str) -> str:
    return _STRIP.sub("", text.lower())


@dataclass(frozen=True)
class KeywordDictionary:
    """Phrase lists per category."""

    phrases: dict[str, tuple[str, ...]]

    def __post_init__(self) -> None:
        for cat, items in self.phrases.items():
            if cat not in CATEGORIES:
                raise DictionaryError(f"unknown category {cat!r}")
            norm = [" ".join(tokenize(p)) for p in items]
            if any(not p for p in norm):
                raise DictionaryError(f"empty phrase in {cat}")
            if len(set(norm)) != len(norm):
                raise DictionaryError(f"duplicate phrase in {cat}")

    @property
    def categories(self) -> tuple[str, ...]:
        return tuple(c for c in CATEGORIES if c in self.phrases)

    def without(self, category: str, phrase: str) -> "KeywordDictionary":
        d = {c: tuple(p for p in ps if not (c == category and p == phrase)) for c, ps in self.phrases.items()}
        return KeywordDictionary(d)


def parse_dictionaries(text: str) -> KeywordDictionary:
    """Parse ``[category]`` headers followed by one phrase per line; ``#`` comments."""
    phrases: dict[str, list[str]] = {}
    current = None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        m = _HEADER.match(line)
        if m:
            current = m.group(1)
            if current in phrases:
                raise DictionaryError(f"line {lineno}: category {current!r} repeated")
            phrases[current] = []
            continue
        if current is None:
            raise DictionaryError(f"line {lineno}: phrase before any [category] header")
        phrases[current].append(line)
    return KeywordDictionary({c: tuple(p) for c, p in phrases.items()})


def load_dictionaries(path: str | Path | None = None) -> KeywordDictionary:
    path = path or Path(__file__).parent / "data" / "dictionaries.txt"
    return parse_dictionaries(Path(path).read_text(encoding="utf-8"))


def _phrase_index(d: KeywordDictionary, mode: str) -> list[tuple[tuple, str, list[str]]]:
    """(unit sequence, display phrase, categories) ordered longest first."""
    by_key: dict[tuple, tuple[str, list[str]]] = {}
    for cat in d.categories:
        for p in d.phrases[cat]:
            key = tuple(tokenize(p)) if mode == "token" else tuple(_normalize_chars(p))
            if not key:
                continue
            by_key.setdefault(key, (" ".join(tokenize(p)), []))[1].append(cat)
    items = [(k, disp, cats) for k, (disp, cats) in by_key.items()]
    items.sort(key=lambda t: (-len(t[0]), t[1]))
    return items


def match_phrases(text: str, d: KeywordDictionary, mode: str = "token") -> dict[str, int]:
    """Greedy longest-first occurrence counts per phrase.

    ``mode="token"`` matches whole tokens; ``mode="char"`` matches character
    spans on the raw text with punctuation, digits and whitespace removed,
    for scripts written without spaces.
    """
    if mode not in ("token", "char"):
        raise ValueError(f"unknown mode {mode!r}")
    units = tokenize(text) if mode == "token" else list(_normalize_chars(text))
    used = np.zeros(len(units), dtype=bool)
    counts: dict[str, int] = {}
    for key, disp, _ in _phrase_index(d, mode):
        k = len(key)
        i = 0
        while i + k <= len(units):
            if not used[i:i + k].any() and tuple(units[i:i + k]) == key:
                used[i:i + k] = True
                counts[disp] = counts.get(disp, 0) + 1
                i += k
            else:
                i += 1
    return counts


@dataclass
class ContentProfile:
    message_id: str
    counts: dict[str, int]
    round: int | None = None
    arm_class: str | None = None
    matched_units: int = 0
    n_units: int = 0

    @property
    def total(self) -> int:
        return sum(self.counts.values())

    @property
    def shares(self) -> dict[str, float] | None:
        t = self.total
        if t == 0:
            return None
        return {c: v / t for c, v in self.counts.items()}


def count_keywords(text: str, dictionaries: KeywordDictionary, message_id: str = "",
                   round_: int | None = None, arm_class: str | None = None,
                   mode: str = "token") -> ContentProfile:
    """Category counts for one message; a phrase listed under several
    categories counts toward each of them."""
    per_phrase = match_phrases(text, dictionaries, mode)
    cats_of = {disp: cats for _, disp, cats in _phrase_index(dictionaries, mode)}
    counts = {c: 0 for c in CATEGORIES}
    matched = 0
    for disp, n in per_phrase.items():
        for c in cats_of[disp]:
            counts[c] += n
        width = len(disp.split()) if mode == "token" else len(_normalize_chars(disp))
        matched += n * width
    n_units = len(tokenize(text)) if mode == "token" else len(_normalize_chars(text))
    return ContentProfile(message_id, counts, round_, arm_class, matched, n_units)


def round_drift(profiles: Sequence[ContentProfile]) -> pd.DataFrame:
    """Mean keyword counts per stage (early 1-2, middle 3-4, final 5).

    One row per category with the three stage means and ``increasing`` set
    when early < middle < final.
    """
    rows = []
    for cat in CATEGORIES:
        row: dict[str, object] = {"category": cat}
        for stage, rounds in STAGES.items():
            vals = [p.counts[cat] for p in profiles if p.round in rounds]
            row[stage] = float(np.mean(vals)) if vals else float("nan")
        row["increasing"] = bool(row["early"] < row["middle"] < row["final"])
        rows.append(row)
    return pd.DataFrame(rows)


def group_shares(profiles: Sequence[ContentProfile]) -> pd.DataFrame:
    """Mean per-message category shares by arm class.

    Messages with no matches carry no shares and are skipped; a class whose
    messages all lack matches is absent from the result.
    """
    classes = sorted({p.arm_class for p in profiles if p.arm_class is not None})
    rows = []
    for cls in classes:
        sh = [p.shares for p in profiles if p.arm_class == cls and p.shares is not None]
        if not sh:
            continue
        row: dict[str, object] = {"arm_class": cls, "n_messages": len(sh), "method": SHARE_METHOD}
        for c in CATEGORIES:
            row[c] = float(np.mean([s[c] for s in sh]))
        rows.append(row)
    return pd.DataFrame(rows, columns=["arm_class", "n_messages", "method", *CATEGORIES])


PROFILE_COLUMNS = ("message_id", "round", "arm_class", *CATEGORIES)


def profiles_frame(profiles: Iterable[ContentProfile]) -> pd.DataFrame:
    rows = [{"message_id": p.message_id, "round": p.round, "arm_class": p.arm_class, **p.counts}
            for p in profiles]
    return pd.DataFrame(rows, columns=list(PROFILE_COLUMNS))
