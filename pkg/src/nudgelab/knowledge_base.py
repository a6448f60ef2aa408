"""Structured conservation-suggestion library with lexical retrieval.

Records are stored one JSON object per line. Retrieval scores are integer
token overlaps: appliance matches weigh 3, behavior-type matches 2, and
body-text matches 1. Ties are broken by ascending record id.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

STRATEGIES = (
    "frequency_reduction",
    "duration_control",
    "temperature_adjustment",
    "behavior_mode_change",
    "monitoring_feedback",
)
RESOURCES = ("electricity", "hot_water")
FIELDS = ("id", "behavior_type", "appliance", "strategy", "resource", "text")

W_APPLIANCE, W_BEHAVIOR, W_BODY = 3, 2, 1

_TOKEN = re.compile(r"[a-z]+")


class LibraryParseError(ValueError):
    def __init__(self, path, lineno: int, reason: str):
        self.lineno = lineno
        super().__init__(f"{path}:{lineno}: {reason}")


class DuplicateIdError(ValueError):
    pass


def tokens(text: str) -> set[str]:
    return set(_TOKEN.findall(text.lower()))


@dataclass(frozen=True)
class SuggestionRecord:
    id: str
    behavior_type: str
    appliance: str
    strategy: str
    resource: str
    text: str

    def __post_init__(self) -> None:
        if not self.id:
            raise ValueError("record id must be non-empty")
        if self.strategy not in STRATEGIES:
            raise ValueError(f"{self.id}: unknown strategy {self.strategy!r}")
        if self.resource not in RESOURCES:
            raise ValueError(f"{self.id}: unknown resource {self.resource!r}")
        if not self.text.strip():
            raise ValueError(f"{self.id}: empty suggestion text")

    def to_dict(self) -> dict[str, str]:
        return {k: getattr(self, k) for k in FIELDS}


@dataclass(frozen=True)
class ProfileQuery:
    appliances: tuple[str, ...] = ()
    behavior_tags: tuple[str, ...] = ()
    keywords: tuple[str, ...] = ()

    def appliance_tokens(self) -> set[str]:
        return set().union(*(tokens(a) for a in self.appliances)) if self.appliances else set()

    def behavior_tokens(self) -> set[str]:
        return set().union(*(tokens(b) for b in self.behavior_tags)) if self.behavior_tags else set()

    def all_tokens(self) -> set[str]:
        kw = set().union(*(tokens(k) for k in self.keywords)) if self.keywords else set()
        return self.appliance_tokens() | self.behavior_tokens() | kw


def score(record: SuggestionRecord, query: ProfileQuery) -> int:
    q_all = query.all_tokens()
    return (
        W_APPLIANCE * len(tokens(record.appliance) & query.appliance_tokens())
        + W_BEHAVIOR * len(tokens(record.behavior_type) & query.behavior_tokens())
        + W_BODY * len(tokens(record.text) & q_all)
    )


@dataclass(frozen=True)
class Library:
    records: tuple[SuggestionRecord, ...]
    _by_id: dict = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self) -> None:
        seen: dict[str, SuggestionRecord] = {}
        for r in self.records:
            if r.id in seen:
                raise DuplicateIdError(f"duplicate record id {r.id!r}")
            seen[r.id] = r
        object.__setattr__(self, "_by_id", seen)

    def __len__(self) -> int:
        return len(self.records)

    def get(self, record_id: str) -> SuggestionRecord:
        return self._by_id[record_id]

    def __contains__(self, record_id: str) -> bool:
        return record_id in self._by_id


def parse_record(obj: object) -> SuggestionRecord:
    if not isinstance(obj, dict):
        raise ValueError("record is not a key-value object")
    missing = [k for k in FIELDS if k not in obj]
    if missing:
        raise ValueError(f"missing keys {missing}")
    return SuggestionRecord(**{k: str(obj[k]) for k in FIELDS})


def load_library(path: str | Path) -> Library:
    """Load a line-delimited JSON suggestion file.

    Raises:
        LibraryParseError: a line is not a well-formed record (carries the
            line number).
        DuplicateIdError: two records share an id.
    """
    records = []
    seen = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = parse_record(json.loads(line))
            except (json.JSONDecodeError, ValueError, TypeError) as exc:
                raise LibraryParseError(path, lineno, str(exc)) from None
            if rec.id in seen:
                raise DuplicateIdError(f"{path}:{lineno}: duplicate record id {rec.id!r}")
            seen.add(rec.id)
            records.append(rec)
    return Library(tuple(records))


def write_library(path: str | Path, records: Iterable[SuggestionRecord]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r.to_dict(), ensure_ascii=False) + "\n")


def default_library() -> Library:
    """The small English library shipped with the package."""
    return load_library(Path(__file__).parent / "data" / "suggestions.jsonl")


def retrieve_top_k(library: Library, query: ProfileQuery, resource: str, k: int) -> list[SuggestionRecord]:
    if k < 0:
        raise ValueError("k must be >= 0")
    if k == 0:
        return []
    scored = [(-score(r, query), r.id, r) for r in library.records if r.resource == resource]
    scored.sort(key=lambda t: (t[0], t[1]))
    return [r for _, _, r in scored[:k]]
