"""Participant profiles and their round-by-round evolution.

Profiles are immutable values. ``update_profile`` returns a new profile and
leaves its input untouched, so a sequence of rounds can be replayed exactly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable

PSYCH_CONSTRUCTS = (
    "self_efficacy",
    "outcome_expectations",
    "perceived_impediments",
    "attitude",
    "neighborhood_perception",
)
RESOURCES = ("electricity", "hot_water")
GENDERS = ("female", "male")
SNAPSHOT_VERSION = 1


class SequencingError(ValueError):
    """A round was applied out of order."""


class ProfileValidationError(ValueError):
    pass


# one (ISO date, value or None for a gap) pair per day
DaySeries = tuple[tuple[str, float | None], ...]


@dataclass(frozen=True)
class ParticipantProfile:
    participant_id: str
    psych_scores: dict[str, float]
    living_budget: float
    gender: str
    bill_experience: bool
    appliance_inventory: tuple[str, ...] = ()
    consumption_history: dict[str, DaySeries] = field(default_factory=dict)
    prior_suggestions: tuple[tuple[int, tuple[str, ...]], ...] = ()
    feedback_log: tuple[tuple[int, str], ...] = ()
    summary: str = ""
    round: int = 0
    # shower flow (L/min), showers per week, appliance power (kW) and daily hours
    usage_params: dict[str, float] = field(default_factory=dict)

    def __post_init__(self) -> None:
        validate_profile(self)

    @property
    def last_delivered(self) -> tuple[str, ...]:
        return self.prior_suggestions[-1][1] if self.prior_suggestions else ()

    def series(self, resource: str) -> DaySeries:
        return self.consumption_history.get(resource, ())

    def to_dict(self) -> dict:
        return {
            "participant_id": self.participant_id,
            "psych_scores": dict(self.psych_scores),
            "living_budget": self.living_budget,
            "gender": self.gender,
            "bill_experience": self.bill_experience,
            "appliance_inventory": list(self.appliance_inventory),
            "consumption_history": {
                r: [[d, v] for d, v in s] for r, s in self.consumption_history.items()
            },
            "prior_suggestions": [[r, list(ids)] for r, ids in self.prior_suggestions],
            "feedback_log": [[r, t] for r, t in self.feedback_log],
            "summary": self.summary,
            "round": self.round,
            "usage_params": dict(self.usage_params),
        }

    @classmethod
    def from_dict(cls, d: dict) -> ParticipantProfile:
        return cls(
            participant_id=d["participant_id"],
            psych_scores={k: float(v) for k, v in d["psych_scores"].items()},
            living_budget=float(d["living_budget"]),
            gender=d["gender"],
            bill_experience=bool(d["bill_experience"]),
            appliance_inventory=tuple(d.get("appliance_inventory", ())),
            consumption_history={
                r: tuple((day, None if v is None else float(v)) for day, v in s)
                for r, s in d.get("consumption_history", {}).items()
            },
            prior_suggestions=tuple((int(r), tuple(ids)) for r, ids in d.get("prior_suggestions", ())),
            feedback_log=tuple((int(r), t) for r, t in d.get("feedback_log", ())),
            summary=d.get("summary", ""),
            round=int(d.get("round", 0)),
            usage_params={k: float(v) for k, v in d.get("usage_params", {}).items()},
        )


def validate_profile(p: ParticipantProfile) -> None:
    missing = [c for c in PSYCH_CONSTRUCTS if c not in p.psych_scores]
    if missing:
        raise ProfileValidationError(f"{p.participant_id}: missing psych scores {missing}")
    for c, v in p.psych_scores.items():
        if not 1.0 <= v <= 5.0:
            raise ProfileValidationError(f"{p.participant_id}: {c}={v} outside [1, 5]")
    if p.living_budget < 0:
        raise ProfileValidationError(f"{p.participant_id}: negative living budget")
    if p.gender not in GENDERS:
        raise ProfileValidationError(f"{p.participant_id}: unknown gender {p.gender!r}")
    for r, s in p.consumption_history.items():
        prev = None
        for day, v in s:
            if v is not None and v < 0:
                raise ProfileValidationError(f"{p.participant_id}: negative {r} value on {day}")
            if prev is not None and not day > prev:
                raise ProfileValidationError(f"{p.participant_id}: {r} dates not increasing at {day}")
            prev = day
    rounds = [r for r, _ in p.prior_suggestions]
    if any(b <= a for a, b in zip(rounds, rounds[1:])):
        raise ProfileValidationError(f"{p.participant_id}: prior suggestion rounds not increasing")


def mean_psych(profile: ParticipantProfile) -> float:
    return sum(profile.psych_scores[c] for c in PSYCH_CONSTRUCTS) / len(PSYCH_CONSTRUCTS)


@dataclass(frozen=True)
class RoundData:
    round: int
    consumption: dict[str, DaySeries] = field(default_factory=dict)
    feedback: tuple[str, ...] = ()
    delivered: tuple[str, ...] = ()


def update_profile(profile: ParticipantProfile, round_data: RoundData,
                   new_summary: str) -> ParticipantProfile:
    """Fold one round of data into a profile and return the new profile.

    Raises:
        SequencingError: ``round_data.round`` is not the next round.
        ProfileValidationError: a new consumption value is negative.
    """
    if round_data.round != profile.round + 1:
        raise SequencingError(
            f"{profile.participant_id}: expected round {profile.round + 1}, got {round_data.round}"
        )
    history = dict(profile.consumption_history)
    for resource, days in round_data.consumption.items():
        for day, v in days:
            if v is not None and v < 0:
                raise ProfileValidationError(
                    f"{profile.participant_id}: negative {resource} value on {day}"
                )
        history[resource] = tuple(history.get(resource, ())) + tuple(days)
    return replace(
        profile,
        consumption_history=history,
        prior_suggestions=profile.prior_suggestions + ((round_data.round, tuple(round_data.delivered)),),
        feedback_log=profile.feedback_log + tuple((round_data.round, t) for t in round_data.feedback),
        summary=new_summary,
        round=round_data.round,
    )


def write_snapshots(path: str | Path, profiles: Iterable[ParticipantProfile]) -> None:
    """One JSON object per line: {version, round, profile}."""
    with open(path, "w", encoding="utf-8") as fh:
        for p in profiles:
            fh.write(json.dumps({"version": SNAPSHOT_VERSION, "round": p.round,
                                 "profile": p.to_dict()}, sort_keys=True))
            fh.write("\n")


def read_snapshots(path: str | Path) -> list[ParticipantProfile]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            rec = json.loads(line)
            if rec.get("version") != SNAPSHOT_VERSION:
                raise ValueError(f"{path}:{lineno}: unsupported snapshot version {rec.get('version')}")
            out.append(ParticipantProfile.from_dict(rec["profile"]))
    return out
