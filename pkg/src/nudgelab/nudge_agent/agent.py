"""Three-stage nudge generation: usage feedback, profile reasoning and
suggestion selection, and quantitative scenarios with everyday analogies."""

from __future__ import annotations

import csv
import datetime as dt
import hashlib
import json
import math
import re
from dataclasses import dataclass, field, replace
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path
from typing import Any, Callable, Iterable, Sequence

from ..knowledge_base import Library, ProfileQuery, SuggestionRecord, retrieve_top_k, tokens
from ..profile_store import RESOURCES, ParticipantProfile
from .backend import BackendError, GenerationBackend, generated_id

ARMS = ("C", "T1", "T2")
PER_RESOURCE = 2
WEEKS_PER_MONTH = 52 / 12
DAYS_PER_MONTH = 30.0
APPROX_MARKER = "approximately"

# nominal power (kW) and daily hours of use, for appliance shares and savings
APPLIANCE_USE = {
    "air conditioner": (1.0, 4.0),
    "laptop": (0.05, 6.0),
    "desk lamp": (0.01, 5.0),
    "electric kettle": (1.5, 0.2),
    "hair dryer": (1.2, 0.15),
    "phone charger": (0.01, 3.0),
    "fan": (0.05, 6.0),
    "mini fridge": (0.06, 24.0),
}
BEHAVIOR_TAGS = {
    "air conditioner": "cooling", "fan": "cooling", "laptop": "computing", "desk lamp": "lighting",
    "electric kettle": "water heating", "hair dryer": "personal care", "phone charger": "charging",
    "mini fridge": "refrigeration",
}


class InsufficientDataError(ValueError):
    pass


class PoolUnderfullError(RuntimeError):
    pass


class AssemblyError(ValueError):
    pass


class ScreeningExhaustedError(RuntimeError):
    pass


@dataclass(frozen=True)
class UsageFeedback:
    resource: str
    total_since_last: float
    n_days: int
    daily_mean: float
    trend: str
    percent_change: float
    peer_ratio: float
    appliance_breakdown: tuple[tuple[str, float], ...] = ()

    def __post_init__(self) -> None:
        if not self.peer_ratio > 0:
            raise ValueError("peer_ratio must be positive")
        if self.appliance_breakdown:
            s = sum(v for _, v in self.appliance_breakdown)
            if abs(s - 1.0) > 1e-9:
                raise ValueError(f"appliance shares sum to {s}, not 1")

    def to_dict(self) -> dict[str, Any]:
        d = dict(vars(self))
        d["appliance_breakdown"] = [list(x) for x in self.appliance_breakdown]
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> UsageFeedback:
        d = dict(d)
        d["appliance_breakdown"] = tuple((a, float(s)) for a, s in d.get("appliance_breakdown", ()))
        return cls(**d)


def _window_values(profile: ParticipantProfile, resource: str, start: str, end: str) -> list[float]:
    return [v for day, v in profile.series(resource) if start <= day <= end and v is not None]


def appliance_breakdown(profile: ParticipantProfile, resource: str) -> tuple[tuple[str, float], ...]:
    if resource == "hot_water":
        return (("shower", 1.0),)
    use = {a: APPLIANCE_USE[a][0] * APPLIANCE_USE[a][1]
           for a in profile.appliance_inventory if a in APPLIANCE_USE}
    total = sum(use.values())
    if total <= 0:
        return ()
    items = sorted(use.items(), key=lambda kv: (-kv[1], kv[0]))
    shares = [(a, v / total) for a, v in items]
    # push the rounding residue onto the largest share so the sum is exact
    resid = 1.0 - sum(s for _, s in shares)
    shares[0] = (shares[0][0], shares[0][1] + resid)
    return tuple(shares)


def stage1_usage_feedback(profile: ParticipantProfile, peer_group: Sequence[ParticipantProfile],
                          window: tuple[str, str]) -> dict[str, UsageFeedback]:
    """Levels, half-window trend and peer comparison for both resources.

    ``window`` is an inclusive (start, end) pair of ISO dates. Gaps are
    skipped; the trend compares the mean of the first and second halves of
    the observed days (the middle day is dropped for odd counts).
    """
    if not peer_group:
        raise InsufficientDataError("peer group is empty")
    start, end = window
    out = {}
    for res in RESOURCES:
        vals = _window_values(profile, res, start, end)
        if not vals:
            raise InsufficientDataError(
                f"{profile.participant_id}: no {res} observations in {start}..{end}")
        mean = sum(vals) / len(vals)
        half = len(vals) // 2
        if half == 0:
            first = second = mean
        else:
            first = sum(vals[:half]) / half
            second = sum(vals[-half:]) / half
        diff = second - first
        scale = max(abs(first), abs(second), 1e-12)
        if abs(diff) <= 1e-12 * scale:
            trend, pct = "flat", 0.0
        else:
            trend = "up" if diff > 0 else "down"
            pct = 100.0 * diff / first if first != 0 else math.copysign(100.0, diff)
        peer_vals = [v for p in peer_group for v in _window_values(p, res, start, end)]
        peer_mean = sum(peer_vals) / len(peer_vals) if peer_vals else mean
        if not peer_mean > 0 or not mean > 0:
            ratio = 1.0
        else:
            ratio = mean / peer_mean
        out[res] = UsageFeedback(
            resource=res, total_since_last=float(sum(vals)), n_days=len(vals), daily_mean=mean,
            trend=trend, percent_change=pct, peer_ratio=ratio,
            appliance_breakdown=appliance_breakdown(profile, res),
        )
    return out


def profile_query(profile: ParticipantProfile, resource: str) -> ProfileQuery:
    if resource == "hot_water":
        appliances = ("shower",)
        tags = ("showering",)
    else:
        appliances = tuple(profile.appliance_inventory)
        tags = tuple(sorted({BEHAVIOR_TAGS[a] for a in appliances if a in BEHAVIOR_TAGS}))
    kw = tuple(sorted(tokens(profile.summary))) if profile.summary else ()
    return ProfileQuery(appliances=appliances, behavior_tags=tags, keywords=kw)


@dataclass(frozen=True)
class Candidate:
    record: SuggestionRecord
    source: str  # "library" or "generated"

    @property
    def id(self) -> str:
        return self.record.id


@dataclass
class Stage2Result:
    selected: dict[str, list[Candidate]]
    pools: dict[str, list[Candidate]]  # ranked best first
    new_summary: str


SUMMARY_KEYS = ("habits", "likely_adoption", "largest_savings", "past_effectiveness")


def derive_seed(base: int, *parts: Any) -> int:
    """Stable 63-bit seed from a base seed and identifying parts."""
    h = hashlib.sha256(("|".join([str(base), *map(str, parts)])).encode()).digest()
    return int.from_bytes(h[:8], "big") >> 1


def stage2_select(profile: ParticipantProfile, library: Library, backend: GenerationBackend,
                  feedback: dict[str, UsageFeedback], seed: int = 0) -> Stage2Result:
    """Update the profile summary, build a 2 + 2 candidate pool per resource,
    rank it with the backend and keep the top two not delivered last round.

    Raises:
        PoolUnderfullError: fewer than four candidates for a resource, or
            fewer than two left once last round's suggestions are removed.
        BackendError: propagated from the backend with its retry metadata.
    """
    usage = {r: {"trend": u.trend, "percent_change": u.percent_change, "peer_ratio": u.peer_ratio}
             for r, u in feedback.items()}
    elec = feedback.get("electricity")
    breakdown = [list(x) for x in elec.appliance_breakdown] if elec else []
    summary_fields = {
        "task": "profile_summary",
        "participant_id": profile.participant_id,
        "psych_scores": dict(sorted(profile.psych_scores.items())),
        "living_budget": profile.living_budget,
        "usage": usage,
        "breakdown": breakdown,
        "previous_summary": profile.summary,
        "previous_suggestions": [list(ids) for _, ids in profile.prior_suggestions],
        "feedback": [t for _, t in profile.feedback_log],
    }
    answers = backend.generate(summary_fields, derive_seed(seed, "summary"))
    missing = [k for k in SUMMARY_KEYS if k not in answers]
    if missing:
        raise BackendError(f"profile summary lacks fields {missing}")
    new_summary = "\n".join(f"{k}: {answers[k]}" for k in SUMMARY_KEYS)

    last = set(profile.last_delivered)
    selected, pools = {}, {}
    for res in RESOURCES:
        retrieved = [Candidate(r, "library") for r in retrieve_top_k(library, profile_query(profile, res), res, PER_RESOURCE)]
        gen = backend.generate({
            "task": "generate_suggestions", "resource": res, "n": PER_RESOURCE,
            "appliances": sorted(profile.appliance_inventory),
            "summary": new_summary,
            "exclude_texts": [c.record.text for c in retrieved],
        }, derive_seed(seed, "generate", res))
        generated = []
        for s in gen.get("suggestions", [])[:PER_RESOURCE]:
            rec = SuggestionRecord(id=generated_id(res, s["text"]), behavior_type=s["behavior_type"],
                                   appliance=s["appliance"], strategy=s["strategy"], resource=res,
                                   text=s["text"])
            generated.append(Candidate(rec, "generated"))
        pool = retrieved + generated
        if len({c.id for c in pool}) < 2 * PER_RESOURCE:
            raise PoolUnderfullError(
                f"{profile.participant_id}/{res}: pool has {len({c.id for c in pool})} distinct candidates, "
                f"need {2 * PER_RESOURCE}")
        shares = [list(x) for x in feedback[res].appliance_breakdown]
        ranking = backend.generate({
            "task": "rank_candidates", "resource": res, "breakdown": shares,
            "candidates": [{"id": c.id, "appliance": c.record.appliance, "strategy": c.record.strategy,
                            "text": c.record.text} for c in pool],
        }, derive_seed(seed, "rank", res))["ranking"]
        by_id = {c.id: c for c in pool}
        ranked = [by_id[i] for i in ranking if i in by_id]
        ranked += [c for c in pool if c.id not in set(ranking)]
        eligible = [c for c in ranked if c.id not in last]
        if len(eligible) < PER_RESOURCE:
            raise PoolUnderfullError(f"{profile.participant_id}/{res}: too few candidates after repeat rule")
        pools[res] = ranked
        selected[res] = eligible[:PER_RESOURCE]
    return Stage2Result(selected=selected, pools=pools, new_summary=new_summary)


def round_sig(x: float, digits: int = 2) -> float:
    """Round half away from zero to ``digits`` significant figures."""
    if x == 0 or not math.isfinite(x):
        return x
    exp = math.floor(math.log10(abs(x)))
    q = Decimal(1).scaleb(exp - digits + 1)
    return float(Decimal(repr(x)).quantize(q, rounding=ROUND_HALF_UP))


def _fmt(x: float) -> str:
    return f"{x:,.0f}" if abs(x) >= 10 else f"{x:g}"


@dataclass(frozen=True)
class AnalogyRow:
    resource: str
    min_qty: float
    max_qty: float
    unit_qty: float
    template: str


def load_analogy_table(path: str | Path | None = None) -> list[AnalogyRow]:
    path = path or Path(__file__).resolve().parent.parent / "data" / "analogies.csv"
    with open(path, encoding="utf-8") as fh:
        return [AnalogyRow(r["resource"], float(r["min_qty"]), float(r["max_qty"]),
                           float(r["unit_qty"]), r["template"]) for r in csv.DictReader(fh)]


def choose_analogy(qty: float, resource: str, table: Sequence[AnalogyRow]) -> str:
    if qty == 0:
        return "no change"
    rows = [r for r in table if r.resource == resource]
    if not rows:
        return ""
    inside = [r for r in rows if r.min_qty <= qty < r.max_qty]
    row = inside[0] if inside else min(
        rows, key=lambda r: min(abs(qty - r.min_qty), abs(qty - r.max_qty)))
    n = round_sig(qty / row.unit_qty, 2)
    return row.template.format(n=_fmt(n))


@dataclass(frozen=True)
class QuantScenario:
    suggestion_id: str
    suggestion_text: str
    behavior_delta: str
    estimated_saving: float | None
    unit: str
    analogy: str
    approximate_flag: bool = True

    @property
    def prose(self) -> str:
        if self.estimated_saving is None:
            return f"If you {self.behavior_delta}, you would likely use {APPROX_MARKER} a little less each month."
        text = (f"If you {self.behavior_delta}, you could save {APPROX_MARKER} "
                f"{_fmt(self.estimated_saving)} {self.unit} per month")
        return text + (f", {self.analogy}." if self.analogy and self.analogy != "no change" else ".")

    def to_dict(self) -> dict[str, Any]:
        return dict(vars(self))


@dataclass(frozen=True)
class ScenarioSpec:
    delta: float
    per_event: float
    events_per_month: float
    unit: str
    phrase: str


def scenario_spec(rec: SuggestionRecord, profile: ParticipantProfile,
                  delta: float | None = None) -> ScenarioSpec | None:
    """Numbers behind a suggestion, or None when it has no parameterizable delta."""
    up = profile.usage_params
    if rec.resource == "hot_water" and rec.appliance == "shower":
        flow = up.get("shower_flow_lpm", 9.0)
        per_week = up.get("showers_per_week", 5.0)
        if rec.strategy == "duration_control":
            d = 0.5 if delta is None else delta
            return ScenarioSpec(d, flow, per_week * WEEKS_PER_MONTH, "L",
                                f"shorten each shower by {d * 60:g} seconds")
        if rec.strategy == "frequency_reduction":
            d = 1.0 if delta is None else delta
            minutes = up.get("shower_minutes", 10.0)
            return ScenarioSpec(d, flow * minutes, WEEKS_PER_MONTH, "L",
                                f"take {d:g} fewer shower(s) a week")
        return None
    if rec.resource == "electricity" and rec.appliance in APPLIANCE_USE:
        power, hours = APPLIANCE_USE[rec.appliance]
        if rec.strategy == "duration_control":
            d = 0.5 if delta is None else delta
            return ScenarioSpec(d, power, DAYS_PER_MONTH, "kWh",
                                f"use the {rec.appliance} {d * 60:g} minutes less each day")
        if rec.strategy == "frequency_reduction":
            d = 2.0 if delta is None else delta
            return ScenarioSpec(d, power * min(hours, 0.25), WEEKS_PER_MONTH, "kWh",
                                f"use the {rec.appliance} {d:g} fewer times a week")
        if rec.strategy == "temperature_adjustment":
            d = 2.0 if delta is None else delta
            # roughly 6 % of the appliance's daily use per degree
            return ScenarioSpec(d, 0.06 * power * hours, DAYS_PER_MONTH, "kWh",
                                f"move the {rec.appliance} setting {d:g} degrees toward the outdoor temperature")
    return None


def stage3_quantify(suggestion: SuggestionRecord | Candidate, profile: ParticipantProfile,
                    analogy_table: Sequence[AnalogyRow], delta: float | None = None) -> QuantScenario:
    """Monthly saving = delta x per-event quantity x events per month, kept to
    two significant figures, plus an everyday equivalent from the table.

    Suggestions without a numeric lever get a qualitative scenario with no
    estimate and no analogy.
    """
    rec = suggestion.record if isinstance(suggestion, Candidate) else suggestion
    spec = scenario_spec(rec, profile, delta)
    if spec is None:
        return QuantScenario(rec.id, rec.text, rec.text[0].lower() + rec.text[1:].rstrip("."),
                             None, "", "", True)
    raw = spec.delta * spec.per_event * spec.events_per_month
    # trim float noise (e.g. 324.99999999999994) before rounding half up
    saving = round_sig(max(float(f"{raw:.12g}"), 0.0), 2)
    analogy = choose_analogy(saving, rec.resource, analogy_table)
    return QuantScenario(rec.id, rec.text, spec.phrase, saving, spec.unit, analogy, True)


@dataclass
class NudgeBundle:
    participant_id: str
    round: int
    arm: str
    format: str
    feedback: dict[str, UsageFeedback]
    suggestions: dict[str, list[SuggestionRecord]] = field(default_factory=dict)
    scenarios: dict[str, list[QuantScenario]] = field(default_factory=dict)
    new_summary: str = ""
    candidate_pool: dict[str, list[str]] = field(default_factory=dict)
    flags: list[dict[str, str]] = field(default_factory=list)

    def suggestion_ids(self) -> list[str]:
        return [s.id for res in RESOURCES for s in self.suggestions.get(res, [])]

    def to_dict(self) -> dict[str, Any]:
        return {
            "participant_id": self.participant_id,
            "round": self.round,
            "arm": self.arm,
            "format": self.format,
            "feedback": {r: f.to_dict() for r, f in sorted(self.feedback.items())},
            "suggestions": {r: [s.to_dict() for s in v] for r, v in sorted(self.suggestions.items())},
            "scenarios": {r: [s.to_dict() for s in v] for r, v in sorted(self.scenarios.items())},
            "new_summary": self.new_summary,
            "candidate_pool": {r: list(v) for r, v in sorted(self.candidate_pool.items())},
            "flags": list(self.flags),
            "message": render_message(self),
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> NudgeBundle:
        return cls(
            participant_id=d["participant_id"], round=int(d["round"]), arm=d["arm"], format=d["format"],
            feedback={r: UsageFeedback.from_dict(f) for r, f in d["feedback"].items()},
            suggestions={r: [SuggestionRecord(**s) for s in v] for r, v in d.get("suggestions", {}).items()},
            scenarios={r: [QuantScenario(**s) for s in v] for r, v in d.get("scenarios", {}).items()},
            new_summary=d.get("new_summary", ""),
            candidate_pool={r: list(v) for r, v in d.get("candidate_pool", {}).items()},
            flags=list(d.get("flags", [])),
        )


def check_bundle(b: NudgeBundle) -> None:
    if b.arm not in ARMS:
        raise AssemblyError(f"unknown arm {b.arm!r}")
    want = "text_link" if b.arm == "C" else "image_report"
    if b.format != want:
        raise AssemblyError(f"arm {b.arm} requires format {want}, got {b.format}")
    n_sugg = sum(len(v) for v in b.suggestions.values())
    n_scen = sum(len(v) for v in b.scenarios.values())
    if b.arm in ("C", "T1"):
        if n_sugg or n_scen:
            raise AssemblyError(f"arm {b.arm} must not carry suggestions or scenarios")
        return
    for res in RESOURCES:
        sugg = b.suggestions.get(res, [])
        scen = b.scenarios.get(res, [])
        if len(sugg) != PER_RESOURCE:
            raise AssemblyError(f"T2 bundle needs {PER_RESOURCE} {res} suggestions, has {len(sugg)}")
        if [s.suggestion_id for s in scen] != [s.id for s in sugg]:
            raise AssemblyError(f"T2 bundle needs exactly one scenario per {res} suggestion")


def assemble_bundle(arm: str, participant_id: str, round_: int, feedback: dict[str, UsageFeedback],
                    stage2: Stage2Result | None = None,
                    scenarios: dict[str, list[QuantScenario]] | None = None) -> NudgeBundle:
    """Combine stage outputs for one arm; C and T1 carry usage feedback only.

    Raises:
        AssemblyError: content does not match what the arm allows.
    """
    if arm not in ARMS:
        raise AssemblyError(f"unknown arm {arm!r}")
    b = NudgeBundle(
        participant_id=participant_id, round=round_, arm=arm,
        format="text_link" if arm == "C" else "image_report",
        feedback=dict(feedback),
    )
    if stage2 is not None:
        b.suggestions = {r: [c.record for c in v] for r, v in stage2.selected.items()}
        b.candidate_pool = {r: [c.id for c in v] for r, v in stage2.pools.items()}
        b.new_summary = stage2.new_summary
    if scenarios is not None:
        b.scenarios = {r: list(v) for r, v in scenarios.items()}
    if arm == "T2" and stage2 is None:
        raise AssemblyError("arm T2 requires stage 2 output")
    check_bundle(b)
    return b


@dataclass(frozen=True)
class RiskPattern:
    name: str
    pattern: re.Pattern
    check: Callable[[re.Match], bool] | None = None

    def matches(self, text: str) -> bool:
        for m in self.pattern.finditer(text.lower()):
            if self.check is None or self.check(m):
                return True
        return False


def _extreme_setpoint(m: re.Match) -> bool:
    t = float(m.group("t"))
    return t < 16 or t > 30


DENY_LIST: tuple[RiskPattern, ...] = (
    RiskPattern("hygiene_skip_shower", re.compile(
        r"\b(skip|stop|avoid|give up)\w*\s+(\w+\s+){0,2}(shower|showering|bath|washing)")),
    RiskPattern("hygiene_no_shower", re.compile(r"\bno (more )?showers?\b|\bshower (only )?once (a|per|every) (week|fortnight|month)")),
    RiskPattern("hygiene_cold_only", re.compile(r"\bonly (take )?cold showers?\b|\bcold water only\b")),
    RiskPattern("appliance_tampering", re.compile(
        r"\b(tamper|bypass|rewire|disable|disconnect|open up|modify)\w*\s+(\w+\s+){0,2}(meter|breaker|wiring|thermostat|heater|fuse)")),
    RiskPattern("extreme_temperature", re.compile(r"(?P<t>\d+(\.\d+)?)\s*(°|degrees?\s*)c\b"), _extreme_setpoint),
    RiskPattern("extreme_temperature", re.compile(r"\b(unplug|turn off|switch off)\s+(the\s+)?(fridge|refrigerator|heating)\b.*\b(days?|week)")),
)


def risk_flags(text: str, deny_list: Sequence[RiskPattern] = DENY_LIST) -> list[str]:
    return [p.name for p in deny_list if p.matches(text)]


def safety_screen(bundle: NudgeBundle, pools: dict[str, list[Candidate]],
                  quantify: Callable[[Candidate], QuantScenario],
                  previous: Iterable[str] = (),
                  deny_list: Sequence[RiskPattern] = DENY_LIST) -> tuple[NudgeBundle, list[dict[str, str]]]:
    """Withhold flagged suggestions and backfill from the ranked pool.

    Surviving suggestions and their scenarios are passed through untouched.
    Replacements come from the next-ranked pool candidates that are neither
    selected already, delivered last round, nor flagged themselves.

    Raises:
        ScreeningExhaustedError: no clean candidate left to fill a slot.
    """
    if bundle.arm != "T2":
        return bundle, []
    previous = set(previous)
    flags: list[dict[str, str]] = []
    new_sugg, new_scen = {}, {}
    for res in RESOURCES:
        chosen = list(bundle.suggestions.get(res, []))
        scen = list(bundle.scenarios.get(res, []))
        flagged_ids = set()
        for c in pools.get(res, []):
            names = risk_flags(c.record.text, deny_list)
            if names:
                flagged_ids.add(c.id)
                if any(s.id == c.id for s in chosen):
                    flags.append({"suggestion_id": c.id, "resource": res, "rule": names[0]})
        for s in chosen:
            if s.id not in flagged_ids and risk_flags(s.text, deny_list):
                flagged_ids.add(s.id)
                flags.append({"suggestion_id": s.id, "resource": res,
                              "rule": risk_flags(s.text, deny_list)[0]})
        keep = [(s, sc) for s, sc in zip(chosen, scen) if s.id not in flagged_ids]
        used = {s.id for s in chosen}
        for c in pools.get(res, []):
            if len(keep) >= len(chosen):
                break
            if c.id in used or c.id in previous or c.id in flagged_ids:
                continue
            keep.append((c.record, quantify(c)))
            used.add(c.id)
        if len(keep) < len(chosen):
            raise ScreeningExhaustedError(
                f"{bundle.participant_id}/{res}: every remaining candidate was flagged")
        new_sugg[res] = [s for s, _ in keep]
        new_scen[res] = [sc for _, sc in keep]
    if not flags:
        return bundle, []
    screened = replace(bundle, suggestions=new_sugg, scenarios=new_scen,
                       flags=list(bundle.flags) + flags)
    check_bundle(screened)
    return screened, flags


_RES_LABEL = {"electricity": ("electricity", "kWh"), "hot_water": ("hot water", "L")}


def render_feedback(f: UsageFeedback) -> str:
    label, unit = _RES_LABEL[f.resource]
    trend = {"up": "an increase", "down": "a decrease", "flat": "no change"}[f.trend]
    cmp = "more than" if f.peer_ratio > 1 else "less than" if f.peer_ratio < 1 else "the same as"
    text = (f"Since your last report you used {f.total_since_last:.1f} {unit} of {label} "
            f"over {f.n_days} days, {trend} of {abs(f.percent_change):.0f}% within the week. "
            f"Your daily use was {abs(f.peer_ratio - 1) * 100:.0f}% {cmp} similar participants.")
    if f.resource == "electricity" and f.appliance_breakdown:
        top = ", ".join(f"{a} {s:.0%}" for a, s in f.appliance_breakdown[:3])
        text += f" Estimated appliance shares: {top}."
    return text


def render_message(b: NudgeBundle) -> str:
    parts = [render_feedback(b.feedback[r]) for r in RESOURCES if r in b.feedback]
    for res in RESOURCES:
        for s, sc in zip(b.suggestions.get(res, []), b.scenarios.get(res, [])):
            parts.append(f"{s.text} {sc.prose}")
    return "\n".join(parts)


def write_bundles(path: str | Path, bundles: Iterable[NudgeBundle]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for b in bundles:
            fh.write(json.dumps(b.to_dict(), sort_keys=True, ensure_ascii=False) + "\n")


def read_bundles(path: str | Path) -> list[NudgeBundle]:
    with open(path, encoding="utf-8") as fh:
        return [NudgeBundle.from_dict(json.loads(line)) for line in fh if line.strip()]


def feedback_window(start_date: str, baseline_days: int, days_per_round: int, round_: int) -> tuple[str, str]:
    """Days since the previous nudge: the last baseline week for round 1,
    otherwise the previous intervention week."""
    d0 = dt.date.fromisoformat(start_date)
    first = baseline_days - days_per_round if round_ == 1 else baseline_days + (round_ - 2) * days_per_round
    a = d0 + dt.timedelta(days=first)
    b = a + dt.timedelta(days=days_per_round - 1)
    return a.isoformat(), b.isoformat()


def generate_bundle(profile: ParticipantProfile, arm: str, round_: int,
                    peer_group: Sequence[ParticipantProfile], window: tuple[str, str],
                    library: Library, backend: GenerationBackend,
                    analogy_table: Sequence[AnalogyRow], seed: int) -> NudgeBundle:
    """Full pipeline for one participant and round, safety screen included."""
    fb = stage1_usage_feedback(profile, peer_group, window)
    if arm != "T2":
        return assemble_bundle(arm, profile.participant_id, round_, fb)
    pseed = derive_seed(seed, profile.participant_id, round_)
    s2 = stage2_select(profile, library, backend, fb, pseed)

    def quantify(c: Candidate) -> QuantScenario:
        return stage3_quantify(c, profile, analogy_table)

    scen = {r: [quantify(c) for c in s2.selected[r]] for r in RESOURCES}
    bundle = assemble_bundle(arm, profile.participant_id, round_, fb, s2, scen)
    bundle, _ = safety_screen(bundle, s2.pools, quantify, previous=profile.last_delivered)
    return bundle
