"""Generation backends: a deterministic template backend and a remote HTTP one.

Both take a dict of structured prompt fields plus a seed and return a dict of
structured output fields. The ``task`` field selects the job:

``profile_summary``
    answer the four profile questions; returns habits, likely_adoption,
    largest_savings, past_effectiveness.
``generate_suggestions``
    propose ``n`` new suggestions for ``resource``; returns a
    ``suggestions`` list of {behavior_type, appliance, strategy, text}.
``rank_candidates``
    order ``candidates`` from most to least feasible and impactful; returns
    ``ranking`` (candidate ids).
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import random
import threading
import time
import urllib.error
import urllib.request
from typing import Any, Protocol

logger = logging.getLogger(__name__)

FEASIBILITY = {
    "duration_control": 3,
    "frequency_reduction": 3,
    "temperature_adjustment": 2,
    "behavior_mode_change": 2,
    "monitoring_feedback": 1,
}
# impact assigned to a candidate whose appliance is absent from the usage breakdown
IMPACT_FLOOR = 0.05

ENV_URL = "NUDGELAB_BACKEND_URL"
ENV_KEY = "NUDGELAB_BACKEND_KEY"
ENV_MODEL = "NUDGELAB_BACKEND_MODEL"


class BackendError(RuntimeError):
    def __init__(self, message: str, attempts: int = 1, retryable: bool = False,
                 last_status: int | None = None):
        self.attempts = attempts
        self.retryable = retryable
        self.last_status = last_status
        super().__init__(f"{message} (attempts={attempts})")


class GenerationBackend(Protocol):
    name: str

    def generate(self, fields: dict[str, Any], seed: int, max_length: int = 2048) -> dict[str, Any]:
        ...


# (resource, appliance) -> ideas the template backend can propose
_IDEAS: dict[str, list[dict[str, str]]] = {
    "electricity": [
        {"behavior_type": "cooling", "appliance": "air conditioner", "strategy": "duration_control",
         "text": "Run the air conditioner 30 minutes less each day, for example by switching it off before bed."},
        {"behavior_type": "cooling", "appliance": "air conditioner", "strategy": "temperature_adjustment",
         "text": "Move the air conditioner setpoint 2 degrees closer to the outdoor temperature."},
        {"behavior_type": "computing", "appliance": "laptop", "strategy": "duration_control",
         "text": "Close the laptop lid when you take a break longer than 30 minutes."},
        {"behavior_type": "water heating", "appliance": "electric kettle", "strategy": "frequency_reduction",
         "text": "Fill a thermos in the morning so you boil the kettle two fewer times a week."},
        {"behavior_type": "lighting", "appliance": "desk lamp", "strategy": "duration_control",
         "text": "Switch the desk lamp off whenever you leave your desk."},
        {"behavior_type": "personal care", "appliance": "hair dryer", "strategy": "duration_control",
         "text": "Let your hair air dry for a few minutes before using the hair dryer."},
        {"behavior_type": "cooling", "appliance": "fan", "strategy": "duration_control",
         "text": "Put the fan on a timer so it stops after you fall asleep."},
        {"behavior_type": "standby", "appliance": "power strip", "strategy": "monitoring_feedback",
         "text": "Note your meter reading before bed and again in the morning to spot overnight use."},
    ],
    "hot_water": [
        {"behavior_type": "showering", "appliance": "shower", "strategy": "duration_control",
         "text": "Shorten each shower by 30 seconds by turning the water off while you lather."},
        {"behavior_type": "showering", "appliance": "shower", "strategy": "frequency_reduction",
         "text": "Swap one shower a week for a quick wash on days you stay in."},
        {"behavior_type": "showering", "appliance": "shower", "strategy": "monitoring_feedback",
         "text": "Look at the cost of each shower on your card to keep track of your hot water use."},
        {"behavior_type": "showering", "appliance": "shower", "strategy": "behavior_mode_change",
         "text": "Gather everything you need before turning the water on so it does not run while you wait."},
    ],
}


def _stable_int(*parts: Any) -> int:
    h = hashlib.sha256("|".join(str(p) for p in parts).encode()).digest()
    return int.from_bytes(h[:8], "big")


def generated_id(resource: str, text: str) -> str:
    return f"gen-{resource}-{hashlib.sha1(text.encode()).hexdigest()[:8]}"


class TemplateBackend:
    """Deterministic stand-in for an LLM; output depends only on (fields, seed)."""

    name = "template"

    def generate(self, fields: dict[str, Any], seed: int, max_length: int = 2048) -> dict[str, Any]:
        task = fields.get("task")
        if task == "profile_summary":
            return self._summary(fields)
        if task == "generate_suggestions":
            return self._suggest(fields, seed)
        if task == "rank_candidates":
            return self._rank(fields)
        raise BackendError(f"template backend does not handle task {task!r}")

    def _summary(self, f: dict[str, Any]) -> dict[str, Any]:
        psych = f.get("psych_scores", {})
        top = max(sorted(psych), key=lambda k: psych[k]) if psych else "none"
        low = min(sorted(psych), key=lambda k: psych[k]) if psych else "none"
        usage = f.get("usage", {})
        habits = ", ".join(
            f"{r} {u['trend']} {u['percent_change']:+.0f}% at {u['peer_ratio']:.2f}x peers"
            for r, u in sorted(usage.items())
        ) or "no usage data yet"
        breakdown = f.get("breakdown", [])
        biggest = breakdown[0][0] if breakdown else "shower"
        prev = f.get("previous_suggestions", [])
        fb = f.get("feedback", [])
        if not prev:
            past = "no earlier nudges"
        else:
            el = usage.get("electricity", {}).get("trend", "flat")
            past = f"after {len(prev)} earlier suggestions electricity went {el}"
            if fb:
                past += f"; latest feedback: {fb[-1]}"
        return {
            "habits": habits,
            "likely_adoption": f"strongest construct {top}; weakest {low}; prefers low-effort duration changes",
            "largest_savings": f"largest share of use from {biggest}",
            "past_effectiveness": past,
        }

    def _suggest(self, f: dict[str, Any], seed: int) -> dict[str, Any]:
        resource = f["resource"]
        n = int(f.get("n", 2))
        have = set(f.get("appliances", ())) | {"shower", "power strip"}
        ideas = [i for i in _IDEAS.get(resource, []) if i["appliance"] in have]
        exclude = set(f.get("exclude_texts", ()))
        ideas = [i for i in ideas if i["text"] not in exclude]
        rng = random.Random(seed)
        rng.shuffle(ideas)
        return {"suggestions": [dict(i) for i in ideas[:n]]}

    def _rank(self, f: dict[str, Any]) -> dict[str, Any]:
        shares = {a: s for a, s in f.get("breakdown", [])}
        scored = []
        for c in f["candidates"]:
            impact = shares.get(c["appliance"], IMPACT_FLOOR)
            scored.append((-(FEASIBILITY[c["strategy"]] * impact), c["id"]))
        scored.sort()
        return {"ranking": [cid for _, cid in scored]}


class RemoteBackend:
    """JSON-over-HTTP backend.

    POSTs ``{"fields", "seed", "max_length"}`` and expects ``{"fields": {...}}``
    back. Endpoint, key and model come from the environment unless given.
    Transient failures (connection errors, 429, 5xx) are retried with capped
    exponential backoff; the number of concurrent requests is bounded.
    """

    name = "remote"

    def __init__(self, url: str | None = None, api_key: str | None = None, model: str | None = None,
                 timeout: float = 30.0, max_retries: int = 3, backoff: float = 0.5,
                 backoff_cap: float = 8.0, max_in_flight: int = 4):
        self.url = url or os.environ.get(ENV_URL)
        if not self.url:
            raise BackendError(f"no backend endpoint; set {ENV_URL}")
        self.api_key = api_key if api_key is not None else os.environ.get(ENV_KEY)
        self.model = model or os.environ.get(ENV_MODEL, "")
        self.timeout = timeout
        self.max_retries = max_retries
        self.backoff = backoff
        self.backoff_cap = backoff_cap
        self._slots = threading.BoundedSemaphore(max_in_flight)

    def _post(self, body: bytes) -> dict[str, Any]:
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        req = urllib.request.Request(self.url, data=body, headers=headers, method="POST")
        with urllib.request.urlopen(req, timeout=self.timeout) as resp:
            return json.loads(resp.read().decode("utf-8"))

    def generate(self, fields: dict[str, Any], seed: int, max_length: int = 2048) -> dict[str, Any]:
        payload = {"fields": fields, "seed": seed, "max_length": max_length}
        if self.model:
            payload["model"] = self.model
        body = json.dumps(payload).encode("utf-8")
        status = None
        for attempt in range(1, self.max_retries + 2):
            try:
                with self._slots:
                    data = self._post(body)
                out = data.get("fields")
                if not isinstance(out, dict):
                    raise BackendError("backend response lacks a 'fields' object", attempts=attempt)
                return out
            except urllib.error.HTTPError as exc:
                status = exc.code
                retryable = exc.code == 429 or exc.code >= 500
                if not retryable:
                    raise BackendError(f"backend rejected request: HTTP {exc.code}",
                                       attempts=attempt, last_status=status) from None
            except (urllib.error.URLError, TimeoutError, ConnectionError, json.JSONDecodeError) as exc:
                logger.warning("backend call failed (attempt %d): %s", attempt, exc)
            if attempt <= self.max_retries:
                time.sleep(min(self.backoff_cap, self.backoff * 2 ** (attempt - 1)))
        raise BackendError("backend unavailable after retries", attempts=self.max_retries + 1,
                           retryable=True, last_status=status)


def make_backend(kind: str = "template", **kwargs) -> GenerationBackend:
    if kind == "template":
        return TemplateBackend()
    if kind == "remote":
        return RemoteBackend(**kwargs)
    raise ValueError(f"unknown backend {kind!r}")
