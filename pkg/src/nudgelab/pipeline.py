"""File-based simulate -> nudge -> analyze stages.

Every stage reads its inputs from and writes its outputs to one run
directory, so any stage can be replayed from the files alone. Randomness
comes from the config seed through named streams (see ``stream_seed``).

Layout of a run directory::

    panel.csv  events.csv  participants.csv  assignment.csv  truth.json
    exclusions.csv  profiles_round0.jsonl
    bundles_round{N}.jsonl  profiles_round{N}.jsonl      (N = 1..5)
    analysis/*.csv  analysis/manifest.json
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import os
from pathlib import Path
from typing import Any

import numpy as np
import pandas as pd

from . import __version__
from .config import RunConfig, stream_seed
from .knowledge_base import default_library
from .nudge_agent import (InsufficientDataError, feedback_window, generate_bundle, load_analogy_table,
                          make_backend, read_bundles, render_message, write_bundles)
from .profile_store import RESOURCES, ParticipantProfile, RoundData, read_snapshots, update_profile, write_snapshots
from .trial_sim import clean_panel, randomize, simulate_trial, synth_population

logger = logging.getLogger(__name__)


class DependencyError(RuntimeError):
    """An upstream stage's output is missing."""


def _require(*paths: Path) -> None:
    missing = [str(p) for p in paths if not p.exists()]
    if missing:
        raise DependencyError(f"missing upstream files: {', '.join(missing)}")


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _series(days: pd.DataFrame, resource: str) -> tuple[tuple[str, float | None], ...]:
    d = days[days["resource"] == resource].sort_values("date")
    bad = d["missing"] | d.get("invalid", False)
    return tuple((str(day), None if b else float(v)) for day, v, b in zip(d["date"], d["value"], bad))


def _days_by_participant(days: pd.DataFrame) -> dict[str, pd.DataFrame]:
    return {pid: g for pid, g in days.groupby("participant_id", sort=True)}


# -- simulate -----------------------------------------------------------------

def run_simulate(cfg: RunConfig, out: Path) -> dict[str, Any]:
    """Draw a population, randomize clusters, simulate and clean the panel."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    if not os.access(out, os.W_OK):
        raise OSError(f"output directory {out} is not writable")
    pop = synth_population(cfg.population, stream_seed(cfg.seed, "population"))
    assignment = randomize(pop.clusters, 3, stream_seed(cfg.seed, "randomize"))
    panel = simulate_trial(pop, assignment, cfg.sim_config(), stream_seed(cfg.seed, "trial"))
    panel, report = clean_panel(panel, cfg.cleaning_rules())

    panel.days.to_csv(out / "panel.csv", index=False)
    panel.events.to_csv(out / "events.csv", index=False)
    panel.participants.to_csv(out / "participants.csv", index=False)
    pd.DataFrame({"participant_id": list(assignment), "cluster_id": [panel.clusters[p] for p in assignment],
                  "arm": list(assignment.values())}).sort_values("participant_id").to_csv(
        out / "assignment.csv", index=False)
    report.table.to_csv(out / "exclusions.csv", index=False)
    truth = {k: panel.truth[k] for k in ("ate", "curves", "base_means", "engagement_targets")}
    (out / "truth.json").write_text(json.dumps(truth, indent=2, sort_keys=True) + "\n")

    by_pid = _days_by_participant(panel.days[panel.days["phase"] == "baseline"])
    profiles = [dataclasses.replace(p, consumption_history={r: _series(by_pid[p.participant_id], r)
                                                            for r in RESOURCES})
                for p in pop.profiles]
    write_snapshots(out / "profiles_round0.jsonl", profiles)
    return {"report": report, "n": len(profiles)}


# -- nudge --------------------------------------------------------------------

def run_nudge(cfg: RunConfig, out: Path, round_: int) -> list:
    """Generate one bundle per participant for ``round_`` and advance profiles."""
    if not 1 <= round_ <= cfg.n_rounds:
        raise ValueError(f"round must be in 1..{cfg.n_rounds}, got {round_}")
    out = Path(out)
    prev_path = out / f"profiles_round{round_ - 1}.jsonl"
    _require(out / "panel.csv", out / "events.csv", out / "assignment.csv", prev_path)
    days = pd.read_csv(out / "panel.csv")
    events = pd.read_csv(out / "events.csv", keep_default_na=False, na_values=[""])
    arms = dict(pd.read_csv(out / "assignment.csv")[["participant_id", "arm"]].itertuples(index=False))
    profiles = read_snapshots(prev_path)
    sim = cfg.sim_config()

    # readings from the week since the previous nudge join the profiles first
    new_days = days[(days["phase"] == "intervention") & (days["round"] == round_ - 1)]
    by_pid = _days_by_participant(new_days)
    replies = events[(events["kind"] == "reply") & (events["round"] == round_ - 1)]
    fb_of = replies.groupby("participant_id")["text"].apply(tuple).to_dict()

    def week(pid: str) -> dict:
        g = by_pid.get(pid)
        return {} if g is None else {r: _series(g, r) for r in RESOURCES}

    views = [dataclasses.replace(p, consumption_history={
        r: p.series(r) + week(p.participant_id).get(r, ()) for r in RESOURCES}) for p in profiles]
    window = feedback_window(sim.start_date, sim.baseline_days, sim.days_per_round, round_)
    library = default_library()
    table = load_analogy_table()
    backend = make_backend(cfg.backend)
    seed = stream_seed(cfg.seed, "agent")

    # peers for the social comparison are the other members of the same arm
    peers: dict[str, list] = {}
    for v in views:
        peers.setdefault(arms[v.participant_id], []).append(v)

    bundles, updated = [], []
    for prof, view in zip(profiles, views):
        arm = arms[prof.participant_id]
        try:
            b = generate_bundle(view, arm, round_, peers[arm], window, library, backend, table, seed)
        except InsufficientDataError:
            # no readings this week: fall back to everything observed so far
            wide = (sim.start_date, window[1])
            b = generate_bundle(view, arm, round_, peers[arm], wide, library, backend, table, seed)
        delivered = tuple(s.id for r in RESOURCES for s in b.suggestions.get(r, []))
        updated.append(update_profile(prof, RoundData(round_, week(prof.participant_id),
                                                      fb_of.get(prof.participant_id, ()), delivered),
                                      b.new_summary or prof.summary))
        bundles.append(b)
    write_bundles(out / f"bundles_round{round_}.jsonl", bundles)
    write_snapshots(out / f"profiles_round{round_}.jsonl", updated)
    return bundles


def load_all_bundles(out: Path, n_rounds: int) -> list:
    bundles = []
    for r in range(1, n_rounds + 1):
        p = Path(out) / f"bundles_round{r}.jsonl"
        if p.exists():
            bundles.extend(read_bundles(p))
    return bundles


def bundle_messages(bundles) -> list[tuple[str, int, str, str]]:
    """(message id, round, arm class, text) per bundle."""
    return [(f"{b.participant_id}-r{b.round}", b.round, "personalized" if b.arm == "T2" else "conventional",
             render_message(b)) for b in bundles]


def environment_versions() -> dict[str, str]:
    import numba
    import scipy
    import yaml
    return {"nudgelab": __version__, "numpy": np.__version__, "pandas": pd.__version__,
            "scipy": scipy.__version__, "numba": numba.__version__, "pyyaml": yaml.__version__}
