from __future__ import annotations

import os

import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture(scope="session")
def small_run(tmp_path_factory):
    """A simulated 60-person run with all five nudge rounds, shared across tests."""
    from nudgelab.config import load_config
    from nudgelab.pipeline import run_nudge, run_simulate

    out = tmp_path_factory.mktemp("run")
    cfg = load_config(seed=11, population=60, out=str(out), hte_trees=40, permutations=99)
    run_simulate(cfg, out)
    for r in range(1, 6):
        run_nudge(cfg, out, r)
    return cfg, out


@pytest.fixture(scope="session")
def make_profile():
    """Factory for valid profiles; keyword overrides replace defaults."""
    from nudgelab.profile_store import PSYCH_CONSTRUCTS, ParticipantProfile

    def make(pid="P001", **kw):
        base = dict(
            participant_id=pid,
            psych_scores={c: 3.0 for c in PSYCH_CONSTRUCTS},
            living_budget=2.0,
            gender="female",
            bill_experience=False,
            appliance_inventory=("air conditioner", "water heater", "lighting"),
            usage_params={"shower_flow_lpm": 8.0, "showers_per_week": 5.0},
        )
        base.update(kw)
        return ParticipantProfile(**base)

    return make
