"""Participant-level analytic samples built from a cleaned day panel."""

from __future__ import annotations

import pandas as pd

from .profile_store import PSYCH_CONSTRUCTS, ParticipantProfile, mean_psych

PHASES = {"early": (1, 2), "middle": (3, 4), "late": (5,)}


def covariate_table(profiles: list[ParticipantProfile]) -> pd.DataFrame:
    rows = []
    for p in profiles:
        row = {
            "participant_id": p.participant_id,
            "psych_mean": mean_psych(p),
            "living_budget": p.living_budget,
            "gender": 1.0 if p.gender == "female" else 0.0,
            "bill_experience": 1.0 if p.bill_experience else 0.0,
        }
        row.update({c: p.psych_scores[c] for c in PSYCH_CONSTRUCTS})
        rows.append(row)
    return pd.DataFrame(rows)


def valid_days(days: pd.DataFrame, resource: str) -> pd.DataFrame:
    d = days[days["resource"] == resource]
    keep = ~d["missing"]
    if "invalid" in d.columns:
        keep &= ~d["invalid"]
    if "excluded" in d.columns:
        keep &= ~d["excluded"]
    return d[keep]


def participant_frame(days: pd.DataFrame, profiles: list[ParticipantProfile], resource: str,
                      extra: pd.DataFrame | None = None) -> pd.DataFrame:
    """One row per retained participant: arm, cluster, baseline and outcome means.

    ``outcome`` is the mean of valid intervention days and ``baseline`` the
    mean of valid baseline days. Participants lacking either are dropped.
    ``extra`` (keyed by participant_id) is joined on, e.g. chat measures.
    """
    v = valid_days(days, resource)
    means = v.groupby(["participant_id", "phase"])["value"].mean().unstack("phase")
    for col in ("baseline", "intervention"):
        if col not in means.columns:
            means[col] = float("nan")
    means = means.rename(columns={"intervention": "outcome"})[["baseline", "outcome"]]
    ident = days[["participant_id", "arm", "cluster_id"]].drop_duplicates("participant_id")
    out = ident.merge(means.reset_index(), on="participant_id").dropna(subset=["baseline", "outcome"])
    out = out.merge(covariate_table(profiles), on="participant_id")
    if extra is not None:
        cols = [c for c in extra.columns if c not in out.columns or c == "participant_id"]
        out = out.merge(extra[cols], on="participant_id", how="left")
    out["resource"] = resource
    return out.sort_values("participant_id").reset_index(drop=True)


def round_means(days: pd.DataFrame, resource: str) -> pd.DataFrame:
    """Mean valid value per participant and intervention round."""
    v = valid_days(days, resource)
    v = v[v["phase"] == "intervention"]
    return v.groupby(["participant_id", "round"])["value"].mean().reset_index()


def phase_means(days: pd.DataFrame, resource: str) -> pd.DataFrame:
    """Early / middle / late means per participant (wide)."""
    rm = round_means(days, resource)
    out = {}
    for name, rounds in PHASES.items():
        out[name] = rm[rm["round"].isin(rounds)].groupby("participant_id")["value"].mean()
    return pd.DataFrame(out)
