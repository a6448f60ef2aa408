"""The analyze stage: every effect table computed from a run directory.

Each analysis writes one CSV under ``<run>/analysis``. An analysis whose
sample is too small is skipped and the reason is recorded in the manifest,
along with input and output digests, seeds and package versions.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

import numpy as np
import pandas as pd

from . import hte_meta, predictors, stats_core, text_metrics, trajectory_cluster
from .config import RunConfig, stream_seed
from .pipeline import (DependencyError, _require, bundle_messages, environment_versions, load_all_bundles,
                       sha256_file)
from .profile_store import PSYCH_CONSTRUCTS, RESOURCES, read_snapshots
from .samples import participant_frame, phase_means, round_means

logger = logging.getLogger(__name__)

UNITS = {"electricity": "kWh/room-day", "hot_water": "L/person-day"}
HTE_FEATURES = ("baseline", *PSYCH_CONSTRUCTS, "living_budget", "gender", "bill_experience")
MIN_PER_ARM = 5


class SkipAnalysis(Exception):
    """Raised inside an analysis when its sample cannot support it."""


@dataclass
class AnalysisContext:
    days: pd.DataFrame
    events: pd.DataFrame
    participants: pd.DataFrame
    profiles: list
    arms: dict[str, str]
    frames: dict[str, pd.DataFrame]
    cfg: RunConfig
    out: Path
    bundles: list = field(default_factory=list)

    def write(self, name: str, df: pd.DataFrame) -> Path:
        path = self.out / name
        df.to_csv(path, index=False, float_format="%.10g")
        return path


def load_context(cfg: RunConfig, run_dir: Path) -> AnalysisContext:
    run_dir = Path(run_dir)
    _require(run_dir / "panel.csv", run_dir / "events.csv", run_dir / "participants.csv",
             run_dir / "assignment.csv", run_dir / "profiles_round0.jsonl")
    days = pd.read_csv(run_dir / "panel.csv")
    for col in ("missing", "invalid", "excluded"):
        if col in days.columns:
            days[col] = days[col].astype(bool)
    events = pd.read_csv(run_dir / "events.csv", keep_default_na=False, na_values=[""])
    participants = pd.read_csv(run_dir / "participants.csv")
    assignment = pd.read_csv(run_dir / "assignment.csv")
    arms = dict(assignment[["participant_id", "arm"]].itertuples(index=False))
    profiles = read_snapshots(run_dir / "profiles_round0.jsonl")
    extra = participants[["participant_id", "chat_sessions", "avg_chat_length"]]
    frames = {r: participant_frame(days, profiles, r, extra) for r in RESOURCES}
    out = run_dir / "analysis"
    out.mkdir(parents=True, exist_ok=True)
    return AnalysisContext(days, events, participants, profiles, arms, frames, cfg, out,
                           load_all_bundles(run_dir, cfg.n_rounds))


def _check_arms(df: pd.DataFrame, arms=stats_core.ARMS, minimum: int = MIN_PER_ARM) -> None:
    counts = df["arm"].value_counts()
    short = {a: int(counts.get(a, 0)) for a in arms if counts.get(a, 0) < minimum}
    if short:
        raise SkipAnalysis(f"too few participants per arm after cleaning: {short} (need {minimum})")


# -- analyses -----------------------------------------------------------------

def analyze_contrasts(ctx: AnalysisContext) -> list[Path]:
    rows, rates = [], []
    slices = {}
    for res, df in ctx.frames.items():
        _check_arms(df)
        model = stats_core.fit_adjusted(df, "outcome", cluster="cluster_id")
        for c in stats_core.contrasts(model):
            rows.append({"resource": res, **vars(c), "n": model.n, "n_clusters": model.n_clusters})
        base = float(df["baseline"].mean())
        sr = stats_core.saving_rate(model, base)
        for arm in stats_core.ARMS:
            rates.append({"resource": res, "arm": arm, "saving_rate": sr[arm],
                          "net_of_control": sr[arm] - sr["C"], "baseline_mean": base})
        slices[res] = df
    pooled = stats_core.pool_standardized(slices, cluster="participant_id")
    for c in stats_core.contrasts(pooled.model):
        rows.append({"resource": "pooled_sd", **vars(c), "n": pooled.model.n,
                     "n_clusters": pooled.model.n_clusters})
    return [ctx.write("contrasts.csv", pd.DataFrame(rows)), ctx.write("saving_rates.csv", pd.DataFrame(rates))]


def analyze_permutation(ctx: AnalysisContext) -> list[Path]:
    rows = []
    for res, df in ctx.frames.items():
        _check_arms(df)
        rel = (df["outcome"] / df["baseline"] - 1.0).to_numpy()
        p = stats_core.permutation_test(rel, df["arm"].to_numpy(), stats_core.f_statistic,
                                        B=ctx.cfg.permutations, seed=stream_seed(ctx.cfg.seed, f"perm-{res}"),
                                        clusters=df["cluster_id"].to_numpy())
        rows.append({"resource": res, "statistic": "F on relative change", "B": ctx.cfg.permutations,
                     "p_value": p})
    return [ctx.write("permutation.csv", pd.DataFrame(rows))]


def weekly_panel(days: pd.DataFrame, resource: str) -> pd.DataFrame:
    d = days[(days["resource"] == resource) & ~days["missing"] & ~days["invalid"] & ~days["excluded"]]
    g = d.groupby(["participant_id", "arm", "phase", "round"])["value"].mean().reset_index()
    g["week"] = np.where(g["phase"] == "baseline", "b", "r") + g["round"].astype(str)
    return g


def analyze_panel_fe(ctx: AnalysisContext) -> list[Path]:
    rows = []
    for res in RESOURCES:
        wp = weekly_panel(ctx.days, res)
        if wp["participant_id"].nunique() < 3 * MIN_PER_ARM:
            raise SkipAnalysis(f"{res}: too few participants for the panel model")
        fe = stats_core.panel_fe(wp)
        for name, b, se in zip(fe.columns, fe.coef, fe.se):
            rows.append({"resource": res, "term": name, "coef": b, "se": se, "n_obs": fe.n_obs})
        for name in fe.absorbed:
            rows.append({"resource": res, "term": name, "coef": np.nan, "se": np.nan, "n_obs": fe.n_obs})
    return [ctx.write("panel_fe.csv", pd.DataFrame(rows))]


def analyze_engagement(ctx: AnalysisContext) -> list[Path]:
    rates = stats_core.engagement_rate(ctx.events, ctx.arms)
    df = pd.DataFrame({"arm": list(rates), "engagement_rate": list(rates.values())})
    return [ctx.write("engagement.csv", df)]


def analyze_survival(ctx: AnalysisContext) -> list[Path]:
    curves = stats_core.km_survival(ctx.events, ctx.arms, ctx.cfg.n_rounds)
    rows = [{"arm": arm, "round": int(t), "at_risk": int(n), "events": int(d), "survival": s}
            for arm, c in curves.items() for t, n, d, s in zip(c.times, c.at_risk, c.events, c.survival)]
    return [ctx.write("survival.csv", pd.DataFrame(rows))]


def analyze_trajectories(ctx: AnalysisContext) -> list[Path]:
    parts = []
    for res, df in ctx.frames.items():
        _check_arms(df)
        rm = round_means(ctx.days, res)
        rm = rm[rm["participant_id"].isin(df["participant_id"])]
        t = stats_core.cumulative_trajectory(rm, df, n_rounds=ctx.cfg.n_rounds)
        t.insert(0, "resource", res)
        parts.append(t)
    return [ctx.write("trajectories.csv", pd.concat(parts, ignore_index=True))]


def analyze_hte(ctx: AnalysisContext) -> list[Path]:
    counts = pd.Series(ctx.arms).value_counts()
    shares = (counts / counts.sum()).to_dict()
    scores, quart = [], []
    for res, df in ctx.frames.items():
        for arm in stats_core.TREATED:
            _check_arms(df, ("C", arm), MIN_PER_ARM)
            res_ = hte_meta.estimate_ites(
                df[list(HTE_FEATURES)], df["outcome"], df["arm"], arm, df["participant_id"],
                folds=5, seed=stream_seed(ctx.cfg.seed, f"hte-{res}-{arm}"),
                params=hte_meta.ForestParams(trees=ctx.cfg.hte_trees), assignment_shares=shares,
                units=UNITS[res])
            scores.extend(res_.scores)
            if arm == "T2" and len(res_.scores) >= 8:
                t2 = [s for s in res_.scores if ctx.arms[s.participant_id] == "T2"]
                if len(t2) >= 8:
                    q = hte_meta.top_quartile_profile(t2, df).table
                    q.insert(0, "resource", res)
                    q["share_negative"] = float(np.mean([s.ensemble < 0 for s in t2]))
                    quart.append(q)
    paths = [ctx.out / "ites.csv"]
    hte_meta.write_ites(paths[0], scores)
    if quart:
        paths.append(ctx.write("top_quartile.csv", pd.concat(quart, ignore_index=True)))
    return paths


def analyze_archetypes(ctx: AnalysisContext) -> list[Path]:
    assigned, shares = [], []
    for res, df in ctx.frames.items():
        pm = phase_means(ctx.days, res)
        pm = pm[pm.index.isin(df["participant_id"])]
        trajs = trajectory_cluster.build_trajectories(pm, df.set_index("participant_id")["baseline"])
        if len(trajs) < 2:
            raise SkipAnalysis(f"{res}: fewer than 2 complete trajectories")
        a = trajectory_cluster.assign_archetypes(trajs)
        for x in a:
            assigned.append({"resource": res, **{c: getattr(x, c) for c in trajectory_cluster.ASSIGNMENT_COLUMNS}})
        s = trajectory_cluster.archetype_shares(a, ctx.arms)
        s.insert(0, "resource", res)
        shares.append(s)
    return [ctx.write("archetypes.csv", pd.DataFrame(assigned)),
            ctx.write("archetype_shares.csv", pd.concat(shares, ignore_index=True))]


def analyze_text(ctx: AnalysisContext) -> list[Path]:
    if not ctx.bundles:
        raise SkipAnalysis("no nudge bundles found; run the nudge stage first")
    d = text_metrics.load_dictionaries()
    profiles = [text_metrics.count_keywords(text, d, mid, rnd, cls)
                for mid, rnd, cls, text in bundle_messages(ctx.bundles)]
    t2 = [p for p in profiles if p.arm_class == "personalized"]
    return [ctx.write("content_profiles.csv", text_metrics.profiles_frame(profiles)),
            ctx.write("content_drift.csv", text_metrics.round_drift(t2)),
            ctx.write("content_shares.csv", text_metrics.group_shares(profiles))]


def analyze_predictors(ctx: AnalysisContext) -> list[Path]:
    tables, selection = [], []
    for res, df in ctx.frames.items():
        if len(df) < 20:
            raise SkipAnalysis(f"{res}: {len(df)} participants, need 20 for the boosted models")
        feats = pd.concat([df[list(HTE_FEATURES) + ["chat_sessions", "avg_chat_length"]].reset_index(drop=True),
                           predictors.arm_dummies(df["arm"])], axis=1)
        whole = predictors.fit_importance(feats, df["outcome"], "whole")
        pm = phase_means(ctx.days, res).reindex(df["participant_id"])
        phases = predictors.phase_comparison(feats, {p: pm[p].to_numpy() for p in ("early", "late")})
        t = predictors.importance_table([whole, *phases.values()])
        t.insert(0, "resource", res)
        tables.append(t)
        cmp_ = predictors.compare_models(feats.to_numpy(), df["outcome"].to_numpy(),
                                         seed=stream_seed(ctx.cfg.seed, f"cv-{res}"))
        s = cmp_.table.assign(resource=res, selected=lambda x: x["model"] == cmp_.winner, note=cmp_.note)
        selection.append(s)
    return [ctx.write("importance.csv", pd.concat(tables, ignore_index=True)),
            ctx.write("model_selection.csv", pd.concat(selection, ignore_index=True))]


ANALYSIS_FUNCS: dict[str, Callable[[AnalysisContext], list[Path]]] = {
    "contrasts": analyze_contrasts,
    "permutation": analyze_permutation,
    "panel_fe": analyze_panel_fe,
    "engagement": analyze_engagement,
    "survival": analyze_survival,
    "trajectories": analyze_trajectories,
    "hte": analyze_hte,
    "archetypes": analyze_archetypes,
    "text": analyze_text,
    "predictors": analyze_predictors,
}


def run_analyze(cfg: RunConfig, run_dir: Path) -> dict[str, Any]:
    """Run every enabled analysis and write ``analysis/manifest.json``."""
    run_dir = Path(run_dir)
    ctx = load_context(cfg, run_dir)
    status: dict[str, str] = {}
    outputs: list[Path] = []
    for name, fn in ANALYSIS_FUNCS.items():
        if not cfg.analyses.get(name, True):
            status[name] = "disabled"
            continue
        try:
            outputs.extend(fn(ctx))
            status[name] = "done"
        except SkipAnalysis as exc:
            logger.warning("skipping %s: %s", name, exc)
            status[name] = f"skipped: {exc}"
    inputs = sorted(p for p in run_dir.iterdir() if p.is_file())
    manifest = {
        "seed": cfg.seed,
        "config": cfg.to_dict(),
        "streams": {n: stream_seed(cfg.seed, n) for n in ("population", "randomize", "trial", "agent")},
        "versions": environment_versions(),
        "inputs": {p.name: sha256_file(p) for p in inputs},
        "outputs": {p.name: sha256_file(p) for p in sorted(set(outputs))},
        "analyses": status,
        "notes": {"content_shares": text_metrics.SHARE_METHOD,
                  "model_selection": "neural network baseline omitted"},
    }
    (ctx.out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def render_report(run_dir: Path) -> str:
    """Plain-text summary of an analyzed run."""
    a = Path(run_dir) / "analysis"
    _require(a / "manifest.json")
    manifest = json.loads((a / "manifest.json").read_text())
    lines = [f"run: {run_dir}", f"seed: {manifest['seed']}", ""]
    if (a / "contrasts.csv").exists():
        c = pd.read_csv(a / "contrasts.csv")
        lines.append("Adjusted contrasts (cluster-robust)")
        for r in c.itertuples():
            est = "" if pd.isna(r.estimate) else f"estimate {r.estimate:+.4f} (se {r.se:.4f}) "
            lines.append(f"  {r.resource:<12} {r.label:<8} {est}p={r.p_value:.4g}")
        lines.append("")
    if (a / "saving_rates.csv").exists():
        s = pd.read_csv(a / "saving_rates.csv")
        lines.append("Adjusted saving rates")
        for r in s.itertuples():
            lines.append(f"  {r.resource:<12} {r.arm:<3} {r.saving_rate:+.3f} (net of C {r.net_of_control:+.3f})")
        lines.append("")
    if (a / "trajectories.csv").exists():
        t = pd.read_csv(a / "trajectories.csv")
        lines.append("Net cumulative saving rate by round")
        for (res, arm), g in t.groupby(["resource", "arm"]):
            vals = " ".join(f"{v:+.3f}" for v in g.sort_values("round")["net_saving_rate"])
            lines.append(f"  {res:<12} {arm:<3} {vals}")
        lines.append("")
    if (a / "engagement.csv").exists():
        e = pd.read_csv(a / "engagement.csv")
        lines.append("Engagement: " + ", ".join(f"{r.arm} {r.engagement_rate:.1%}" for r in e.itertuples()))
        lines.append("")
    lines.append("Analyses")
    for k, v in manifest["analyses"].items():
        lines.append(f"  {k:<13} {v}")
    return "\n".join(lines) + "\n"


# -- in-memory replication used for recovery checks ------------------------------

def quick_effects(panel, profiles, resource: str = "electricity") -> dict[str, Any]:
    """Contrasts and engagement for an in-memory cleaned panel."""
    df = participant_frame(panel.days, profiles, resource)
    model = stats_core.fit_adjusted(df, "outcome", cluster="cluster_id")
    res = {c.label: c for c in stats_core.contrasts(model)}
    return {
        "contrasts": res,
        "arm_effects": {"T1": model.coef_of("T1"), "T2": model.coef_of("T2")},
        "engagement": stats_core.engagement_rate(panel.events, panel.arms),
        "n": model.n,
    }


__all__ = ["run_analyze", "render_report", "quick_effects", "DependencyError"]
