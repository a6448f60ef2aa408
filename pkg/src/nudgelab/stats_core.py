"""Estimation stack for three-arm trial outcomes.

Covariate-adjusted least squares with iid or cluster-robust covariance, Wald
omnibus and pairwise arm contrasts, adjusted saving rates, pooled standardized
models, cluster-respecting permutation tests, two-way fixed-effects panels,
engagement rates, Kaplan-Meier curves and cumulative saving trajectories.

Arms are coded C (reference), T1, T2 throughout.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
import pandas as pd
from scipy import stats

logger = logging.getLogger(__name__)

ARMS = ("C", "T1", "T2")
TREATED = ("T1", "T2")
COVARIATES = ("baseline", "psych_mean", "living_budget", "gender", "bill_experience")


class RankDeficientError(ValueError):
    """Design matrix does not have full column rank."""

    def __init__(self, collinear: list[str]):
        self.collinear = collinear
        super().__init__(f"design matrix is rank deficient; collinear columns: {collinear}")


@dataclass
class AdjustedModel:
    columns: list[str]
    coef: np.ndarray
    cov: np.ndarray
    resid: np.ndarray
    X: np.ndarray
    y: np.ndarray
    covariance: str
    n_clusters: int | None = None
    covariate_means: dict[str, float] = field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def k(self) -> int:
        return self.X.shape[1]

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.diag(self.cov))

    @property
    def r2(self) -> float:
        tss = np.sum((self.y - self.y.mean()) ** 2)
        if tss == 0:
            return 1.0 if np.allclose(self.resid, 0) else 0.0
        return 1.0 - float(np.sum(self.resid**2) / tss)

    def coef_of(self, name: str) -> float:
        return float(self.coef[self.columns.index(name)])

    def predict_at_means(self, arm: str) -> float:
        """Predicted outcome for ``arm`` with covariates at their sample means."""
        x = np.zeros(self.k)
        for j, c in enumerate(self.columns):
            if c == "const":
                x[j] = 1.0
            elif c in TREATED:
                x[j] = 1.0 if c == arm else 0.0
            else:
                x[j] = self.covariate_means[c]
        return float(x @ self.coef)


def _collinear_columns(X: np.ndarray, names: Sequence[str], tol: float = 1e-10) -> list[str]:
    bad = []
    kept: list[int] = []
    scale = max(1.0, np.abs(X).max())
    for j in range(X.shape[1]):
        trial = kept + [j]
        sv = np.linalg.svd(X[:, trial], compute_uv=False)
        if sv[-1] <= tol * scale * sv[0] or sv[-1] == 0:
            bad.append(names[j])
        else:
            kept.append(j)
    return bad


def ols(
    X: np.ndarray,
    y: np.ndarray,
    names: Sequence[str] | None = None,
    clusters: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, int | None]:
    """Least squares with iid or cluster-robust (CR1) covariance.

    Returns (coef, cov, resid, n_clusters).
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    n, k = X.shape
    names = list(names) if names is not None else [f"x{j}" for j in range(k)]
    if n <= k:
        raise ValueError(f"need more rows than columns (n={n}, k={k})")
    bad = _collinear_columns(X, names)
    if bad:
        raise RankDeficientError(bad)
    q, r = np.linalg.qr(X)
    coef = np.linalg.solve(r, q.T @ y)
    resid = y - X @ coef
    r_inv = np.linalg.inv(r)
    xtx_inv = r_inv @ r_inv.T
    if clusters is None:
        sigma2 = resid @ resid / (n - k)
        return coef, sigma2 * xtx_inv, resid, None
    clusters = np.asarray(clusters)
    if clusters.shape[0] != n:
        raise ValueError("cluster key must cover every row")
    codes, uniq = pd.factorize(clusters, sort=True)
    g = len(uniq)
    if g < 2:
        raise ValueError("cluster-robust covariance needs at least 2 clusters")
    scores = np.zeros((g, k))
    np.add.at(scores, codes, X * resid[:, None])
    meat = scores.T @ scores
    correction = g / (g - 1) * (n - 1) / (n - k)
    cov = correction * xtx_inv @ meat @ xtx_inv
    cov = 0.5 * (cov + cov.T)
    return coef, cov, resid, g


def design_matrix(
    df: pd.DataFrame,
    covariates: Sequence[str] = COVARIATES,
    arm_col: str = "arm",
    arms: bool = True,
) -> tuple[np.ndarray, list[str]]:
    cols = ["const"]
    parts = [np.ones(len(df))]
    if arms:
        for a in TREATED:
            cols.append(a)
            parts.append((df[arm_col].to_numpy() == a).astype(float))
    for c in covariates:
        cols.append(c)
        parts.append(df[c].to_numpy(dtype=float))
    return np.column_stack(parts), cols


def fit_adjusted(
    df: pd.DataFrame,
    outcome: str = "outcome",
    covariates: Sequence[str] = COVARIATES,
    cluster: str | None = None,
    arm_col: str = "arm",
    arms: bool = True,
) -> AdjustedModel:
    """Regress ``outcome`` on T1/T2 indicators plus covariates.

    Args:
        df: one row per analysis unit with an ``arm`` column in {C, T1, T2}.
        outcome: outcome column.
        covariates: adjustment columns.
        cluster: column holding the cluster key; None gives iid covariance.
        arms: include arm indicators (False fits covariates only).

    Raises:
        RankDeficientError: naming the columns that are linear combinations
            of earlier ones.
    """
    X, cols = design_matrix(df, covariates, arm_col, arms)
    y = df[outcome].to_numpy(dtype=float)
    cl = df[cluster].to_numpy() if cluster is not None else None
    coef, cov, resid, g = ols(X, y, cols, cl)
    means = {c: float(df[c].astype(float).mean()) for c in covariates}
    return AdjustedModel(
        columns=cols, coef=coef, cov=cov, resid=resid, X=X, y=y,
        covariance="iid" if cluster is None else f"cluster_robust({cluster})",
        n_clusters=g, covariate_means=means,
    )


@dataclass
class ContrastResult:
    label: str
    estimate: float
    se: float
    statistic: float
    p_value: float
    df: int = 1


def contrasts(model: AdjustedModel) -> list[ContrastResult]:
    """Wald omnibus test on both arm coefficients plus the three pairwise contrasts.

    Pairwise statistics are z-type Wald statistics with two-sided normal
    p-values; the omnibus statistic is chi-square with 2 degrees of freedom.
    """
    missing = [a for a in TREATED if a not in model.columns]
    if missing:
        raise ValueError(f"model lacks arm indicators: {missing}")
    i1, i2 = model.columns.index("T1"), model.columns.index("T2")
    b = model.coef[[i1, i2]]
    v = model.cov[np.ix_([i1, i2], [i1, i2])]
    w = float(b @ np.linalg.solve(v, b))
    w = max(w, 0.0)
    out = [ContrastResult("omnibus", float("nan"), float("nan"), w, float(stats.chi2.sf(w, 2)), 2)]
    k = model.k
    for label, vec in (
        ("T2-C", {i2: 1.0}),
        ("T1-C", {i1: 1.0}),
        ("T2-T1", {i2: 1.0, i1: -1.0}),
    ):
        L = np.zeros(k)
        for j, c in vec.items():
            L[j] = c
        est = float(L @ model.coef)
        se = float(np.sqrt(L @ model.cov @ L))
        z = est / se if se > 0 else float("inf") * np.sign(est)
        p = float(2 * stats.norm.sf(abs(z))) if np.isfinite(z) else 0.0
        out.append(ContrastResult(label, est, se, float(z), p))
    return out


def saving_rate(model: AdjustedModel, baseline_mean: float) -> dict[str, float]:
    """1 - predicted intervention consumption / pooled baseline mean, per arm."""
    if not baseline_mean > 0:
        raise ValueError(f"baseline mean must be positive, got {baseline_mean}")
    return {a: 1.0 - model.predict_at_means(a) / baseline_mean for a in ARMS}


def saving_rate_from_prediction(predicted: float, baseline_mean: float) -> float:
    if not baseline_mean > 0:
        raise ValueError(f"baseline mean must be positive, got {baseline_mean}")
    return 1.0 - predicted / baseline_mean


def _zscore(x: pd.Series) -> pd.Series:
    sd = x.std(ddof=1)
    if not sd > 0:
        raise ValueError(f"zero variance in column {x.name!r}")
    return (x - x.mean()) / sd


@dataclass
class PooledModel:
    model: AdjustedModel
    data: pd.DataFrame
    scales: dict[str, tuple[float, float]]


def pool_standardized(
    slices: dict[str, pd.DataFrame],
    covariates: Sequence[str] = COVARIATES,
    cluster: str = "participant_id",
) -> PooledModel:
    """Stack resource slices after z-scoring outcome and baseline within resource.

    Each slice needs ``outcome`` and ``baseline`` columns. Standard errors
    are clustered on participant since one person can contribute a row per
    resource. ``scales`` maps resource to the (mean, sd) of its outcome.
    """
    parts = []
    scales = {}
    for resource, df in slices.items():
        if df.empty:
            raise ValueError(f"slice {resource!r} is empty")
        d = df.copy()
        scales[resource] = (float(d["outcome"].mean()), float(d["outcome"].std(ddof=1)))
        d["outcome"] = _zscore(d["outcome"].astype(float))
        d["baseline"] = _zscore(d["baseline"].astype(float))
        d["resource"] = resource
        parts.append(d)
    data = pd.concat(parts, ignore_index=True)
    if data[cluster].nunique() < 2:
        raise ValueError("pooled model needs at least two participants")
    model = fit_adjusted(data, "outcome", covariates, cluster=cluster)
    return PooledModel(model=model, data=data, scales=scales)


def permutation_test(
    y: np.ndarray,
    labels: np.ndarray,
    statistic: Callable[[np.ndarray, np.ndarray], float],
    B: int = 3000,
    seed: int = 0,
    clusters: np.ndarray | None = None,
) -> float:
    """Two-sided permutation p-value (1 + #{|T*| >= |T|}) / (B + 1).

    Labels are shuffled across assignment clusters: every member of a
    cluster carries its cluster's label, so clusters move as units and the
    number of clusters per arm is preserved. Each replicate draws from its
    own child seed.
    """
    if B < 1:
        raise ValueError("B must be >= 1")
    y = np.asarray(y, dtype=float)
    labels = np.asarray(labels)
    observed = statistic(y, labels)
    if clusters is None:
        clusters = np.arange(len(y))
    codes, _ = pd.factorize(np.asarray(clusters), sort=True)
    n_cl = codes.max() + 1
    first = np.full(n_cl, -1)
    for i, c in enumerate(codes):
        if first[c] < 0:
            first[c] = i
    cluster_labels = labels[first]
    if not np.all(labels == cluster_labels[codes]):
        raise ValueError("labels vary within an assignment cluster")
    if not np.isfinite(observed) or np.ptp(y) == 0:
        warnings.warn("degenerate statistic; returning p = 1", RuntimeWarning, stacklevel=2)
        return 1.0
    hits = 0
    # tolerance absorbs float noise between algebraically equal statistics
    tol = 1e-12 * max(1.0, abs(observed))
    for child in np.random.SeedSequence(seed).spawn(B):
        rng = np.random.default_rng(child)
        perm = cluster_labels[rng.permutation(n_cl)]
        t = statistic(y, perm[codes])
        if abs(t) >= abs(observed) - tol:
            hits += 1
    return (1 + hits) / (B + 1)


def mean_difference(a: str, b: str) -> Callable[[np.ndarray, np.ndarray], float]:
    def stat(y: np.ndarray, labels: np.ndarray) -> float:
        return float(y[labels == a].mean() - y[labels == b].mean())
    return stat


def f_statistic(y: np.ndarray, labels: np.ndarray) -> float:
    """One-way ANOVA F across whatever groups the labels define."""
    groups = [y[labels == g] for g in np.unique(labels)]
    return float(stats.f_oneway(*groups).statistic)


@dataclass
class PanelFEResult:
    columns: list[str]
    coef: np.ndarray
    se: np.ndarray
    absorbed: list[str]
    dropped_units: list
    n_obs: int


def _two_way_demean(v: np.ndarray, unit: np.ndarray, period: np.ndarray,
                    tol: float = 1e-13, max_iter: int = 10_000) -> np.ndarray:
    """Alternating projections onto unit and period means until stable."""
    v = v.astype(float).copy()
    n_u = unit.max() + 1
    n_p = period.max() + 1
    cu = np.bincount(unit, minlength=n_u).astype(float)
    cp = np.bincount(period, minlength=n_p).astype(float)
    scale = max(1.0, np.abs(v).max())
    for _ in range(max_iter):
        mu = np.bincount(unit, weights=v, minlength=n_u) / cu
        v -= mu[unit]
        mp = np.bincount(period, weights=v, minlength=n_p) / cp
        v -= mp[period]
        if np.abs(mp).max() < tol * scale and np.abs(mu).max() < tol * scale:
            break
    return v


def panel_fe(
    df: pd.DataFrame,
    regressors: Sequence[str] | None = None,
    unit: str = "participant_id",
    period: str = "week",
    outcome: str = "value",
) -> PanelFEResult:
    """Two-way within estimator with participant and week fixed effects.

    By default the regressors are T1 x intervention and T2 x intervention
    interactions built from ``arm`` and ``phase`` columns. Units observed in
    fewer than two periods are dropped with a log notice. Regressors that
    vanish after demeaning are reported as absorbed. Standard errors are
    clustered on the unit.
    """
    d = df.copy()
    if regressors is None:
        post = (d["phase"] == "intervention").astype(float)
        for a in TREATED:
            d[f"{a}_x_post"] = (d["arm"] == a).astype(float) * post
        regressors = [f"{a}_x_post" for a in TREATED]
    counts = d.groupby(unit)[period].nunique()
    singles = counts[counts < 2].index.tolist()
    if singles:
        logger.info("panel_fe: dropping %d units observed in one period", len(singles))
        d = d[~d[unit].isin(singles)]
    u, _ = pd.factorize(d[unit], sort=True)
    t, _ = pd.factorize(d[period], sort=True)
    y = _two_way_demean(d[outcome].to_numpy(dtype=float), u, t)
    cols, absorbed, Xs = [], [], []
    for r in regressors:
        raw = d[r].to_numpy(dtype=float)
        x = _two_way_demean(raw, u, t)
        if np.linalg.norm(x) <= 1e-9 * max(1.0, np.linalg.norm(raw)):
            absorbed.append(r)
        else:
            cols.append(r)
            Xs.append(x)
    if not cols:
        return PanelFEResult([], np.array([]), np.array([]), absorbed, singles, len(d))
    X = np.column_stack(Xs)
    coef, *_ = np.linalg.lstsq(X, y, rcond=None)
    resid = y - X @ coef
    xtx_inv = np.linalg.inv(X.T @ X)
    g = u.max() + 1
    scores = np.zeros((g, X.shape[1]))
    np.add.at(scores, u, X * resid[:, None])
    n, k = len(y), X.shape[1]
    k_total = k + g + (t.max() + 1) - 1
    dof = max(n - k_total, 1)
    correction = g / (g - 1) * (n - 1) / dof if g > 1 else 1.0
    cov = correction * xtx_inv @ (scores.T @ scores) @ xtx_inv
    return PanelFEResult(cols, coef, np.sqrt(np.diag(cov)), absorbed, singles, n)


def engagement_rate(events: pd.DataFrame, arm_map: dict) -> dict[str, float]:
    """Share of each arm with at least one report open and one text reply.

    ``events`` needs columns participant_id, kind (open | reply | ...) and,
    if present, phase; only intervention-phase events count.
    """
    sizes = {a: 0 for a in ARMS}
    for a in arm_map.values():
        sizes[a] = sizes.get(a, 0) + 1
    engaged = {a: 0 for a in sizes}
    if len(events):
        ev = events
        if "phase" in ev.columns:
            ev = ev[ev["phase"] == "intervention"]
        opened = set(ev.loc[ev["kind"] == "open", "participant_id"])
        replied = set(ev.loc[ev["kind"] == "reply", "participant_id"])
        for pid in opened & replied:
            if pid in arm_map:
                engaged[arm_map[pid]] += 1
    return {a: (engaged[a] / sizes[a] if sizes[a] else 0.0) for a in sizes}


@dataclass
class SurvivalCurve:
    times: np.ndarray
    at_risk: np.ndarray
    events: np.ndarray
    survival: np.ndarray

    def at(self, t: float) -> float:
        idx = np.searchsorted(self.times, t, side="right") - 1
        return 1.0 if idx < 0 else float(self.survival[idx])


def product_limit(durations: Iterable[int], observed: Iterable[bool],
                  times: Sequence[int] | None = None) -> SurvivalCurve:
    """Kaplan-Meier estimate S(t) = prod_{t_i <= t} (1 - d_i / n_i)."""
    dur = np.asarray(list(durations), dtype=float)
    obs = np.asarray(list(observed), dtype=bool)
    if times is None:
        times = np.unique(dur)
    times = np.asarray(times, dtype=float)
    at_risk = np.array([(dur >= t).sum() for t in times])
    ev = np.array([((dur == t) & obs).sum() for t in times])
    s = 1.0
    surv = np.empty(len(times))
    for i, (n_i, d_i) in enumerate(zip(at_risk, ev)):
        if n_i > 0:
            s *= 1.0 - d_i / n_i
        surv[i] = s
    return SurvivalCurve(times, at_risk, ev, surv)


def first_missed_round(events: pd.DataFrame, participants: Iterable, n_rounds: int = 5,
                       window_hours: float = 48.0) -> pd.DataFrame:
    """Per participant: the first round whose nudge got no reply within the window.

    Participants who replied in time after every nudge are censored at the
    final round.
    """
    ev = events
    if len(ev) and "phase" in ev.columns:
        ev = ev[ev["phase"] == "intervention"]
    replies = ev[(ev["kind"] == "reply") & (ev["hours_after_nudge"] <= window_hours)] if len(ev) else ev
    quick = set(zip(replies["participant_id"], replies["round"])) if len(replies) else set()
    rows = []
    for pid in participants:
        missed = next((r for r in range(1, n_rounds + 1) if (pid, r) not in quick), None)
        if missed is None:
            rows.append((pid, n_rounds, False))
        else:
            rows.append((pid, missed, True))
    return pd.DataFrame(rows, columns=["participant_id", "duration", "event"])


def km_survival(events: pd.DataFrame, arm_map: dict, n_rounds: int = 5,
                window_hours: float = 48.0) -> dict[str, SurvivalCurve]:
    """Kaplan-Meier curve per arm for time to the first unanswered nudge."""
    out = {}
    rounds = list(range(1, n_rounds + 1))
    for arm in ARMS:
        members = [p for p, a in arm_map.items() if a == arm]
        if not members:
            continue
        dur = first_missed_round(events, members, n_rounds, window_hours)
        out[arm] = product_limit(dur["duration"], dur["event"], rounds)
    return out


def cumulative_trajectory(
    round_means: pd.DataFrame,
    participants: pd.DataFrame,
    covariates: Sequence[str] = COVARIATES,
    n_rounds: int = 5,
) -> pd.DataFrame:
    """Net cumulative saving rates by round, treatment minus control.

    Args:
        round_means: columns participant_id, round, value (mean over the
            round's valid days).
        participants: one row per participant with arm, baseline and the
            covariate columns.

    For round k the outcome is each participant's mean over rounds 1..k; the
    adjusted model is refit and saving rates are taken against the baseline
    mean of the analytic sample.
    """
    rm = round_means.pivot(index="participant_id", columns="round", values="value")
    rows = []
    for k in range(1, n_rounds + 1):
        cols = [r for r in range(1, k + 1) if r in rm.columns]
        cum = rm[cols].mean(axis=1, skipna=True).rename("outcome")
        d = participants.drop(columns=["outcome"], errors="ignore").join(cum, on="participant_id")
        d = d.dropna(subset=["outcome"])
        model = fit_adjusted(d, "outcome", covariates)
        base = float(d["baseline"].mean())
        rates = saving_rate(model, base)
        for arm in TREATED:
            rows.append({
                "round": k, "arm": arm,
                "saving_rate": rates[arm], "control_rate": rates["C"],
                "net_saving_rate": rates[arm] - rates["C"],
            })
    return pd.DataFrame(rows)
