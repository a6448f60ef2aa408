"""Individual treatment effects from S, T, X and doubly-robust meta-learners.

Each contrast (T1 vs C, T2 vs C) is estimated on the two-arm subset with
five-fold cross-fitting: a participant's score comes only from models
trained on the other folds. The reported ensemble is the equal-weight mean
of the four learners. Negative scores mean lower consumption under
treatment.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import pandas as pd

from .tree_learners import fit_forest

logger = logging.getLogger(__name__)

LEARNERS = ("S", "T", "X", "DR")
PROPENSITY_CLIP = (0.05, 0.95)


@dataclass
class ForestParams:
    trees: int = 200
    min_leaf: int = 5
    max_features: int | float | str | None = "sqrt"
    max_depth: int | None = None


@dataclass
class ITEScore:
    participant_id: str
    contrast: str
    S: float
    T: float
    X: float
    DR: float
    ensemble: float
    units: str


def clamp_propensity(e: float) -> float:
    lo, hi = PROPENSITY_CLIP
    if e < lo or e > hi:
        warnings.warn(f"propensity {e:.3f} clamped to [{lo}, {hi}]", RuntimeWarning, stacklevel=2)
        return min(max(e, lo), hi)
    return e


def dr_pseudo_outcome(y: np.ndarray, treated: np.ndarray, mu1: np.ndarray, mu0: np.ndarray,
                      e1: float) -> np.ndarray:
    """psi = mu1 - mu0 + A (Y - mu1) / e1 - (1 - A) (Y - mu0) / (1 - e1)."""
    a = treated.astype(float)
    return mu1 - mu0 + a * (y - mu1) / e1 - (1 - a) * (y - mu0) / (1 - e1)


def stratified_folds(treated: np.ndarray, k: int, seed: int) -> np.ndarray:
    """Fold id per row with each arm spread evenly over the folds."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 7919]))
    folds = np.empty(len(treated), dtype=int)
    for arm in (0, 1):
        idx = np.flatnonzero(treated == arm)
        if len(idx) < k:
            raise ValueError(f"arm {'treated' if arm else 'control'} has {len(idx)} rows, "
                             f"fewer than {k} folds")
        idx = idx[rng.permutation(len(idx))]
        folds[idx] = np.arange(len(idx)) % k
    return folds


def _forest(X, y, params: ForestParams, seed: int):
    return fit_forest(X, y, trees=params.trees, seed=seed, min_leaf=params.min_leaf,
                      max_features=params.max_features, max_depth=params.max_depth)


def _seed(base: int, *parts: int) -> int:
    return int(np.random.SeedSequence([base, *parts]).generate_state(1)[0])


def fit_learners_fold(X_tr, y_tr, a_tr, X_te, e1: float, params: ForestParams, seed: int,
                      s_params: ForestParams | None = None) -> dict[str, np.ndarray]:
    """All four learners trained on one split; returns effects for ``X_te``."""
    out = {}
    s_params = s_params or params
    # S: single model with the treatment indicator as an extra feature
    Xa = np.column_stack([X_tr, a_tr])
    s_model = _forest(Xa, y_tr, s_params, _seed(seed, 1))
    out["S"] = (s_model.predict(np.column_stack([X_te, np.ones(len(X_te))]))
                - s_model.predict(np.column_stack([X_te, np.zeros(len(X_te))])))
    # T: separate outcome models per arm
    t1, t0 = a_tr == 1, a_tr == 0
    mu1 = _forest(X_tr[t1], y_tr[t1], params, _seed(seed, 2))
    mu0 = _forest(X_tr[t0], y_tr[t0], params, _seed(seed, 3))
    out["T"] = mu1.predict(X_te) - mu0.predict(X_te)
    # X: impute effects with the opposite arm's model, regress, blend by propensity
    d1 = y_tr[t1] - mu0.predict(X_tr[t1])
    d0 = mu1.predict(X_tr[t0]) - y_tr[t0]
    tau1 = _forest(X_tr[t1], d1, params, _seed(seed, 4))
    tau0 = _forest(X_tr[t0], d0, params, _seed(seed, 5))
    out["X"] = e1 * tau0.predict(X_te) + (1 - e1) * tau1.predict(X_te)
    # DR: own-arm nuisance predictions are out-of-bag so residuals are honest
    m1 = np.empty(len(y_tr))
    m0 = np.empty(len(y_tr))
    m1[t1] = mu1.oob_predict(X_tr[t1])
    m1[t0] = mu1.predict(X_tr[t0])
    m0[t0] = mu0.oob_predict(X_tr[t0])
    m0[t1] = mu0.predict(X_tr[t1])
    psi = dr_pseudo_outcome(y_tr, a_tr, m1, m0, e1)
    dr = _forest(X_tr, psi, params, _seed(seed, 6))
    out["DR"] = dr.predict(X_te)
    return out


@dataclass
class ITEResult:
    scores: list[ITEScore]
    folds: np.ndarray
    propensity: float

    def frame(self) -> pd.DataFrame:
        return pd.DataFrame([vars(s) for s in self.scores])

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(s, name) for s in self.scores])


def estimate_ites(
    features: np.ndarray | pd.DataFrame,
    outcomes: np.ndarray,
    arms: Sequence[str],
    contrast: str,
    participant_ids: Sequence[str] | None = None,
    folds: int = 5,
    seed: int = 0,
    params: ForestParams | None = None,
    assignment_shares: dict[str, float] | None = None,
    units: str = "",
    s_params: ForestParams | None = None,
) -> ITEResult:
    """Cross-fitted ITE scores for ``contrast`` (an arm name) against C.

    Args:
        features: (n, p) covariates for every participant (all arms).
        outcomes: (n,) outcomes.
        arms: arm label per row.
        contrast: treated arm, e.g. "T2".
        assignment_shares: known randomization share per arm; defaults to
            the observed shares. The propensity used inside the two-arm
            subset is share[contrast] / (share[contrast] + share[C]).
    """
    params = params or ForestParams()
    X = np.asarray(features, dtype=float)
    y = np.asarray(outcomes, dtype=float)
    arms = np.asarray(arms)
    if participant_ids is None:
        participant_ids = [str(i) for i in range(len(y))]
    pids = np.asarray(participant_ids)
    keep = (arms == contrast) | (arms == "C")
    if not (arms == contrast).any() or not (arms == "C").any():
        raise ValueError(f"contrast {contrast} vs C needs both arms present")
    if assignment_shares is None:
        vals, counts = np.unique(arms, return_counts=True)
        assignment_shares = dict(zip(vals.tolist(), (counts / counts.sum()).tolist()))
    e1 = clamp_propensity(assignment_shares[contrast] / (assignment_shares[contrast] + assignment_shares["C"]))
    Xs, ys, a, ps = X[keep], y[keep], (arms[keep] == contrast).astype(int), pids[keep]
    fold_id = stratified_folds(a, folds, seed)
    est = {m: np.empty(len(ys)) for m in LEARNERS}
    for f in range(folds):
        te = fold_id == f
        tr = ~te
        got = fit_learners_fold(Xs[tr], ys[tr], a[tr], Xs[te], e1, params, _seed(seed, 100 + f), s_params)
        for m in LEARNERS:
            est[m][te] = got[m]
    scores = []
    for i, pid in enumerate(ps):
        vals = {m: float(est[m][i]) for m in LEARNERS}
        ens = float(np.mean([vals[m] for m in LEARNERS]))
        scores.append(ITEScore(str(pid), f"{contrast} vs C", vals["S"], vals["T"], vals["X"], vals["DR"],
                               ens, units))
    return ITEResult(scores=scores, folds=fold_id, propensity=e1)


@dataclass
class QuartileComparison:
    n_top: int
    n_rest: int
    table: pd.DataFrame = field(repr=False)


def top_quartile_profile(scores: Sequence[ITEScore], profiles: pd.DataFrame,
                         columns: Sequence[str] = ("psych_mean", "living_budget")) -> QuartileComparison:
    """Compare the most responsive quarter (most negative ensemble) with the rest.

    ``profiles`` is keyed by participant_id and holds ``columns``. Equal
    scores are ordered by participant id.
    """
    if len(scores) < 8:
        raise ValueError(f"need at least 8 scores, got {len(scores)}")
    ranked = sorted(scores, key=lambda s: (s.ensemble, s.participant_id))
    n_top = len(ranked) // 4
    top = {s.participant_id for s in ranked[:n_top]}
    prof = profiles.set_index("participant_id")
    ids = [s.participant_id for s in ranked]
    sub = prof.loc[ids, list(columns)]
    is_top = np.array([i in top for i in ids])
    rows = []
    for c in columns:
        rows.append({"characteristic": c,
                     "top_quartile": float(sub.loc[is_top, c].mean()),
                     "remainder": float(sub.loc[~is_top, c].mean())})
    ens = np.array([s.ensemble for s in ranked])
    rows.append({"characteristic": "ensemble_ite", "top_quartile": float(ens[is_top].mean()),
                 "remainder": float(ens[~is_top].mean())})
    return QuartileComparison(n_top=n_top, n_rest=len(ranked) - n_top, table=pd.DataFrame(rows))


ITE_COLUMNS = ("participant_id", "contrast", "S", "T", "X", "DR", "ensemble", "units")


def write_ites(path, scores: Sequence[ITEScore]) -> None:
    pd.DataFrame([vars(s) for s in scores], columns=list(ITE_COLUMNS)).to_csv(path, index=False)
