"""Boosted-tree predictors of intervention-period consumption.

Gain importances are normalized to sum to one and rolled up into four
categories: baseline consumption, psychological profile, socio-structural
background and intervention-related measures (nudge type, chatbot use).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
import pandas as pd

from .profile_store import PSYCH_CONSTRUCTS
from .tree_learners import BoostConfig, fit_boost, fit_forest, fit_tree, importance

CATEGORY_NAMES = ("baseline_consumption", "psychological", "socio_structural", "intervention_related")

DEFAULT_CATEGORIES: dict[str, str] = {
    "baseline": "baseline_consumption",
    **{c: "psychological" for c in PSYCH_CONSTRUCTS},
    "living_budget": "socio_structural",
    "gender": "socio_structural",
    "bill_experience": "socio_structural",
    "arm_T1": "intervention_related",
    "arm_T2": "intervention_related",
    "chat_sessions": "intervention_related",
    "avg_chat_length": "intervention_related",
}
FEATURES = tuple(DEFAULT_CATEGORIES)


@dataclass
class ImportanceProfile:
    features: tuple[str, ...]
    values: np.ndarray
    categories: dict[str, str]
    phase: str = "whole"
    zero_gain: bool = False

    def of(self, feature: str) -> float:
        return float(self.values[self.features.index(feature)])

    @property
    def rollup(self) -> dict[str, float]:
        out = {c: 0.0 for c in CATEGORY_NAMES}
        for f, v in zip(self.features, self.values):
            out[self.categories[f]] += float(v)
        return out

    def frame(self) -> pd.DataFrame:
        return pd.DataFrame({
            "feature": list(self.features),
            "category": [self.categories[f] for f in self.features],
            "phase": self.phase,
            "importance": self.values,
        })

    def top(self) -> str:
        return self.features[int(np.argmax(self.values))]


def arm_dummies(arms: Sequence[str]) -> pd.DataFrame:
    a = np.asarray(arms)
    return pd.DataFrame({"arm_T1": (a == "T1").astype(float), "arm_T2": (a == "T2").astype(float)})


def fit_importance(features: pd.DataFrame, outcome, phase: str = "whole",
                   config: BoostConfig | None = None,
                   categories: Mapping[str, str] | None = None) -> ImportanceProfile:
    """Boost ``outcome`` on ``features`` and return normalized gain importances.

    Columns are fitted in sorted-name order so the profile does not depend on
    how the caller ordered them. A constant outcome yields an all-zero profile
    with ``zero_gain`` set.
    """
    cats = dict(categories or DEFAULT_CATEGORIES)
    unknown = [c for c in features.columns if c not in cats]
    if unknown:
        raise KeyError(f"features without a category: {unknown}")
    bad = {c for c in cats.values()} - set(CATEGORY_NAMES)
    if bad:
        raise ValueError(f"unknown categories {sorted(bad)}")
    cols = tuple(sorted(features.columns))
    X = features[list(cols)].to_numpy(dtype=float)
    y = np.asarray(outcome, dtype=float)
    if len(y) != len(X):
        raise ValueError("features and outcome lengths differ")
    model = fit_boost(X, y, config or BoostConfig())
    imp = importance(model)
    return ImportanceProfile(cols, imp.values, {c: cats[c] for c in cols}, phase, imp.zero_gain)


def phase_comparison(features: pd.DataFrame, outcomes: Mapping[str, np.ndarray],
                     phases: Sequence[str] = ("early", "late"),
                     config: BoostConfig | None = None,
                     categories: Mapping[str, str] | None = None) -> dict[str, ImportanceProfile]:
    """Same features and hyperparameters refit per phase outcome.

    Rows with a missing outcome in a phase are dropped for that phase only.
    """
    out = {}
    for ph in phases:
        y = np.asarray(outcomes[ph], dtype=float)
        ok = np.isfinite(y)
        if not ok.any() or np.ptp(y[ok]) == 0:
            raise ValueError(f"phase {ph!r} outcome is degenerate")
        out[ph] = fit_importance(features[ok].reset_index(drop=True), y[ok], ph, config, categories)
    return out


def _ols_fit_predict(Xtr, ytr, Xte):
    A = np.column_stack([np.ones(len(Xtr)), Xtr])
    beta, *_ = np.linalg.lstsq(A, ytr, rcond=None)
    return np.column_stack([np.ones(len(Xte)), Xte]) @ beta


@dataclass
class ModelComparison:
    table: pd.DataFrame
    winner: str
    note: str = field(default="neural network baseline omitted")


def compare_models(X, y, folds: int = 5, seed: int = 0, forest_trees: int = 200,
                   boost: BoostConfig | None = None) -> ModelComparison:
    """Five-fold cross-validated RMSE for least squares, one tree, a forest and boosting."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    n = len(y)
    if n < folds * 2:
        raise ValueError(f"need at least {2 * folds} rows for {folds}-fold CV")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 31]))
    fold = rng.permutation(n) % folds
    boost = boost or BoostConfig()
    learners = {
        "least_squares": _ols_fit_predict,
        "tree": lambda a, b, c: fit_tree(a, b, max_depth=4, min_leaf=5).predict(c),
        "forest": lambda a, b, c: fit_forest(a, b, trees=forest_trees, seed=seed).predict(c),
        "boost": lambda a, b, c: fit_boost(a, b, boost).predict(c),
    }
    rows = []
    for name, fn in learners.items():
        sq = np.empty(n)
        for f in range(folds):
            te = fold == f
            sq[te] = (fn(X[~te], y[~te], X[te]) - y[te]) ** 2
        rows.append({"model": name, "cv_rmse": float(np.sqrt(sq.mean()))})
    table = pd.DataFrame(rows)
    winner = str(table.sort_values(["cv_rmse", "model"]).iloc[0]["model"])
    return ModelComparison(table, winner)


def importance_table(profiles: Sequence[ImportanceProfile]) -> pd.DataFrame:
    return pd.concat([p.frame() for p in profiles], ignore_index=True)
