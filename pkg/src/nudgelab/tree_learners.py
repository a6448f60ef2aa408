"""Regression trees, bagged forests and squared-loss gradient boosting.

All learners share one CART grower compiled with numba. Splits maximize the
reduction in sum of squared errors; candidate thresholds are midpoints between
consecutive distinct feature values. Ties in gain go to the lowest feature
index, then to the lowest threshold, so fits are reproducible bit for bit.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Any

import numba
import numpy as np

FORMAT_VERSION = 1

_LEAF = -1


@numba.njit(cache=True)
def _best_split(X, y, idx, features, n_required, min_leaf):
    """Search features in the given order; evaluate at least ``n_required``.

    Keeps going past ``n_required`` until some feature yields a valid split.
    Returns (feature, threshold, gain) with feature -1 when nothing splits.
    """
    n = idx.shape[0]
    total = 0.0
    for i in range(n):
        total += y[idx[i]]
    parent = total * total / n
    sse = 0.0
    mean = total / n
    for i in range(n):
        d = y[idx[i]] - mean
        sse += d * d

    best_gain = -1.0
    best_feat = -1
    best_thr = 0.0
    evaluated = 0
    xs = np.empty(n)
    ys = np.empty(n)
    for fi in range(features.shape[0]):
        if evaluated >= n_required and best_feat >= 0:
            break
        f = features[fi]
        for i in range(n):
            xs[i] = X[idx[i], f]
        order = np.argsort(xs, kind="mergesort")
        for i in range(n):
            ys[i] = y[idx[order[i]]]
        evaluated += 1
        left = 0.0
        for i in range(n - 1):
            left += ys[i]
            n_left = i + 1
            if n_left < min_leaf:
                continue
            n_right = n - n_left
            if n_right < min_leaf:
                break
            lo = xs[order[i]]
            hi = xs[order[i + 1]]
            if not lo < hi:
                continue
            right = total - left
            gain = left * left / n_left + right * right / n_right - parent
            thr = 0.5 * (lo + hi)
            if not thr < hi:
                thr = lo
            if gain > best_gain:
                best_gain = gain
                best_feat = f
                best_thr = thr
            elif gain == best_gain and best_feat >= 0:
                if f < best_feat or (f == best_feat and thr < best_thr):
                    best_feat = f
                    best_thr = thr
    if best_feat < 0 or not best_gain > 1e-12 * sse or sse <= 0.0:
        return -1, 0.0, 0.0
    return best_feat, best_thr, best_gain


@numba.njit(cache=True)
def _grow(X, y, sample, max_depth, min_leaf, max_features, seed):
    np.random.seed(seed)
    p = X.shape[1]
    cap = 2 * sample.shape[0] + 1
    feature = np.full(cap, -1, dtype=np.int64)
    threshold = np.zeros(cap)
    left = np.full(cap, -1, dtype=np.int64)
    right = np.full(cap, -1, dtype=np.int64)
    value = np.zeros(cap)
    gain = np.zeros(cap)
    count = np.zeros(cap, dtype=np.int64)

    # explicit stack of (node id, depth, start, stop) into a working index buffer
    buf = sample.copy()
    tmp = np.empty_like(buf)
    stack_node = np.empty(cap, dtype=np.int64)
    stack_depth = np.empty(cap, dtype=np.int64)
    stack_lo = np.empty(cap, dtype=np.int64)
    stack_hi = np.empty(cap, dtype=np.int64)
    stack_node[0] = 0
    stack_depth[0] = 0
    stack_lo[0] = 0
    stack_hi[0] = buf.shape[0]
    top = 1
    n_nodes = 1
    all_features = np.arange(p)
    while top > 0:
        top -= 1
        node = stack_node[top]
        depth = stack_depth[top]
        lo = stack_lo[top]
        hi = stack_hi[top]
        idx = buf[lo:hi]
        m = hi - lo
        s = 0.0
        for i in range(m):
            s += y[idx[i]]
        value[node] = s / m
        count[node] = m
        if (max_depth >= 0 and depth >= max_depth) or m < 2 * min_leaf:
            continue
        if max_features < p:
            order = np.random.permutation(p)
        else:
            order = all_features
        f, thr, g = _best_split(X, y, idx, order, max_features, min_leaf)
        if f < 0:
            continue
        nl = 0
        nr = 0
        for i in range(m):
            j = idx[i]
            if X[j, f] <= thr:
                tmp[lo + nl] = j
                nl += 1
        for i in range(m):
            j = idx[i]
            if not X[j, f] <= thr:
                tmp[lo + nl + nr] = j
                nr += 1
        for i in range(m):
            buf[lo + i] = tmp[lo + i]
        feature[node] = f
        threshold[node] = thr
        gain[node] = g
        lnode = n_nodes
        rnode = n_nodes + 1
        n_nodes += 2
        left[node] = lnode
        right[node] = rnode
        stack_node[top] = rnode
        stack_depth[top] = depth + 1
        stack_lo[top] = lo + nl
        stack_hi[top] = hi
        top += 1
        stack_node[top] = lnode
        stack_depth[top] = depth + 1
        stack_lo[top] = lo
        stack_hi[top] = lo + nl
        top += 1
    return (feature[:n_nodes], threshold[:n_nodes], left[:n_nodes],
            right[:n_nodes], value[:n_nodes], gain[:n_nodes], count[:n_nodes])


@numba.njit(cache=True)
def _predict(X, feature, threshold, left, right, value):
    out = np.empty(X.shape[0])
    for i in range(X.shape[0]):
        node = 0
        while feature[node] >= 0:
            if X[i, feature[node]] <= threshold[node]:
                node = left[node]
            else:
                node = right[node]
        out[i] = value[node]
    return out


@numba.njit(cache=True)
def _apply(X, feature, threshold, left, right):
    out = np.empty(X.shape[0], dtype=np.int64)
    for i in range(X.shape[0]):
        node = 0
        while feature[node] >= 0:
            if X[i, feature[node]] <= threshold[node]:
                node = left[node]
            else:
                node = right[node]
        out[i] = node
    return out


def _as_xy(X, y=None):
    X = np.ascontiguousarray(np.asarray(X, dtype=np.float64))
    if X.ndim == 1:
        X = X.reshape(-1, 1)
    if y is None:
        return X
    y = np.ascontiguousarray(np.asarray(y, dtype=np.float64))
    if y.shape[0] != X.shape[0]:
        raise ValueError(f"X has {X.shape[0]} rows but y has {y.shape[0]}")
    return X, y


@dataclass
class RegressionTree:
    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    gain: np.ndarray
    n_samples: np.ndarray
    n_features: int
    max_depth: int | None = None
    min_leaf: int = 1

    @property
    def n_leaves(self) -> int:
        return int(np.sum(self.feature == _LEAF))

    @property
    def is_leaf(self) -> bool:
        return self.feature.shape[0] == 1

    def predict(self, X) -> np.ndarray:
        X = _as_xy(X)
        return _predict(X, self.feature, self.threshold, self.left, self.right, self.value)

    def apply(self, X) -> np.ndarray:
        """Leaf node id reached by each row."""
        X = _as_xy(X)
        return _apply(X, self.feature, self.threshold, self.left, self.right)

    def feature_gain(self) -> np.ndarray:
        out = np.zeros(self.n_features)
        internal = self.feature >= 0
        np.add.at(out, self.feature[internal], self.gain[internal])
        return out

    def to_dict(self) -> dict[str, Any]:
        return {
            "feature": self.feature.tolist(),
            "threshold": self.threshold.tolist(),
            "left": self.left.tolist(),
            "right": self.right.tolist(),
            "value": self.value.tolist(),
            "gain": self.gain.tolist(),
            "n_samples": self.n_samples.tolist(),
            "n_features": self.n_features,
            "max_depth": self.max_depth,
            "min_leaf": self.min_leaf,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> RegressionTree:
        return cls(
            feature=np.asarray(d["feature"], dtype=np.int64),
            threshold=np.asarray(d["threshold"], dtype=np.float64),
            left=np.asarray(d["left"], dtype=np.int64),
            right=np.asarray(d["right"], dtype=np.int64),
            value=np.asarray(d["value"], dtype=np.float64),
            gain=np.asarray(d["gain"], dtype=np.float64),
            n_samples=np.asarray(d["n_samples"], dtype=np.int64),
            n_features=int(d["n_features"]),
            max_depth=d["max_depth"],
            min_leaf=int(d["min_leaf"]),
        )


def fit_tree(
    X,
    y,
    max_depth: int | None = None,
    min_leaf: int = 1,
    max_features: int | None = None,
    sample: np.ndarray | None = None,
    seed: int = 0,
) -> RegressionTree:
    """Grow a CART regression tree by exhaustive variance-reduction search.

    Args:
        X: (n, p) feature matrix.
        y: (n,) targets.
        max_depth: depth limit; None grows until leaves are pure or too small.
        min_leaf: minimum number of (possibly repeated) samples per leaf.
        max_features: features drawn per node; None means all of them.
        sample: row indices to train on, duplicates allowed (bootstrap).
        seed: seeds the per-node feature draw.

    A constant target, or fewer than ``2 * min_leaf`` samples, yields a
    single leaf predicting the mean.
    """
    X, y = _as_xy(X, y)
    n, p = X.shape
    if n == 0:
        raise ValueError("cannot fit a tree on zero rows")
    if min_leaf < 1:
        raise ValueError("min_leaf must be >= 1")
    if sample is None:
        sample = np.arange(n, dtype=np.int64)
    else:
        sample = np.ascontiguousarray(sample, dtype=np.int64)
    mf = p if max_features is None else int(min(max(max_features, 1), p))
    depth = -1 if max_depth is None else int(max_depth)
    arrays = _grow(X, y, sample, depth, int(min_leaf), mf, int(seed) % (2**32))
    return RegressionTree(*arrays, n_features=p, max_depth=max_depth, min_leaf=min_leaf)


def _child_seeds(seed: int, count: int) -> list[int]:
    ss = np.random.SeedSequence(seed)
    return [int(c.generate_state(1)[0]) for c in ss.spawn(count)]


@dataclass
class ForestModel:
    trees: list[RegressionTree]
    tree_seeds: list[int]
    samples: list[np.ndarray | None]
    train_mean: float
    n_features: int
    max_features: int
    min_leaf: int
    bootstrap: bool
    seed: int

    def predict(self, X) -> np.ndarray:
        X = _as_xy(X)
        if not self.trees:
            return np.full(X.shape[0], self.train_mean)
        acc = np.zeros(X.shape[0])
        for t in self.trees:
            acc += t.predict(X)
        return acc / len(self.trees)

    def oob_predict(self, X_train) -> np.ndarray:
        """Out-of-bag prediction for each training row.

        Rows that landed in every bootstrap sample fall back to the full
        forest prediction.
        """
        X_train = _as_xy(X_train)
        n = X_train.shape[0]
        if not self.bootstrap:
            raise ValueError("out-of-bag prediction needs bootstrap samples")
        acc = np.zeros(n)
        cnt = np.zeros(n)
        for t, s in zip(self.trees, self.samples):
            inbag = np.zeros(n, dtype=bool)
            inbag[s] = True
            out = ~inbag
            if out.any():
                acc[out] += t.predict(X_train[out])
                cnt[out] += 1
        pred = np.empty(n)
        have = cnt > 0
        pred[have] = acc[have] / cnt[have]
        if (~have).any():
            pred[~have] = self.predict(X_train[~have])
        return pred

    def feature_gain(self) -> np.ndarray:
        out = np.zeros(self.n_features)
        for t in self.trees:
            out += t.feature_gain()
        return out


def fit_forest(
    X,
    y,
    trees: int = 2000,
    seed: int = 0,
    max_depth: int | None = None,
    min_leaf: int = 5,
    max_features: int | float | None = "sqrt",
    bootstrap: bool = True,
) -> ForestModel:
    """Bagged regression forest; prediction is the mean over trees.

    ``max_features`` accepts ``"sqrt"``, a fraction in (0, 1], an int, or None
    for all features. Each tree gets its own child seed, so results do not
    depend on the order trees are grown in.
    """
    X, y = _as_xy(X, y)
    n, p = X.shape
    if n < 4:
        raise ValueError(f"forest needs at least 4 rows, got {n}")
    if max_features == "sqrt":
        mf = max(1, int(math.floor(math.sqrt(p))))
    elif max_features is None:
        mf = p
    elif isinstance(max_features, float) and max_features <= 1.0:
        mf = max(1, int(round(max_features * p)))
    else:
        mf = int(max_features)
    mf = min(mf, p)
    seeds = _child_seeds(seed, trees)
    fitted: list[RegressionTree] = []
    samples: list[np.ndarray | None] = []
    for s in seeds:
        if bootstrap:
            rng = np.random.default_rng(s)
            sample = np.sort(rng.integers(0, n, n))
        else:
            sample = np.arange(n)
        fitted.append(fit_tree(X, y, max_depth=max_depth, min_leaf=min_leaf,
                               max_features=mf, sample=sample, seed=s))
        samples.append(sample if bootstrap else None)
    return ForestModel(
        trees=fitted, tree_seeds=seeds, samples=samples, train_mean=float(y.mean()),
        n_features=p, max_features=mf, min_leaf=min_leaf, bootstrap=bootstrap, seed=seed,
    )


@dataclass
class BoostConfig:
    n_trees: int = 300
    learning_rate: float = 0.1
    max_depth: int = 3
    min_leaf: int = 1

    def validate(self) -> None:
        if not 0.0 < self.learning_rate <= 1.0:
            raise ValueError(f"learning_rate must be in (0, 1], got {self.learning_rate}")
        if self.n_trees < 1:
            raise ValueError("n_trees must be >= 1")
        if self.max_depth < 1:
            raise ValueError("max_depth must be >= 1")


@dataclass
class BoostModel:
    trees: list[RegressionTree]
    init: float
    learning_rate: float
    n_features: int
    train_loss: list[float]
    config: BoostConfig

    def predict(self, X, n_trees: int | None = None) -> np.ndarray:
        X = _as_xy(X)
        out = np.full(X.shape[0], self.init)
        for t in self.trees[:n_trees]:
            out += self.learning_rate * t.predict(X)
        return out

    def feature_gain(self) -> np.ndarray:
        out = np.zeros(self.n_features)
        for t in self.trees:
            out += t.feature_gain()
        return out

    def to_json(self) -> str:
        return json.dumps({
            "format": "nudgelab.boost",
            "version": FORMAT_VERSION,
            "init": self.init,
            "learning_rate": self.learning_rate,
            "n_features": self.n_features,
            "train_loss": self.train_loss,
            "config": vars(self.config),
            "trees": [t.to_dict() for t in self.trees],
        })

    @classmethod
    def from_json(cls, text: str) -> BoostModel:
        d = json.loads(text)
        if d.get("format") != "nudgelab.boost" or d.get("version") != FORMAT_VERSION:
            raise ValueError("not a nudgelab boost model of a supported version")
        return cls(
            trees=[RegressionTree.from_dict(t) for t in d["trees"]],
            init=float(d["init"]),
            learning_rate=float(d["learning_rate"]),
            n_features=int(d["n_features"]),
            train_loss=list(d["train_loss"]),
            config=BoostConfig(**d["config"]),
        )


def fit_boost(X, y, config: BoostConfig | None = None) -> BoostModel:
    """Stagewise least-squares boosting: each tree fits the current residuals."""
    config = config or BoostConfig()
    config.validate()
    X, y = _as_xy(X, y)
    init = float(y.mean())
    pred = np.full(y.shape[0], init)
    trees: list[RegressionTree] = []
    losses = [float(np.mean((y - pred) ** 2))]
    for _ in range(config.n_trees):
        resid = y - pred
        t = fit_tree(X, resid, max_depth=config.max_depth, min_leaf=config.min_leaf)
        if t.is_leaf and abs(t.value[0]) < 1e-15:
            break
        pred = pred + config.learning_rate * t.predict(X)
        trees.append(t)
        losses.append(float(np.mean((y - pred) ** 2)))
    return BoostModel(trees=trees, init=init, learning_rate=config.learning_rate,
                      n_features=X.shape[1], train_loss=losses, config=config)


@dataclass
class Importance:
    values: np.ndarray
    zero_gain: bool


def importance(model: BoostModel | ForestModel) -> Importance:
    """Total split gain per feature divided by total gain over all features.

    A model without any split (constant target) returns all zeros with
    ``zero_gain`` set.
    """
    g = model.feature_gain()
    total = g.sum()
    if total <= 0.0:
        return Importance(values=np.zeros_like(g), zero_gain=True)
    return Importance(values=g / total, zero_gain=False)
