"""Phase trajectories of consumption change and their behavioral archetypes.

Each participant is summarized by three relative changes against baseline
(early = rounds 1-2, middle = rounds 3-4, late = round 5). Trajectories are
split by the sign of their mean change and each subset is clustered with
complete-linkage agglomeration on correlation distance, so clusters group
shapes rather than levels.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import pandas as pd

from .samples import PHASES

logger = logging.getLogger(__name__)

PHASE_NAMES = tuple(PHASES)
DECREASE_LABELS = ("quick", "gradual", "rebound")
INCREASE_LABELS = ("late", "adverse")
ARCHETYPES = DECREASE_LABELS + INCREASE_LABELS
TARGETS = {"decrease": 3, "increase": 2}
MERGE_THRESHOLD = 0.05
# spread below which a trajectory counts as constant (correlation undefined)
CONSTANT_TOL = 1e-12
ZERO_TOL = 1e-9


class UndefinedCorrelationError(ValueError):
    pass


@dataclass(frozen=True)
class Trajectory:
    participant_id: str
    early: float
    middle: float
    late: float

    @property
    def values(self) -> np.ndarray:
        return np.array([self.early, self.middle, self.late])

    @property
    def direction(self) -> str:
        return "increase" if self.values.mean() > 0 else "decrease"

    @property
    def is_constant(self) -> bool:
        return float(np.ptp(self.values)) <= CONSTANT_TOL


def build_trajectories(phase_means: pd.DataFrame, baseline: pd.Series) -> list[Trajectory]:
    """Relative change (phase mean - baseline) / baseline per phase.

    Args:
        phase_means: wide frame indexed by participant_id with early, middle,
            late columns.
        baseline: baseline mean per participant_id.
    Participants missing any phase or with a non-positive baseline are skipped.
    """
    out = []
    for pid, row in phase_means.sort_index().iterrows():
        b = baseline.get(pid, np.nan)
        vals = [row.get(p, np.nan) for p in PHASE_NAMES]
        if not np.isfinite(b) or b <= 0 or not np.all(np.isfinite(vals)):
            continue
        rel = [(v - b) / b for v in vals]
        out.append(Trajectory(str(pid), *rel))
    return out


def corr_distance(x, y) -> float:
    """One minus the Pearson correlation; in [0, 2]."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.ndim != 1 or len(x) < 2:
        raise ValueError("need two 1-d vectors of equal length >= 2")
    xc, yc = x - x.mean(), y - y.mean()
    nx, ny = np.sqrt(xc @ xc), np.sqrt(yc @ yc)
    if nx <= CONSTANT_TOL or ny <= CONSTANT_TOL:
        raise UndefinedCorrelationError("correlation undefined for a constant vector")
    d = 1.0 - float(xc @ yc / (nx * ny))
    # snap rounding noise at the ends of the range
    if d < 1e-12:
        return 0.0
    if d > 2.0 - 1e-12:
        return 2.0
    return d


def distance_matrix(vectors: np.ndarray) -> np.ndarray:
    n = len(vectors)
    d = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            d[i, j] = d[j, i] = corr_distance(vectors[i], vectors[j])
    return d


@dataclass
class Merge:
    left: int
    right: int
    distance: float
    new_id: int
    size: int


@dataclass
class Dendrogram:
    """Merge history plus flat assignment at the chosen cut.

    Leaves are ids 0..n-1 in input order; the k-th merge creates id n+k.
    ``labels[i]`` is the id of the terminal cluster holding leaf i.
    """

    n_leaves: int
    merges: list[Merge]
    labels: np.ndarray
    cut_index: int = field(default=0)

    def clusters(self) -> dict[int, list[int]]:
        out: dict[int, list[int]] = {}
        for i, c in enumerate(self.labels):
            out.setdefault(int(c), []).append(i)
        return dict(sorted(out.items()))


def agglomerate(dist: np.ndarray, stop_at: int = 1) -> list[Merge]:
    """Complete-linkage merge sequence for a distance matrix.

    At each step the pair of active clusters with the smallest linkage
    distance is merged; exact ties go to the lexicographically smallest
    (id, id) pair. Stops when ``stop_at`` clusters remain.
    """
    n = len(dist)
    size = {i: 1 for i in range(n)}
    link = {(i, j): float(dist[i, j]) for i in range(n) for j in range(i + 1, n)}
    merges = []
    next_id = n
    while len(size) > stop_at:
        (a, b), d = min(link.items(), key=lambda kv: (kv[1], kv[0]))
        size[next_id] = size.pop(a) + size.pop(b)
        # complete linkage: max over the two merged parts (exact, no rounding)
        for c in size:
            if c == next_id:
                continue
            link[(c, next_id)] = max(link[_key(a, c)], link[_key(b, c)])
        link = {k: v for k, v in link.items() if a not in k and b not in k}
        merges.append(Merge(a, b, d, next_id, size[next_id]))
        next_id += 1
    return merges


def _key(i: int, j: int) -> tuple[int, int]:
    return (i, j) if i < j else (j, i)


def _labels_after(n: int, merges: Sequence[Merge]) -> np.ndarray:
    owner = {i: [i] for i in range(n)}
    for m in merges:
        owner[m.new_id] = owner.pop(m.left) + owner.pop(m.right)
    labels = np.empty(n, dtype=int)
    for cid, leaves in owner.items():
        labels[leaves] = cid
    return labels


def complete_linkage_cluster(vectors: np.ndarray, n_clusters: int,
                             merge_threshold: float = MERGE_THRESHOLD) -> Dendrogram:
    """Agglomerate down to ``n_clusters``, then keep merging near-identical shapes.

    After the target count is reached, further merges happen only while the
    next linkage distance is below ``merge_threshold``.
    """
    vectors = np.asarray(vectors, dtype=float)
    n = len(vectors)
    if n_clusters < 1:
        raise ValueError("n_clusters must be >= 1")
    if n < n_clusters:
        raise ValueError(f"{n} trajectories cannot form {n_clusters} clusters")
    dist = distance_matrix(vectors)
    full = agglomerate(dist)
    cut = n - n_clusters
    while cut < len(full) and full[cut].distance < merge_threshold:
        cut += 1
    merges = full[:cut]
    return Dendrogram(n_leaves=n, merges=full, labels=_labels_after(n, merges), cut_index=cut)


@dataclass
class ArchetypeAssignment:
    participant_id: str
    direction: str
    archetype: str | None
    early: float
    middle: float
    late: float
    cluster_mean: tuple[float, float, float] | None = None


def label_clusters(means: dict[int, np.ndarray], direction: str) -> dict[int, str]:
    """Name clusters from their mean (early, middle, late) shape.

    Decrease: the most negative early mean is quick; of the rest, a cluster
    with early < 0 and late > middle is rebound and the others gradual.
    Increase: late < early is a late responder, otherwise adverse. When two
    clusters qualify for a single-slot label, the one with the lower mean
    early value takes it.
    """
    order = sorted(means, key=lambda c: (means[c][0], c))
    labels: dict[int, str] = {}
    if direction == "decrease":
        if not order:
            return labels
        labels[order[0]] = "quick"
        rebound_taken = False
        for c in order[1:]:
            e, m, l = means[c]
            if not rebound_taken and e < 0 and l > m:
                labels[c] = "rebound"
                rebound_taken = True
            else:
                labels[c] = "gradual"
    elif direction == "increase":
        late_taken = False
        for c in order:
            e, _, l = means[c]
            if not late_taken and l < e:
                labels[c] = "late"
                late_taken = True
            else:
                labels[c] = "adverse"
    else:
        raise ValueError(f"unknown direction {direction!r}")
    return labels


def assign_archetypes(trajectories: Sequence[Trajectory], targets: dict[str, int] | None = None,
                      merge_threshold: float = MERGE_THRESHOLD) -> list[ArchetypeAssignment]:
    """Archetype per trajectory, sorted by participant id.

    Constant trajectories skip clustering: negative ones are gradual, positive
    ones adverse, and zero ones are returned with ``archetype=None``.
    """
    targets = targets or TARGETS
    trajs = sorted(trajectories, key=lambda t: t.participant_id)
    ids = [t.participant_id for t in trajs]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate participant ids")
    out: dict[str, ArchetypeAssignment] = {}
    for t in trajs:
        if t.is_constant:
            v = t.early
            arch = None if abs(v) <= ZERO_TOL else ("gradual" if v < 0 else "adverse")
            out[t.participant_id] = ArchetypeAssignment(t.participant_id, t.direction, arch,
                                                        t.early, t.middle, t.late)
    for direction, k in targets.items():
        sub = [t for t in trajs if not t.is_constant and t.direction == direction]
        if not sub:
            continue
        kk = min(k, len(sub))
        if kk < k:
            logger.warning("%s subset has %d trajectories; using %d clusters", direction, len(sub), kk)
        vecs = np.array([t.values for t in sub])
        dend = complete_linkage_cluster(vecs, kk, merge_threshold)
        groups = dend.clusters()
        means = {c: vecs[idx].mean(axis=0) for c, idx in groups.items()}
        names = label_clusters(means, direction)
        for c, idx in groups.items():
            for i in idx:
                t = sub[i]
                out[t.participant_id] = ArchetypeAssignment(
                    t.participant_id, direction, names[c], t.early, t.middle, t.late,
                    tuple(float(x) for x in means[c]))
    return [out[i] for i in sorted(out)]


def archetype_shares(assignments: Sequence[ArchetypeAssignment], arm_map: dict[str, str]) -> pd.DataFrame:
    """Percentage of each arm's classified participants in each archetype."""
    rows = [(arm_map[a.participant_id], a.archetype) for a in assignments if a.archetype is not None]
    df = pd.DataFrame(rows, columns=["arm", "archetype"])
    tab = pd.crosstab(df["arm"], df["archetype"]).reindex(columns=list(ARCHETYPES), fill_value=0)
    pct = tab.div(tab.sum(axis=1), axis=0) * 100.0
    return pct.reset_index().rename_axis(None, axis=1)


ASSIGNMENT_COLUMNS = ("participant_id", "direction", "archetype", "early", "middle", "late")


def write_assignments(path, assignments: Sequence[ArchetypeAssignment]) -> None:
    rows = [{c: getattr(a, c) for c in ASSIGNMENT_COLUMNS} for a in assignments]
    pd.DataFrame(rows, columns=list(ASSIGNMENT_COLUMNS)).to_csv(path, index=False)
