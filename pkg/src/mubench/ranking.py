"""Group assignment, rank tables, and the Pareto frontier.

Per-metric values are clustered into three quality tiers (G1 best); failed
methods are filed under F before clustering so they cannot distort the
cluster geometry. Tier counts across settings then produce the final rank
table, and (RetDev, Indisc) pairs produce a dominance frontier.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, Iterable, Optional, Sequence, Tuple

import numpy as np
from scipy.cluster.hierarchy import fcluster, linkage

from .errors import NonFiniteInput, TooFewMethods

GROUP_LABELS = ("G1", "G2", "G3")

# reference rows never compete for groups, ranks, or the frontier
REFERENCE_ROWS = ("original", "retrain")


@dataclass(frozen=True)
class GroupAssignment:
    """One metric's tiering of methods for a single setting."""

    metric: str
    better: str
    groups: Dict[str, str]
    means: Dict[str, float]
    degenerate: bool = False

    def members(self, label: str) -> Tuple[str, ...]:
        return tuple(sorted(m for m, g in self.groups.items() if g == label))


def _is_failed(v) -> bool:
    return v is None or not math.isfinite(float(v))


def cluster_groups(values: Dict[str, float], better: str = "lower", metric: str = "") -> GroupAssignment:
    """Ward-linkage agglomerative clustering of 1-D metric values, cut at
    three clusters, labeled G1/G2/G3 by mean in the better-direction.

    Failed entries (None or non-finite) go to F untouched. With fewer than
    three finite values a three-way cut is impossible: everything finite
    falls back to G1 and the assignment is flagged degenerate, as it is when
    forced splits leave cluster means tied.
    """
    if better not in ("lower", "higher"):
        raise ValueError(f"better must be 'lower' or 'higher', got {better!r}")
    groups: Dict[str, str] = {}
    finite = {}
    for m, v in values.items():
        if _is_failed(v):
            groups[m] = "F"
        else:
            finite[m] = float(v)
    if not finite:
        raise TooFewMethods(f"no finite values to cluster for {metric or 'metric'}")

    names = sorted(finite)
    vals = np.array([finite[m] for m in names], dtype=np.float64)

    if len(names) < 3:
        for m in names:
            groups[m] = "G1"
        return GroupAssignment(
            metric=metric,
            better=better,
            groups=groups,
            means={"G1": float(vals.mean())},
            degenerate=True,
        )

    Z = linkage(vals.reshape(-1, 1), method="ward")
    raw = fcluster(Z, t=3, criterion="maxclust")
    ids = sorted(set(raw))
    cluster_means = {cid: float(vals[raw == cid].mean()) for cid in ids}
    order = sorted(ids, key=lambda cid: cluster_means[cid], reverse=(better == "higher"))

    label_of = {cid: GROUP_LABELS[i] for i, cid in enumerate(order)}
    for m, cid in zip(names, raw):
        groups[m] = label_of[cid]
    means = {label_of[cid]: cluster_means[cid] for cid in order}

    ordered = [cluster_means[cid] for cid in order]
    strict = all(a > b for a, b in zip(ordered, ordered[1:])) if better == "higher" else all(
        a < b for a, b in zip(ordered, ordered[1:])
    )
    degenerate = len(ids) < 3 or not strict
    return GroupAssignment(metric=metric, better=better, groups=groups, means=means, degenerate=degenerate)


@dataclass(frozen=True)
class RankRow:
    method: str
    g1: int
    g2: int
    g3: int
    f: int
    rank: int


def count_groups(assignments: Sequence[GroupAssignment], methods: Optional[Iterable[str]] = None) -> Dict[str, Tuple[int, int, int, int]]:
    """Tally per-method G1/G2/G3/F appearances across settings."""
    if methods is None:
        universe = sorted({m for a in assignments for m in a.groups})
    else:
        universe = list(methods)
    counts = {m: [0, 0, 0, 0] for m in universe}
    slot = {"G1": 0, "G2": 1, "G3": 2, "F": 3}
    for a in assignments:
        for m, label in a.groups.items():
            if m in counts:
                counts[m][slot[label]] += 1
    return {m: tuple(c) for m, c in counts.items()}


def _rank_key(counts) -> Tuple[int, int, int]:
    g1, g2, g3 = counts[0], counts[1], counts[2]
    return (-g1, -g2, -g3)


def rank_methods(counts: Dict[str, Sequence[int]]) -> Tuple[RankRow, ...]:
    """Order methods by G1 count, ties by G2, then by G3; identical count
    triples share a (dense) rank."""
    items = sorted(counts.items(), key=lambda kv: (_rank_key(kv[1]), kv[0]))
    rows = []
    rank = 0
    prev_key = None
    for method, c in items:
        key = _rank_key(c)
        if key != prev_key:
            rank += 1
            prev_key = key
        g1, g2, g3 = int(c[0]), int(c[1]), int(c[2])
        f = int(c[3]) if len(c) > 3 else 0
        rows.append(RankRow(method=method, g1=g1, g2=g2, g3=g3, f=f, rank=rank))
    return tuple(rows)


def pareto_frontier(points: Dict[str, Tuple[float, float]]) -> frozenset:
    """Non-dominated subset of (retdev, indisc) points: retdev is minimized,
    indisc maximized. A point is dominated iff some other point is <= in
    retdev and >= in indisc with at least one strict. Identical points are
    all retained."""
    for m, (rd, ind) in points.items():
        if not (math.isfinite(rd) and math.isfinite(ind)):
            raise NonFiniteInput(f"non-finite frontier point for {m!r}")
    if not points:
        return frozenset()

    by_retdev: Dict[float, list] = {}
    for m, (rd, ind) in points.items():
        by_retdev.setdefault(float(rd), []).append((m, float(ind)))

    kept = []
    best_below = -math.inf  # best indisc among strictly smaller retdev
    for rd in sorted(by_retdev):
        group = by_retdev[rd]
        group_max = max(ind for _, ind in group)
        if group_max > best_below:
            kept.extend(m for m, ind in group if ind == group_max)
        best_below = max(best_below, group_max)
    return frozenset(kept)


def format_rank_table(rows: Sequence[RankRow]) -> str:
    """Fixed-width text table with columns Rank, Method, G1, G2, G3, F."""
    header = ("Rank", "Method", "G1", "G2", "G3", "F")
    cells = [header] + [
        (str(r.rank), r.method, str(r.g1), str(r.g2), str(r.g3), str(r.f)) for r in rows
    ]
    widths = [max(len(row[i]) for row in cells) for i in range(len(header))]
    lines = []
    for i, row in enumerate(cells):
        lines.append("  ".join(v.ljust(w) for v, w in zip(row, widths)).rstrip())
        if i == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"
