"""Neighbor-activity features, transition priors, popularity features and monitor sets."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy import sparse

from .corpus import SECONDS_PER_DAY, UserRef
from .graph import UserGraph
from .narrative import EmergenceEvent

logger = logging.getLogger(__name__)

DEFAULT_WINDOW = 7
MONITOR_STRATEGIES = ("all", "random", "popularity", "cross_degree")
FEATURE_HEADER = (
    "cluster_id", "source", "target", "t_day", "horizon_days",
    "sum_active", "sum_total", "mean_ratio", "transition_prior", "y",
)


@dataclass(frozen=True)
class FeatureRow:
    cluster_id: int
    source: str
    target: str
    t: int
    horizon: int
    sum_active: int
    sum_total: int
    mean_ratio: float
    transition_prior: float = 0.0
    y: int | None = None
    flagged: bool = False

    @property
    def key(self) -> tuple[int, str, str, int, int]:
        return (self.cluster_id, self.source, self.target, self.t, self.horizon)


class ActivityLog:
    """Days on which each user posted in each cluster."""

    def __init__(self) -> None:
        self._days: dict[tuple[UserRef, int], list[int]] = {}

    def add(self, user: UserRef, cluster: int, day: int) -> None:
        self._days.setdefault((user, cluster), []).append(day)

    def posted_within(self, user: UserRef, cluster: int, lo: int, hi: int) -> bool:
        days = self._days.get((user, cluster))
        if not days:
            return False
        arr = np.asarray(days)
        return bool(np.any((arr >= lo) & (arr <= hi)))


@dataclass
class WarningCounter:
    unknown_users: int = 0
    empty_monitor: int = 0


def neighbor_activity(
    user: UserRef,
    cluster: int,
    t: int,
    graph: UserGraph,
    log: ActivityLog,
    source: str,
    window: int = DEFAULT_WINDOW,
    warnings: WarningCounter | None = None,
) -> tuple[int, int]:
    """(active, total) source-platform neighbors of ``user`` for ``cluster`` at day ``t``.

    ``total`` counts neighbors on ``source``; ``active`` counts those with a post
    in ``cluster`` on a day in ``[t - window, t]``.
    """
    if user not in graph:
        if warnings is not None:
            warnings.unknown_users += 1
        return 0, 0
    active = total = 0
    for nbr, _ in graph.neighbors(user):
        if nbr.platform != source:
            continue
        total += 1
        if log.posted_within(nbr, cluster, t - window, t):
            active += 1
    return active, total


@dataclass
class MonitorSet:
    selected: dict[str, set[UserRef]]
    strategy: str = "all"
    quantile: float = 1.0

    def for_platform(self, platform: str) -> set[UserRef]:
        return self.selected.get(platform, set())

    def mask(self, graph: UserGraph) -> np.ndarray:
        out = np.zeros(graph.n_users, dtype=bool)
        for users in self.selected.values():
            for u in users:
                if u in graph:
                    out[graph.index_of(u)] = True
        return out


def instance_features(
    cluster: int,
    source: str,
    target: str,
    t: int,
    graph: UserGraph,
    monitor: MonitorSet,
    log: ActivityLog,
    horizon: int = 0,
    window: int = DEFAULT_WINDOW,
    warnings: WarningCounter | None = None,
) -> FeatureRow:
    """Sum neighbor activity over the monitored users of ``target``."""
    users = sorted(monitor.for_platform(target))
    if not users:
        if warnings is not None:
            warnings.empty_monitor += 1
        return FeatureRow(cluster, source, target, t, horizon, 0, 0, 0.0, flagged=True)
    sa = st = 0
    ratios = []
    for u in users:
        a, n = neighbor_activity(u, cluster, t, graph, log, source, window, warnings)
        sa += a
        st += n
        if n > 0:
            ratios.append(a / n)
    return FeatureRow(cluster, source, target, t, horizon, sa, st, float(np.mean(ratios)) if ratios else 0.0)


def select_monitor(
    graph: UserGraph,
    strategy: str = "all",
    quantile: float = 1.0,
    seed: int = 0,
    engagement: Mapping[UserRef, float] | None = None,
) -> MonitorSet:
    """Per-platform monitor selection keeping ``ceil(quantile * n_platform_users)`` users."""
    if strategy not in MONITOR_STRATEGIES:
        raise ValueError(f"unknown monitor strategy {strategy!r}")
    if not 0.0 < quantile <= 1.0:
        raise ValueError("quantile out of (0,1]")
    by_platform: dict[str, list[int]] = {}
    for i, u in enumerate(graph.users):
        by_platform.setdefault(u.platform, []).append(i)
    rng = np.random.default_rng(seed)
    deg = graph.cross_degrees() if strategy == "cross_degree" else None
    selected: dict[str, set[UserRef]] = {}
    for plat in sorted(by_platform):
        idx = np.asarray(by_platform[plat])
        n_keep = len(idx) if strategy == "all" else max(1, math.ceil(quantile * len(idx) - 1e-9))
        if strategy == "all" or n_keep >= len(idx):
            chosen = idx
        elif strategy == "random":
            chosen = np.sort(rng.choice(idx, size=n_keep, replace=False))
        elif strategy == "popularity":
            eng = np.asarray([float((engagement or {}).get(graph.users[i], 0.0)) for i in idx])
            # users are sorted, so a stable sort on -score breaks ties by UserRef
            chosen = idx[np.argsort(-eng, kind="stable")[:n_keep]]
        else:
            chosen = idx[np.argsort(-deg[idx], kind="stable")[:n_keep]]
        selected[plat] = {graph.users[i] for i in chosen}
    return MonitorSet(selected, strategy, quantile)


# -- vectorized proximity features ----------------------------------------


@dataclass
class _PairWeights:
    active_w: np.ndarray
    ratio_w: np.ndarray
    sum_total: int
    n_with_total: int


class ProximityIndex:
    """Per-snapshot precomputation of neighbor-activity aggregates.

    For a (source, target) pair, ``sum_active`` for every cluster is one
    sparse product: how many monitored target users point at each source user,
    dotted with the users' in-window cluster indicators.
    """

    def __init__(self, graph: UserGraph, monitor_mask: np.ndarray, platforms: Sequence[str]):
        self.graph = graph
        self.monitor_mask = monitor_mask
        self.platforms = tuple(platforms)
        code = {p: i for i, p in enumerate(self.platforms)}
        self.user_platform = np.asarray([code[u.platform] for u in graph.users], dtype=np.int64)
        self._adj = graph.adjacency()
        self._cache: dict[tuple[int, int], _PairWeights] = {}

    def weights(self, src: int, tgt: int) -> _PairWeights:
        key = (src, tgt)
        w = self._cache.get(key)
        if w is None:
            rows = np.flatnonzero(self.monitor_mask & (self.user_platform == tgt))
            on_src = (self.user_platform == src).astype(np.float64)
            sub = self._adj[rows]
            totals = sub @ on_src
            active_w = np.asarray(sub.sum(axis=0)).ravel() * on_src
            has = totals > 0
            inv = np.zeros_like(totals)
            inv[has] = 1.0 / totals[has]
            if len(rows):
                ratio_w = np.asarray((sparse.diags(inv) @ sub).sum(axis=0)).ravel() * on_src
            else:
                ratio_w = np.zeros(self.graph.n_users)
            w = _PairWeights(active_w, ratio_w, int(round(totals.sum())), int(has.sum()))
            self._cache[key] = w
        return w

    def compute(
        self,
        window_users: np.ndarray,
        window_clusters: np.ndarray,
        instances: Sequence[tuple[int, int, int]],
    ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Features for ``(cluster, src_code, tgt_code)`` instances.

        ``window_users`` are graph row indices (``-1`` for users outside the
        snapshot) of posts in the activity window, parallel to
        ``window_clusters``.
        """
        n = len(instances)
        sa = np.zeros(n, dtype=np.int64)
        st = np.zeros(n, dtype=np.int64)
        mr = np.zeros(n)
        if not n:
            return sa, st, mr
        keep = window_users >= 0
        u, c = window_users[keep], window_clusters[keep]
        cids = np.unique(c)
        I = sparse.csr_matrix(
            (np.ones(len(u)), (u, np.searchsorted(cids, c))), shape=(self.graph.n_users, len(cids))
        )
        I.data[:] = 1.0
        I.sum_duplicates()
        I.data[:] = 1.0
        inst = np.asarray(instances, dtype=np.int64).reshape(-1, 3)
        pairs = {(int(s), int(t)) for s, t in inst[:, 1:]}
        for s, t in sorted(pairs):
            w = self.weights(s, t)
            rows = np.flatnonzero((inst[:, 1] == s) & (inst[:, 2] == t))
            want = inst[rows, 0]
            col = np.searchsorted(cids, want)
            present = col < len(cids)
            present[present] = cids[col[present]] == want[present]
            act = I.T @ w.active_w
            rat = I.T @ w.ratio_w
            sa[rows[present]] = np.rint(act[col[present]]).astype(np.int64)
            if w.n_with_total:
                mr[rows[present]] = rat[col[present]] / w.n_with_total
            st[rows] = w.sum_total
        return sa, st, np.clip(mr, 0.0, 1.0)


# -- transition priors ----------------------------------------------------


@dataclass
class TransitionMatrix:
    platforms: tuple[str, ...]
    counts: np.ndarray

    def prob(self, source: str, target: str) -> float:
        s = self.platforms.index(source)
        t = self.platforms.index(target)
        P = len(self.platforms)
        return float((self.counts[s, t] + 1) / (self.counts[s].sum() + P))

    def probabilities(self) -> np.ndarray:
        P = len(self.platforms)
        return (self.counts + 1) / (self.counts.sum(axis=1, keepdims=True) + P)


def transition_matrix(events: Iterable[EmergenceEvent], platforms: Sequence[str], before_ts: int | None = None) -> TransitionMatrix:
    """Counts of source->target emergences with ``target_threshold_ts < before_ts``."""
    platforms = tuple(platforms)
    counts = np.zeros((len(platforms), len(platforms)), dtype=np.int64)
    for e in events:
        if before_ts is not None and e.target_threshold_ts >= before_ts:
            continue
        counts[platforms.index(e.source), platforms.index(e.target)] += 1
    return TransitionMatrix(platforms, counts)


def transition_prior(
    events: Iterable[EmergenceEvent], source: str, target: str, platforms: Sequence[str], before_ts: int | None = None
) -> float:
    """Laplace-smoothed ``P(target | source)`` from emergences observed before ``before_ts``."""
    return transition_matrix(events, platforms, before_ts).prob(source, target)


def prior_cutoff_ts(t_day: int) -> int:
    """Emergences are usable at day ``t`` when their threshold crossing precedes the day."""
    return t_day * SECONDS_PER_DAY


# -- popularity -----------------------------------------------------------


def popularity_features(
    daily_posts: np.ndarray,
    daily_engagement: np.ndarray,
    t: int,
    window: int = DEFAULT_WINDOW,
) -> tuple[float, float, float]:
    """(growth_rate, engagement_velocity, steepness) from one cluster's source series.

    ``daily_posts[d]``/``daily_engagement[d]`` are post counts and likes+shares
    on day ``d``. Growth is posts in ``[t - window, t]`` per hour of a
    ``window``-day span; steepness is the least-squares slope of cumulative
    counts over the trailing ``window`` days.
    """
    posts = np.asarray(daily_posts, dtype=np.float64)
    eng = np.asarray(daily_engagement, dtype=np.float64)
    lo = max(0, t - window)
    n = posts[lo:t + 1].sum()
    growth = n / (window * 24.0)
    velocity = eng[lo:t + 1].sum() / n if n > 0 else 0.0
    cum = np.cumsum(posts[:t + 1])
    days = np.arange(max(0, t - window + 1), t + 1)
    if len(days) >= 2:
        y = cum[days]
        x = days - days.mean()
        steep = float((x * (y - y.mean())).sum() / (x * x).sum())
    else:
        steep = 0.0
    return float(growth), float(velocity), steep


def write_features(rows: Iterable[FeatureRow], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(FEATURE_HEADER)
        for r in rows:
            w.writerow((
                r.cluster_id, r.source, r.target, r.t, r.horizon,
                r.sum_active, r.sum_total, f"{r.mean_ratio:.10g}", f"{r.transition_prior:.10g}",
                "" if r.y is None else r.y,
            ))


def read_features(path: str | Path) -> list[FeatureRow]:
    with open(path, newline="", encoding="utf-8") as fh:
        return [
            FeatureRow(
                int(r["cluster_id"]), r["source"], r["target"], int(r["t_day"]), int(r["horizon_days"]),
                int(r["sum_active"]), int(r["sum_total"]), float(r["mean_ratio"]), float(r["transition_prior"]),
                int(r["y"]) if r["y"] != "" else None,
            )
            for r in csv.DictReader(fh)
        ]
