"""Narrative clustering (streaming and batch DP-Means), timelines and labels."""

from __future__ import annotations

import base64
import csv
import json
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .corpus import SECONDS_PER_DAY

DEFAULT_LAMBDA = 0.10
EMERGENCE_THRESHOLD = 10
PRECEDENCE_SECONDS = 48 * 3600
HORIZONS = (3, 7, 14)
# float32 embeddings accumulate rounding in the dot product
_ASSIGN_EPS = 1e-6


@dataclass
class NarrativeCluster:
    cluster_id: int
    centroid: np.ndarray
    size: int
    created_day: int
    per_platform_daily_counts: dict[str, dict[int, int]] = field(default_factory=dict)
    member_sample: list[str] = field(default_factory=list)

    def count_on(self, platform: str) -> int:
        return sum(self.per_platform_daily_counts.get(platform, {}).values())


class ClusterStore:
    """Single-writer streaming DP-Means store.

    A point joins the nearest centroid when its cosine distance is at most
    ``lam``; otherwise it opens a new cluster. Centroids are the renormalized
    running sum of members. Each cluster keeps a bounded reservoir of member
    vectors for the periodic refresh sweep.
    """

    def __init__(
        self,
        lam: float = DEFAULT_LAMBDA,
        dim: int = 256,
        reservoir_size: int = 128,
        seed: int = 0,
        refresh_every: int = 2,
        exposure_lag: int = 2,
    ):
        if not 0.0 < lam < 1.0:
            raise ValueError("lambda out of (0,1)")
        self.lam = lam
        self.dim = dim
        self.reservoir_size = reservoir_size
        self.refresh_every = refresh_every
        self.exposure_lag = exposure_lag
        self.last_refresh_day: int | None = None
        self.clusters: dict[int, NarrativeCluster] = {}
        self._rng = random.Random(seed)
        self._sums: dict[int, np.ndarray] = {}
        self._seen: dict[int, int] = {}
        self._samples: dict[int, list[np.ndarray]] = {}
        self._alias: dict[int, int] = {}
        self._next_id = 0
        self._live_ids = np.zeros(0, dtype=np.int64)
        self._matrix = np.zeros((0, dim), dtype=np.float64)

    # -- assignment -------------------------------------------------------

    def _rebuild_matrix(self) -> None:
        ids = sorted(self.clusters)
        self._live_ids = np.asarray(ids, dtype=np.int64)
        if ids:
            self._matrix = np.stack([self.clusters[i].centroid for i in ids]).astype(np.float64)
        else:
            self._matrix = np.zeros((0, self.dim), dtype=np.float64)

    def nearest(self, vec: np.ndarray) -> tuple[int, float]:
        """Nearest live cluster id and its cosine distance; ``(-1, inf)`` when empty."""
        if not len(self._live_ids):
            return -1, float("inf")
        sims = self._matrix @ vec
        j = int(np.argmax(sims))
        return int(self._live_ids[j]), 1.0 - float(sims[j])

    def assign(self, vec: np.ndarray, platform: str = "", day: int = 0, post_id: str = "") -> int:
        v = np.asarray(vec, dtype=np.float64)
        cid, dist = self.nearest(v)
        if cid >= 0 and dist <= self.lam + _ASSIGN_EPS:
            # joins only the nearest centroid, and only within lam
            assert 1.0 - float(self._matrix[int(np.searchsorted(self._live_ids, cid))] @ v) <= self.lam + _ASSIGN_EPS
            cl = self.clusters[cid]
            s = self._sums[cid]
            s += v
            cl.centroid = s / np.linalg.norm(s)
            j = int(np.searchsorted(self._live_ids, cid))
            self._matrix[j] = cl.centroid
            cl.size += 1
        else:
            # a new cluster opens only when every live centroid is farther than lam
            assert cid < 0 or dist > self.lam + _ASSIGN_EPS
            cid = self._next_id
            self._next_id += 1
            cl = NarrativeCluster(cid, v.copy(), 1, day)
            self.clusters[cid] = cl
            self._sums[cid] = v.copy()
            self._seen[cid] = 0
            self._samples[cid] = []
            self._live_ids = np.append(self._live_ids, cid)
            self._matrix = np.vstack([self._matrix, v[None, :]])
        daily = cl.per_platform_daily_counts.setdefault(platform, {})
        daily[day] = daily.get(day, 0) + 1
        self._reservoir_add(cid, post_id, v)
        return cid

    def _reservoir_add(self, cid: int, post_id: str, v: np.ndarray) -> None:
        self._seen[cid] += 1
        sample = self._samples[cid]
        ids = self.clusters[cid].member_sample
        if len(sample) < self.reservoir_size:
            sample.append(v.astype(np.float32))
            ids.append(post_id)
        else:
            r = self._rng.randrange(self._seen[cid])
            if r < self.reservoir_size:
                sample[r] = v.astype(np.float32)
                ids[r] = post_id

    # -- refresh ----------------------------------------------------------

    def refresh_due(self, now_day: int) -> bool:
        return self.last_refresh_day is None or now_day - self.last_refresh_day >= self.refresh_every

    def refresh(self, now_day: int) -> bool:
        """One reassignment sweep; returns False when called too early (no-op).

        In id order, a cluster whose centroid lies within ``lam`` of a
        lower-id survivor is absorbed by it. Otherwise its reservoir samples
        are reassigned to their nearest centroid under the DP-Means rule, and
        when a strict majority moves to one other cluster the whole cluster
        follows them. Surviving ids never change.
        """
        if not self.refresh_due(now_day):
            return False
        self.last_refresh_day = now_day
        ids = self._live_ids.copy()
        M = self._matrix.copy()
        alive = np.ones(len(ids), dtype=bool)
        for idx in range(len(ids)):
            cid = int(ids[idx])
            sims = M @ M[idx]
            sims[~alive] = -np.inf
            lower = sims[:idx]
            if idx and lower.max() >= 1.0 - self.lam:
                dst = int(np.argmax(lower))
                self._merge(cid, int(ids[dst]))
                M[dst] = self.clusters[int(ids[dst])].centroid
                alive[idx] = False
                continue
            # centroids this far apart cannot hold samples within lam of
            # either, so only near neighbours are vote candidates
            sims[idx] = -np.inf
            cand = np.flatnonzero(sims >= 1.0 - 4.0 * self.lam)
            samples = self._samples[cid]
            if not len(cand) or not samples:
                continue
            cols = np.r_[idx, cand]
            S = np.stack(samples).astype(np.float64) @ M[cols].T
            best = np.argmax(S, axis=1)
            within = 1.0 - S[np.arange(len(S)), best] <= self.lam
            votes = np.bincount(best[within & (best > 0)], minlength=len(cols))
            if votes.max() * 2 > len(samples):
                dst = int(cols[int(np.argmax(votes))])
                self._merge(cid, int(ids[dst]))
                M[dst] = self.clusters[int(ids[dst])].centroid
                alive[idx] = False
        self._rebuild_matrix()
        return True

    def _merge(self, src: int, dst: int) -> None:
        a = self.clusters.pop(src)
        b = self.clusters[dst]
        self._sums[dst] = self._sums[dst] + self._sums.pop(src)
        b.centroid = self._sums[dst] / np.linalg.norm(self._sums[dst])
        b.size += a.size
        b.created_day = min(a.created_day, b.created_day)
        for plat, daily in a.per_platform_daily_counts.items():
            tgt = b.per_platform_daily_counts.setdefault(plat, {})
            for d, n in daily.items():
                tgt[d] = tgt.get(d, 0) + n
        pooled = list(zip(b.member_sample, self._samples[dst])) + list(zip(a.member_sample, self._samples.pop(src)))
        if len(pooled) > self.reservoir_size:
            pooled = self._rng.sample(pooled, self.reservoir_size)
        b.member_sample = [pid for pid, _ in pooled]
        self._samples[dst] = [v for _, v in pooled]
        self._seen[dst] += self._seen.pop(src)
        self._alias[src] = dst

    def resolve(self, cid: int) -> int:
        """Follow merges to the surviving cluster id."""
        path = []
        while cid in self._alias:
            path.append(cid)
            cid = self._alias[cid]
        for p in path:
            self._alias[p] = cid
        return cid

    def resolve_many(self, ids: np.ndarray) -> np.ndarray:
        if not self._alias:
            return ids
        table = {i: self.resolve(i) for i in np.unique(ids).tolist()}
        return np.asarray([table[i] for i in ids.tolist()], dtype=np.int64)

    def alias_table(self) -> np.ndarray:
        """``table[i]`` is the surviving id of every id issued so far."""
        return np.asarray([self.resolve(i) for i in range(self._next_id)], dtype=np.int64)

    def exposed_ids(self, now_day: int) -> list[int]:
        """Clusters visible to prediction at ``now_day`` (created by ``now_day - exposure_lag``)."""
        return sorted(c for c, cl in self.clusters.items() if cl.created_day <= now_day - self.exposure_lag)

    @property
    def centroids(self) -> np.ndarray:
        return self._matrix.copy()

    def dump(self, path: str | Path) -> None:
        write_cluster_dump(self.clusters.values(), path)


def assign_streaming(vec: np.ndarray, store: ClusterStore, platform: str = "", day: int = 0, post_id: str = "") -> int:
    return store.assign(vec, platform, day, post_id)


def refresh(store: ClusterStore, now_day: int) -> bool:
    return store.refresh(now_day)


def write_cluster_dump(clusters: Iterable[NarrativeCluster], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for cl in sorted(clusters, key=lambda c: c.cluster_id):
            rec = {
                "cluster_id": cl.cluster_id,
                "size": cl.size,
                "centroid": base64.b64encode(np.asarray(cl.centroid, dtype="<f4").tobytes()).decode("ascii"),
                "per_platform_daily_counts": {
                    p: {str(d): n for d, n in sorted(daily.items())}
                    for p, daily in sorted(cl.per_platform_daily_counts.items())
                },
            }
            fh.write(json.dumps(rec, separators=(",", ":")) + "\n")


def decode_centroid(text: str) -> np.ndarray:
    return np.frombuffer(base64.b64decode(text), dtype="<f4").astype(np.float32)


# -- batch DP-Means -------------------------------------------------------


@dataclass
class BatchResult:
    assignments: np.ndarray
    centroids: np.ndarray
    objective: list[float]
    n_iter: int


def dpmeans_objective(vectors: np.ndarray, assignments: np.ndarray, centroids: np.ndarray, lam: float) -> float:
    """Total within-cluster cosine distance plus ``lam`` per cluster."""
    sims = np.einsum("ij,ij->i", vectors, centroids[assignments])
    return float(np.sum(1.0 - sims) + lam * len(centroids))


def batch_dpmeans(vectors: np.ndarray, lam: float = DEFAULT_LAMBDA, max_iters: int = 20) -> BatchResult:
    """Lloyd-style DP-Means on unit vectors, deterministic in input order.

    Each pass walks the points in order, joining the nearest centroid within
    ``lam`` or opening a new cluster; centroids are then recomputed as
    renormalized member means and empty clusters are dropped.
    """
    X = np.asarray(vectors, dtype=np.float64)
    n = len(X)
    if n == 0:
        return BatchResult(np.zeros(0, dtype=np.int64), np.zeros((0, X.shape[1] if X.ndim == 2 else 0)), [], 0)
    if max_iters < 1:
        raise ValueError("max_iters must be >= 1")
    centroids = X[:1].copy()
    assign = np.full(n, -1, dtype=np.int64)
    history: list[float] = []
    it = 0
    for it in range(1, max_iters + 1):
        new_assign = _dp_pass(X, centroids, lam)
        k = int(new_assign.max()) + 1
        sums = np.zeros((k, X.shape[1]))
        np.add.at(sums, new_assign, X)
        used = np.flatnonzero(np.bincount(new_assign, minlength=k) > 0)
        remap = np.full(k, -1, dtype=np.int64)
        remap[used] = np.arange(len(used))
        new_assign = remap[new_assign]
        sums = sums[used]
        centroids = sums / np.linalg.norm(sums, axis=1, keepdims=True)
        history.append(dpmeans_objective(X, new_assign, centroids, lam))
        if np.array_equal(new_assign, assign):
            break
        assign = new_assign
    return BatchResult(new_assign, centroids, history, it)


def _dp_pass(X: np.ndarray, centroids: np.ndarray, lam: float) -> np.ndarray:
    """One sequential DP-Means assignment pass (exact, vectorized where possible)."""
    n = len(X)
    k0 = len(centroids)
    old_sims = X @ centroids.T
    old_best = np.argmax(old_sims, axis=1)
    old_val = old_sims[np.arange(n), old_best]
    new_cents: list[np.ndarray] = []
    born_at: list[int] = []
    assign = np.empty(n, dtype=np.int64)
    # points that cannot join an old centroid must be walked in order; points
    # that can may still prefer a cluster born earlier in this pass
    for i in np.flatnonzero(1.0 - old_val > lam):
        best, val = int(old_best[i]), float(old_val[i])
        if new_cents:
            s = np.stack(new_cents) @ X[i]
            j = int(np.argmax(s))
            if s[j] > val:
                best, val = k0 + j, float(s[j])
        if 1.0 - val <= lam:
            assign[i] = best
        else:
            assign[i] = k0 + len(new_cents)
            new_cents.append(X[i])
            born_at.append(int(i))
    ok = np.flatnonzero(1.0 - old_val <= lam)
    assign[ok] = old_best[ok]
    if new_cents:
        s_new = X[ok] @ np.stack(new_cents).T
        s_new[np.asarray(born_at)[None, :] >= ok[:, None]] = -np.inf
        j = np.argmax(s_new, axis=1)
        better = s_new[np.arange(len(ok)), j] > old_val[ok]
        assign[ok[better]] = k0 + j[better]
    return assign


# -- timelines, emergences, labels ---------------------------------------


@dataclass
class Timelines:
    """Post-level table of (cluster, platform, timestamp) in replay order."""

    cluster: np.ndarray
    platform: np.ndarray
    ts: np.ndarray
    platforms: tuple[str, ...]

    @classmethod
    def from_records(cls, records: Iterable[tuple[int, str, int]], platforms: Sequence[str]) -> Timelines:
        code = {p: i for i, p in enumerate(platforms)}
        rows = list(records)
        return cls(
            np.asarray([r[0] for r in rows], dtype=np.int64),
            np.asarray([code[r[1]] for r in rows], dtype=np.int64),
            np.asarray([r[2] for r in rows], dtype=np.int64),
            tuple(platforms),
        )

    def restrict(self, mask: np.ndarray) -> Timelines:
        return Timelines(self.cluster[mask], self.platform[mask], self.ts[mask], self.platforms)

    @property
    def cluster_ids(self) -> np.ndarray:
        return np.unique(self.cluster)

    def first_seen(self) -> dict[int, tuple[int, int]]:
        """cluster -> (first timestamp, platform code); ties go to the lower platform code."""
        out: dict[int, tuple[int, int]] = {}
        order = np.lexsort((self.platform, self.ts))
        for i in order:
            c = int(self.cluster[i])
            if c not in out:
                out[c] = (int(self.ts[i]), int(self.platform[i]))
        return out

    def kth_timestamps(self, k: int) -> dict[tuple[int, int], int]:
        """(cluster, platform) -> timestamp of the k-th post, when it exists."""
        order = np.lexsort((self.ts, self.platform, self.cluster))
        c, p, t = self.cluster[order], self.platform[order], self.ts[order]
        out: dict[tuple[int, int], int] = {}
        if not len(c):
            return out
        start = np.flatnonzero(np.r_[True, (c[1:] != c[:-1]) | (p[1:] != p[:-1])])
        ends = np.r_[start[1:], len(c)]
        for s, e in zip(start, ends):
            if e - s >= k:
                out[(int(c[s]), int(p[s]))] = int(t[s + k - 1])
        return out

    def daily_counts(self, n_days: int) -> tuple[np.ndarray, np.ndarray]:
        """Dense ``counts[cluster_index, platform, day]`` and the cluster ids it indexes."""
        ids = self.cluster_ids
        idx = np.searchsorted(ids, self.cluster)
        days = self.ts // SECONDS_PER_DAY
        keep = (days >= 0) & (days < n_days)
        counts = np.zeros((len(ids), len(self.platforms), n_days), dtype=np.int64)
        np.add.at(counts, (idx[keep], self.platform[keep], days[keep]), 1)
        return counts, ids


@dataclass(frozen=True, order=True)
class EmergenceEvent:
    cluster_id: int
    source: str
    target: str
    source_first_ts: int
    target_threshold_ts: int


def detect_emergences(
    timelines: Timelines,
    threshold: int = EMERGENCE_THRESHOLD,
    precedence_seconds: int = PRECEDENCE_SECONDS,
) -> list[EmergenceEvent]:
    """One event per (cluster, first-observed platform, target) meeting the definition."""
    first = timelines.first_seen()
    kth = timelines.kth_timestamps(threshold)
    events = []
    for (c, p), t_k in kth.items():
        first_ts, src = first[c]
        if p == src:
            continue
        if t_k - first_ts >= precedence_seconds:
            events.append(EmergenceEvent(c, timelines.platforms[src], timelines.platforms[p], first_ts, t_k))
    return sorted(events)


@dataclass(frozen=True, order=True)
class LabelRow:
    t: int
    cluster_id: int
    source: str
    target: str
    horizon: int
    y: int


def active_mask(src_counts: np.ndarray, min_source_posts: int, window: int) -> np.ndarray:
    """``[..., day]`` mask: cumulative posts >= min and at least one post in [day-window, day]."""
    cum = np.cumsum(src_counts, axis=-1)
    recent = cum.copy()
    recent[..., window + 1:] -= cum[..., :-window - 1]
    return (cum >= min_source_posts) & (recent >= 1)


def make_labels(
    timelines: Timelines,
    eval_days: Iterable[int],
    horizons: Sequence[int] = HORIZONS,
    min_source_posts: int = 5,
    threshold: int = EMERGENCE_THRESHOLD,
    window: int = 7,
) -> list[LabelRow]:
    """Emergence labels for every eligible (cluster, source, target, day).

    Source is the cluster's first-observed platform. An instance exists when
    the cluster is active on the source at ``t`` and the target's cumulative
    count through day ``t`` is below ``threshold``; ``y`` is 1 when the target
    reaches the threshold during days ``t+1 .. t+horizon``.
    """
    eval_days = sorted(set(int(d) for d in eval_days))
    if not eval_days or not len(timelines.ts):
        return []
    n_days = max(int(timelines.ts.max()) // SECONDS_PER_DAY, eval_days[-1] + max(horizons)) + 1
    counts, ids = timelines.daily_counts(n_days)
    cum = np.cumsum(counts, axis=2)
    first = timelines.first_seen()
    rows: list[LabelRow] = []
    names = timelines.platforms
    for ci, c in enumerate(ids.tolist()):
        src = first[c][1]
        act = active_mask(counts[ci, src], min_source_posts, window)
        for t in eval_days:
            if t < 0 or not act[t]:
                continue
            for p in range(len(names)):
                if p == src or cum[ci, p, t] >= threshold:
                    continue
                for h in horizons:
                    y = int(cum[ci, p, min(t + h, n_days - 1)] >= threshold)
                    rows.append(LabelRow(t, c, names[src], names[p], h, y))
    rows.sort()
    return rows


LABEL_HEADER = ("cluster_id", "source", "target", "t_day", "horizon_days", "y")


def write_labels(rows: Iterable[LabelRow], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LABEL_HEADER)
        for r in rows:
            w.writerow((r.cluster_id, r.source, r.target, r.t, r.horizon, r.y))


def read_labels(path: str | Path) -> list[LabelRow]:
    with open(path, newline="", encoding="utf-8") as fh:
        rd = csv.DictReader(fh)
        return [
            LabelRow(int(r["t_day"]), int(r["cluster_id"]), r["source"], r["target"], int(r["horizon_days"]), int(r["y"]))
            for r in rd
        ]


def write_emergences(events: Iterable[EmergenceEvent], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("cluster_id", "source", "target", "source_first_ts", "target_threshold_ts"))
        for e in events:
            w.writerow((e.cluster_id, e.source, e.target, e.source_first_ts, e.target_threshold_ts))
