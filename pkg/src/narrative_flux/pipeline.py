"""Streaming orchestration from posts to the per-instance feature table.

Time is handled in corpus-relative units: day 0 is the UTC day of the
earliest post and relative timestamps count seconds from its midnight. Two
cluster streams run over the same replay:

* the ground-truth stream (claims, no refresh) whose assignment-time ids are
  immutable and define timelines, emergences, labels and window activity;
* the prediction stream (claims or raw text, refreshed) whose exposed clusters
  define the user participation matrix behind each graph snapshot.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import sparse

from .config import PipelineConfig
from .corpus import DEFAULT_PLATFORMS, SECONDS_PER_DAY, CorpusError, Post, UserRef, day_of
from .features import (
    FeatureRow,
    ProximityIndex,
    popularity_features,
    select_monitor,
    transition_matrix,
)
from .graph import ParticipationMatrix, UserGraph, build_baseline_graph, knn_graph, tfidf
from .narrative import ClusterStore, EmergenceEvent, Timelines, detect_emergences, make_labels
from .normalize import HashingEmbedder, NormalizerConfig, load_precomputed, normalize_posts, raw_text

logger = logging.getLogger(__name__)

DISCOURSE_COLUMNS = ("sum_active", "sum_total", "mean_ratio")
POPULARITY_COLUMNS = ("growth_rate", "engagement_velocity", "steepness")


class PipelineError(RuntimeError):
    """Data that cannot support the requested run."""


# -- corpus preparation ---------------------------------------------------


@dataclass
class PreparedCorpus:
    posts: list[Post]
    platforms: tuple[str, ...]
    origin_day: int
    rel_ts: np.ndarray
    day: np.ndarray
    plat: np.ndarray
    user_idx: np.ndarray
    users: list[UserRef]
    engagement: np.ndarray
    claim_vecs: np.ndarray
    claim_ok: np.ndarray
    claims: list[str]
    cfg: PipelineConfig
    _raw: tuple[np.ndarray, np.ndarray] | None = None

    @property
    def n_days(self) -> int:
        return int(self.day[-1]) + 1 if len(self.day) else 0

    @property
    def n_skipped(self) -> int:
        return int((~self.claim_ok).sum())

    def vectors(self, text_mode: str) -> tuple[np.ndarray, np.ndarray]:
        if text_mode == "claims":
            return self.claim_vecs, self.claim_ok
        if self._raw is None:
            emb = HashingEmbedder(self.cfg.embedding_dim, self.cfg.embedding_seed)
            self._raw = emb.embed_many([raw_text(p) for p in self.posts])
        return self._raw

    def day_range(self, lo: int, hi: int) -> slice:
        """Posts whose relative day lies in ``[lo, hi]``."""
        a = int(np.searchsorted(self.day, lo, side="left"))
        b = int(np.searchsorted(self.day, hi, side="right"))
        return slice(a, b)

    def count_through(self, day: int) -> int:
        return int(np.searchsorted(self.day, day, side="right"))


def prepare(posts: Sequence[Post], cfg: PipelineConfig, platforms: Sequence[str] | None = None) -> PreparedCorpus:
    """Normalize and embed a chronologically sorted post list."""
    posts = list(posts)
    if not posts:
        raise CorpusError("corpus is empty")
    for a, b in zip(posts, posts[1:]):
        if b.sort_key < a.sort_key:
            raise CorpusError(f"posts out of order at {b.post_id!r}")
    if platforms is None:
        seen = {p.platform for p in posts}
        platforms = [p for p in DEFAULT_PLATFORMS if p in seen] + sorted(seen - set(DEFAULT_PLATFORMS))
    platforms = tuple(platforms)
    code = {p: i for i, p in enumerate(platforms)}
    origin_day = day_of(posts[0].timestamp)
    ts = np.fromiter((p.timestamp for p in posts), dtype=np.int64, count=len(posts))
    rel_ts = ts - origin_day * SECONDS_PER_DAY
    users = sorted({p.author for p in posts})
    uidx = {u: i for i, u in enumerate(users)}
    n = len(posts)
    nc = cfg.normalizer
    result = normalize_posts(
        posts,
        NormalizerConfig(nc.mode, nc.endpoint, nc.prompt_template, nc.batch_size, nc.retries, max_in_flight=nc.max_in_flight),
    )
    claims = [c.text for c in result.claims]
    if cfg.embeddings_path:
        table = load_precomputed(cfg.embeddings_path, cfg.embedding_dim)
        vecs = np.zeros((n, cfg.embedding_dim), dtype=np.float32)
        ok = np.zeros(n, dtype=bool)
        for i, p in enumerate(posts):
            v = table.get(p.post_id)
            if v is not None:
                vecs[i] = v
                ok[i] = True
    else:
        vecs, ok = HashingEmbedder(cfg.embedding_dim, cfg.embedding_seed).embed_many(claims)
    ok &= np.fromiter((not c.skippable for c in result.claims), dtype=bool, count=n)
    if (~ok).any():
        logger.warning("skipping %d posts with no embeddable claim", int((~ok).sum()))
    return PreparedCorpus(
        posts=posts,
        platforms=platforms,
        origin_day=origin_day,
        rel_ts=rel_ts,
        day=rel_ts // SECONDS_PER_DAY,
        plat=np.fromiter((code[p.platform] for p in posts), dtype=np.int64, count=n),
        user_idx=np.fromiter((uidx[p.author] for p in posts), dtype=np.int64, count=n),
        users=users,
        engagement=np.fromiter((p.likes + p.shares for p in posts), dtype=np.float64, count=n),
        claim_vecs=vecs,
        claim_ok=ok,
        claims=claims,
        cfg=cfg,
    )


# -- cluster streams ------------------------------------------------------


@dataclass
class ClusterStream:
    ids: np.ndarray
    store: ClusterStore
    # day -> (alias table, exposed surviving ids) captured at the end of that day
    snapshots: dict[int, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)

    def resolved_through(self, day: int, prep: PreparedCorpus) -> tuple[np.ndarray, np.ndarray]:
        """Resolved ids of posts up to ``day`` and the exposed-cluster mask over them."""
        table, exposed = self.snapshots[day]
        n = prep.count_through(day)
        raw = self.ids[:n]
        res = np.full(n, -1, dtype=np.int64)
        ok = raw >= 0
        res[ok] = table[raw[ok]]
        return res, ok & np.isin(res, exposed)


def run_cluster_stream(
    prep: PreparedCorpus,
    vecs: np.ndarray,
    ok: np.ndarray,
    cfg: PipelineConfig,
    refresh: bool,
    snapshot_days: Sequence[int] = (),
) -> ClusterStream:
    store = ClusterStore(
        cfg.lam, vecs.shape[1], cfg.reservoir_size, seed=cfg.seed,
        refresh_every=cfg.refresh_days, exposure_lag=cfg.exposure_lag_days,
    )
    ids = np.full(len(prep.posts), -1, dtype=np.int64)
    want = set(int(d) for d in snapshot_days)
    out = ClusterStream(ids, store)
    vec64 = vecs.astype(np.float64)
    i = 0
    n = len(prep.posts)
    for d in range(prep.n_days):
        while i < n and prep.day[i] == d:
            if ok[i]:
                ids[i] = store.assign(vec64[i], prep.platforms[prep.plat[i]], d, prep.posts[i].post_id)
            i += 1
        if refresh and store.refresh_due(d):
            store.refresh(d)
        if d in want:
            out.snapshots[d] = (store.alias_table(), np.asarray(store.exposed_ids(d), dtype=np.int64))
    return out


# -- ground truth ---------------------------------------------------------


@dataclass
class GroundTruth:
    stream: ClusterStream
    timelines: Timelines
    events: list[EmergenceEvent]
    counts: np.ndarray
    engagement: np.ndarray
    cluster_ids: np.ndarray

    def cluster_index(self, c: np.ndarray) -> np.ndarray:
        return np.searchsorted(self.cluster_ids, c)


def ground_truth(prep: PreparedCorpus, cfg: PipelineConfig) -> GroundTruth:
    stream = run_cluster_stream(prep, prep.claim_vecs, prep.claim_ok, cfg, refresh=False)
    keep = stream.ids >= 0
    tl = Timelines(stream.ids[keep], prep.plat[keep], prep.rel_ts[keep], prep.platforms)
    events = detect_emergences(tl, cfg.emergence_threshold, cfg.precedence_hours * 3600)
    counts, ids = tl.daily_counts(prep.n_days)
    eng = np.zeros_like(counts, dtype=np.float64)
    np.add.at(eng, (np.searchsorted(ids, tl.cluster), tl.platform, tl.ts // SECONDS_PER_DAY), prep.engagement[keep])
    return GroundTruth(stream, tl, events, counts, eng, ids)


# -- instance table -------------------------------------------------------


@dataclass
class InstanceTable:
    """One row per (cluster, source, target, t); labels per horizon."""

    platforms: tuple[str, ...]
    cluster: np.ndarray
    source: np.ndarray
    target: np.ndarray
    t: np.ndarray
    labels: dict[int, np.ndarray]
    columns: dict[str, np.ndarray] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.t)

    @property
    def horizons(self) -> tuple[int, ...]:
        return tuple(sorted(self.labels))

    def matrix(self, names: Sequence[str]) -> np.ndarray:
        missing = [c for c in names if c not in self.columns]
        if missing:
            raise KeyError(f"feature columns not computed: {', '.join(missing)}")
        return np.column_stack([self.columns[c].astype(np.float64) for c in names]) if names else np.zeros((len(self), 0))

    def key_order(self) -> np.ndarray:
        """Row order by (cluster_id, source, target, t)."""
        src = np.asarray(self.platforms)[self.source]
        tgt = np.asarray(self.platforms)[self.target]
        return np.lexsort((self.t, tgt, src, self.cluster))

    def feature_rows(self) -> list[FeatureRow]:
        names = self.platforms
        get = lambda name, i, default: self.columns[name][i] if name in self.columns else default  # noqa: E731
        rows = []
        for i in range(len(self)):
            for h in self.horizons:
                rows.append(FeatureRow(
                    int(self.cluster[i]), names[self.source[i]], names[self.target[i]], int(self.t[i]), h,
                    int(get("sum_active", i, 0)), int(get("sum_total", i, 0)),
                    float(get("mean_ratio", i, 0.0)), float(get("transition_prior", i, 0.0)),
                    int(self.labels[h][i]),
                ))
        return rows

    @classmethod
    def from_feature_rows(cls, rows: Sequence[FeatureRow], platforms: Sequence[str] | None = None) -> InstanceTable:
        if platforms is None:
            seen = {r.source for r in rows} | {r.target for r in rows}
            platforms = [p for p in DEFAULT_PLATFORMS if p in seen] + sorted(seen - set(DEFAULT_PLATFORMS))
        platforms = tuple(platforms)
        code = {p: i for i, p in enumerate(platforms)}
        index: dict[tuple[int, str, str, int], int] = {}
        base: list[FeatureRow] = []
        horizons = sorted({r.horizon for r in rows})
        ys: dict[int, dict[int, int]] = {h: {} for h in horizons}
        for r in rows:
            key = (r.cluster_id, r.source, r.target, r.t)
            i = index.get(key)
            if i is None:
                i = index[key] = len(base)
                base.append(r)
            if r.y is None:
                raise PipelineError(f"feature row {key} has no label")
            ys[r.horizon][i] = r.y
        n = len(base)
        labels = {}
        for h in horizons:
            if len(ys[h]) != n:
                raise PipelineError(f"horizon {h} is missing labels for some instances")
            labels[h] = np.asarray([ys[h][i] for i in range(n)], dtype=np.int64)
        tab = cls(
            platforms,
            np.asarray([r.cluster_id for r in base], dtype=np.int64),
            np.asarray([code[r.source] for r in base], dtype=np.int64),
            np.asarray([code[r.target] for r in base], dtype=np.int64),
            np.asarray([r.t for r in base], dtype=np.int64),
            labels,
        )
        tab.columns = {
            "sum_active": np.asarray([r.sum_active for r in base], dtype=np.float64),
            "sum_total": np.asarray([r.sum_total for r in base], dtype=np.float64),
            "mean_ratio": np.asarray([r.mean_ratio for r in base], dtype=np.float64),
            "transition_prior": np.asarray([r.transition_prior for r in base], dtype=np.float64),
        }
        return tab


def build_instances(gt: GroundTruth, eval_days: Sequence[int], cfg: PipelineConfig) -> InstanceTable:
    rows = make_labels(
        gt.timelines, eval_days, cfg.horizons, cfg.min_source_posts, cfg.emergence_threshold, cfg.window_days
    )
    horizons = sorted(cfg.horizons)
    code = {p: i for i, p in enumerate(gt.timelines.platforms)}
    nh = len(horizons)
    n = len(rows) // nh
    labels = {h: np.zeros(n, dtype=np.int64) for h in horizons}
    cl = np.zeros(n, dtype=np.int64)
    src = np.zeros(n, dtype=np.int64)
    tgt = np.zeros(n, dtype=np.int64)
    t = np.zeros(n, dtype=np.int64)
    for i in range(n):
        chunk = rows[i * nh:(i + 1) * nh]
        r = chunk[0]
        cl[i], src[i], tgt[i], t[i] = r.cluster_id, code[r.source], code[r.target], r.t
        for h, lr in zip(horizons, chunk):
            labels[h][i] = lr.y
    return InstanceTable(gt.timelines.platforms, cl, src, tgt, t, labels)


def add_popularity(table: InstanceTable, gt: GroundTruth, window: int) -> None:
    n = len(table)
    cols = {name: np.zeros(n) for name in POPULARITY_COLUMNS}
    ci = gt.cluster_index(table.cluster)
    cache: dict[tuple[int, int, int], tuple[float, float, float]] = {}
    for i in range(n):
        key = (int(ci[i]), int(table.source[i]), int(table.t[i]))
        vals = cache.get(key)
        if vals is None:
            vals = cache[key] = popularity_features(
                gt.counts[key[0], key[1]], gt.engagement[key[0], key[1]], key[2], window
            )
        for name, v in zip(POPULARITY_COLUMNS, vals):
            cols[name][i] = v
    table.columns.update(cols)


def add_transition_prior(table: InstanceTable, gt: GroundTruth) -> None:
    prior = np.zeros(len(table))
    for t in np.unique(table.t).tolist():
        # relative timestamps, so the day-t cutoff is t whole days
        P = transition_matrix(gt.events, table.platforms, before_ts=t * SECONDS_PER_DAY).probabilities()
        rows = np.flatnonzero(table.t == t)
        prior[rows] = P[table.source[rows], table.target[rows]]
    table.columns["transition_prior"] = prior


# -- graph snapshots and proximity features -------------------------------


@dataclass
class GraphSnapshot:
    day: int
    graph: UserGraph | None
    row_of_user: np.ndarray  # global user index -> graph row, -1 when absent


def snapshot_days(cfg: PipelineConfig, first_eval: int, last_eval: int, every: int) -> list[int]:
    """Rebuild days (multiples of ``every``) whose snapshots serve some eval day."""
    first = (first_eval // every) * every
    return list(range(first, last_eval + 1, every))


def discourse_snapshots(
    prep: PreparedCorpus, stream: ClusterStream, days: Sequence[int], k: int, knn_mode: str
) -> list[GraphSnapshot]:
    out = []
    n_users = len(prep.users)
    for g in days:
        res, keep = stream.resolved_through(g, prep)
        u = prep.user_idx[:len(res)][keep]
        c = res[keep]
        row_of = np.full(n_users, -1, dtype=np.int64)
        uniq = np.unique(u)
        if len(uniq) < 2:
            out.append(GraphSnapshot(g, None, row_of))
            continue
        row_of[uniq] = np.arange(len(uniq))
        cids = np.unique(c)
        tf = sparse.csr_matrix((np.ones(len(u)), (row_of[u], np.searchsorted(cids, c))), shape=(len(uniq), len(cids)))
        tf.sum_duplicates()
        tf.sort_indices()
        pm = ParticipationMatrix([prep.users[i] for i in uniq], cids, tf)
        graph = knn_graph(tfidf(pm), pm.users, k=k, mode=knn_mode, built_at_day=g)
        out.append(GraphSnapshot(g, graph, row_of))
    return out


def baseline_snapshots(prep: PreparedCorpus, kind: str, days: Sequence[int]) -> list[GraphSnapshot]:
    out = []
    for g in days:
        n = prep.count_through(g)
        keep = np.flatnonzero(prep.claim_ok[:n]) if kind in ("text_sim", "knn_embed", "fused") else np.arange(n)
        posts = [prep.posts[i] for i in keep]
        uniq = np.unique(prep.user_idx[keep])
        row_of = np.full(len(prep.users), -1, dtype=np.int64)
        if len(uniq) < 2:
            out.append(GraphSnapshot(g, None, row_of))
            continue
        row_of[uniq] = np.arange(len(uniq))
        users = [prep.users[i] for i in uniq]
        vecs = prep.claim_vecs[keep] if kind in ("text_sim", "knn_embed", "fused") else None
        graph = build_baseline_graph(posts, kind, vecs, users, built_at_day=g)
        out.append(GraphSnapshot(g, graph, row_of))
    return out


def proximity_features(
    prep: PreparedCorpus,
    gt: GroundTruth,
    table: InstanceTable,
    snapshots: Sequence[GraphSnapshot],
    window: int,
    monitor: str = "all",
    quantile: float = 1.0,
    seed: int = 0,
) -> dict[str, np.ndarray]:
    """sum_active / sum_total / mean_ratio for every instance row.

    Row ``t`` reads the latest snapshot built on or before day ``t`` and
    ground-truth activity of posts in ``[t - window, t]``.
    """
    n = len(table)
    sa = np.zeros(n)
    st = np.zeros(n)
    mr = np.zeros(n)
    snap_days = np.asarray([s.day for s in snapshots])
    index_cache: dict[int, ProximityIndex | None] = {}
    gt_ids = gt.stream.ids
    for t in np.unique(table.t).tolist():
        j = int(np.searchsorted(snap_days, t, side="right")) - 1
        if j < 0:
            raise PipelineError(f"no graph snapshot on or before day {t}")
        snap = snapshots[j]
        if snap.graph is None:
            continue
        if j not in index_cache:
            index_cache[j] = _proximity_index(prep, snap, table.platforms, monitor, quantile, seed)
        pidx = index_cache[j]
        sl = prep.day_range(t - window, t)
        wc = gt_ids[sl]
        ok = wc >= 0
        wu = snap.row_of_user[prep.user_idx[sl][ok]]
        rows = np.flatnonzero(table.t == t)
        inst = np.column_stack([table.cluster[rows], table.source[rows], table.target[rows]])
        a, b, c = pidx.compute(wu, wc[ok], inst)
        sa[rows], st[rows], mr[rows] = a, b, c
    return {"sum_active": sa, "sum_total": st, "mean_ratio": mr}


def _proximity_index(
    prep: PreparedCorpus, snap: GraphSnapshot, platforms: Sequence[str], monitor: str, quantile: float, seed: int
) -> ProximityIndex:
    graph = snap.graph
    engagement = None
    if monitor == "popularity":
        n = prep.count_through(snap.day)
        tot = np.bincount(prep.user_idx[:n], weights=prep.engagement[:n], minlength=len(prep.users))
        engagement = {u: float(tot[i]) for i, u in enumerate(prep.users) if snap.row_of_user[i] >= 0}
    mset = select_monitor(graph, monitor, quantile, seed=seed, engagement=engagement)
    return ProximityIndex(graph, mset.mask(graph), platforms)


# -- end-to-end run -------------------------------------------------------


@dataclass
class EvalWindow:
    train_start: int
    test_start: int
    test_end: int

    @property
    def days(self) -> range:
        return range(self.train_start, self.test_end + 1)


def eval_window(cfg: PipelineConfig, n_days: int) -> EvalWindow:
    end = cfg.test_end_day if cfg.test_end_day is not None else n_days - 1 - max(cfg.horizons)
    if end < cfg.test_start_day:
        raise PipelineError(
            f"corpus spans {n_days} days, too short for test_start_day={cfg.test_start_day} "
            f"with horizon {max(cfg.horizons)}"
        )
    return EvalWindow(cfg.train_start_day, cfg.test_start_day, end)


class PipelineRun:
    """Lazily computed stages over one prepared corpus, cached for ablations."""

    def __init__(self, prep: PreparedCorpus, cfg: PipelineConfig):
        self.prep = prep
        self.cfg = cfg
        self.window = eval_window(cfg, prep.n_days)
        self._gt: GroundTruth | None = None
        self._table: InstanceTable | None = None
        self._streams: dict[str, ClusterStream] = {}
        self._snapshots: dict[tuple, list[GraphSnapshot]] = {}

    @classmethod
    def from_posts(cls, posts: Sequence[Post], cfg: PipelineConfig, platforms: Sequence[str] | None = None) -> PipelineRun:
        return cls(prepare(posts, cfg, platforms), cfg)

    @property
    def gt(self) -> GroundTruth:
        if self._gt is None:
            self._gt = ground_truth(self.prep, self.cfg)
        return self._gt

    @property
    def graph_days(self) -> list[int]:
        return snapshot_days(self.cfg, self.window.train_start, self.window.test_end, self.cfg.graph_rebuild_days)

    def stream(self, text_mode: str) -> ClusterStream:
        s = self._streams.get(text_mode)
        if s is None:
            vecs, ok = self.prep.vectors(text_mode)
            s = run_cluster_stream(self.prep, vecs, ok, self.cfg, refresh=True, snapshot_days=self.graph_days)
            self._streams[text_mode] = s
        return s

    def snapshots(self, text_mode: str | None = None, k: int | None = None) -> list[GraphSnapshot]:
        text_mode = text_mode or self.cfg.text_mode
        k = k or self.cfg.k
        key = ("discourse", text_mode, k)
        if key not in self._snapshots:
            logger.info("building discourse graphs (text=%s, k=%d)", text_mode, k)
            self._snapshots[key] = discourse_snapshots(
                self.prep, self.stream(text_mode), self.graph_days, k, self.cfg.knn_mode
            )
        return self._snapshots[key]

    def baseline_graphs(self, kind: str) -> list[GraphSnapshot]:
        key = ("baseline", kind)
        if key not in self._snapshots:
            days = snapshot_days(self.cfg, self.window.train_start, self.window.test_end, self.cfg.baseline_rebuild_days)
            logger.info("building %s graphs on %d days", kind, len(days))
            self._snapshots[key] = baseline_snapshots(self.prep, kind, days)
        return self._snapshots[key]

    def instances(self) -> InstanceTable:
        """Instance table with prior and popularity columns (discourse columns added separately)."""
        if self._table is None:
            tab = build_instances(self.gt, self.window.days, self.cfg)
            if not len(tab):
                raise PipelineError("no eligible instances in the evaluation window")
            add_transition_prior(tab, self.gt)
            add_popularity(tab, self.gt, self.cfg.window_days)
            self._table = tab
        return self._table

    def discourse(
        self,
        text_mode: str | None = None,
        k: int | None = None,
        monitor: str | None = None,
        quantile: float | None = None,
        seed: int | None = None,
    ) -> dict[str, np.ndarray]:
        return proximity_features(
            self.prep, self.gt, self.instances(), self.snapshots(text_mode, k), self.cfg.window_days,
            monitor or self.cfg.monitor,
            self.cfg.quantile if quantile is None else quantile,
            self.cfg.seed if seed is None else seed,
        )

    def baseline_proximity(self, kind: str) -> dict[str, np.ndarray]:
        return proximity_features(
            self.prep, self.gt, self.instances(), self.baseline_graphs(kind), self.cfg.window_days
        )

    def feature_table(self) -> InstanceTable:
        """Instances with every column under the configured settings."""
        tab = self.instances()
        if "sum_active" not in tab.columns:
            tab.columns.update(self.discourse())
        return tab

    def absolute_day(self, rel_day: int) -> int:
        return self.prep.origin_day + rel_day
