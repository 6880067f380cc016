"""Discourse network (TF-IDF participation + kNN) and behavioral baseline networks."""

from __future__ import annotations

import csv
import logging
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import sparse

from .corpus import Post, UserRef

logger = logging.getLogger(__name__)

DEFAULT_K = 50
BASELINE_KINDS = ("co_url", "hashtag_seq", "text_sim", "knn_embed", "fused")
TEXT_SIM_THRESHOLD = 0.8
K_POST = 10
# similarities are rounded before ranking so float noise cannot break ties
_RANK_DECIMALS = 12


@dataclass
class ParticipationMatrix:
    """Per-user post counts over narrative clusters (rows follow ``users`` order)."""

    users: list[UserRef]
    cluster_ids: np.ndarray
    tf: sparse.csr_matrix

    @property
    def n_users(self) -> int:
        return len(self.users)

    @property
    def cluster_user_counts(self) -> dict[int, int]:
        df = np.diff(self.tf.tocsc().indptr)
        return {int(c): int(n) for c, n in zip(self.cluster_ids, df)}

    @property
    def rows(self) -> dict[UserRef, dict[int, int]]:
        out = {}
        for i, u in enumerate(self.users):
            lo, hi = self.tf.indptr[i], self.tf.indptr[i + 1]
            out[u] = {int(self.cluster_ids[j]): int(v) for j, v in zip(self.tf.indices[lo:hi], self.tf.data[lo:hi])}
        return out


def build_participation(authors: Sequence[UserRef], clusters: Sequence[int] | np.ndarray) -> ParticipationMatrix:
    """Group-by (user, cluster) post counts. Users with no posts are absent."""
    if len(authors) != len(clusters):
        raise ValueError("authors and clusters differ in length")
    users = sorted(set(authors))
    uidx = {u: i for i, u in enumerate(users)}
    cl = np.asarray(clusters, dtype=np.int64)
    cids = np.unique(cl)
    rows = np.fromiter((uidx[a] for a in authors), dtype=np.int64, count=len(authors))
    cols = np.searchsorted(cids, cl)
    tf = sparse.csr_matrix(
        (np.ones(len(cl), dtype=np.float64), (rows, cols)), shape=(len(users), len(cids))
    )
    tf.sum_duplicates()
    tf.sort_indices()
    return ParticipationMatrix(users, cids, tf)


def tfidf(matrix: ParticipationMatrix) -> sparse.csr_matrix:
    """``w[u, c] = tf[u, c] * ln(|U| / df[c])`` with zero weights dropped."""
    if matrix.n_users < 1:
        return sparse.csr_matrix((0, len(matrix.cluster_ids)))
    df = np.diff(matrix.tf.tocsc().indptr).astype(np.float64)
    idf = np.zeros_like(df)
    nz = df > 0
    idf[nz] = np.log(matrix.n_users / df[nz])
    w = matrix.tf.multiply(idf[None, :]).tocsr()
    w.eliminate_zeros()
    w.sort_indices()
    return w


def cosine_rows(w: sparse.csr_matrix) -> sparse.csr_matrix:
    norms = np.sqrt(np.asarray(w.multiply(w).sum(axis=1)).ravel())
    inv = np.zeros_like(norms)
    inv[norms > 0] = 1.0 / norms[norms > 0]
    return sparse.diags(inv) @ w


@dataclass
class UserGraph:
    """Directed neighbor lists in CSR form, rows sorted by weight descending.

    ``users`` is sorted, so row index order is UserRef order. Used both for the
    discourse kNN graph and for behavioral baseline networks.
    """

    users: list[UserRef]
    indptr: np.ndarray
    indices: np.ndarray
    weights: np.ndarray
    k: int | None = None
    built_at_day: int | None = None
    isolated: list[UserRef] = field(default_factory=list)
    kind: str = "discourse"

    def __post_init__(self) -> None:
        self._index = {u: i for i, u in enumerate(self.users)}
        self.platforms = sorted({u.platform for u in self.users})
        code = {p: i for i, p in enumerate(self.platforms)}
        self.platform_code = np.fromiter((code[u.platform] for u in self.users), dtype=np.int64, count=len(self.users))

    @property
    def n_users(self) -> int:
        return len(self.users)

    def index_of(self, user: UserRef) -> int:
        try:
            return self._index[user]
        except KeyError:
            raise KeyError(f"unknown user {user}") from None

    def __contains__(self, user: UserRef) -> bool:
        return user in self._index

    def neighbors(self, user: UserRef) -> list[tuple[UserRef, float]]:
        i = self.index_of(user)
        lo, hi = self.indptr[i], self.indptr[i + 1]
        return [(self.users[j], float(w)) for j, w in zip(self.indices[lo:hi], self.weights[lo:hi])]

    def adjacency(self) -> sparse.csr_matrix:
        return sparse.csr_matrix(
            (np.ones(len(self.indices)), self.indices, self.indptr), shape=(self.n_users, self.n_users)
        )

    def cross_degrees(self) -> np.ndarray:
        rows = np.repeat(np.arange(self.n_users), np.diff(self.indptr))
        cross = self.platform_code[rows] != self.platform_code[self.indices]
        return np.bincount(rows[cross], minlength=self.n_users)

    def edges(self) -> Iterable[tuple[UserRef, UserRef, float]]:
        for i, u in enumerate(self.users):
            lo, hi = self.indptr[i], self.indptr[i + 1]
            for j, w in zip(self.indices[lo:hi], self.weights[lo:hi]):
                yield u, self.users[j], float(w)

    def edge_set(self) -> set[tuple[UserRef, UserRef]]:
        return {(a, b) for a, b, _ in self.edges()}

    def dump(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("user_platform", "user_id", "nbr_platform", "nbr_id", "similarity"))
            for a, b, s in self.edges():
                w.writerow((a.platform, a.user_id, b.platform, b.user_id, f"{s:.10g}"))

    def dump_cross_degree(self, path: str | Path) -> None:
        deg = self.cross_degrees()
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("user", "cross_degree"))
            for u, d in zip(self.users, deg):
                w.writerow((str(u), int(d)))


def cross_degree(graph: UserGraph, user: UserRef) -> int:
    """Number of ``user``'s neighbors on a platform other than its own."""
    i = graph.index_of(user)
    lo, hi = graph.indptr[i], graph.indptr[i + 1]
    return int(np.count_nonzero(graph.platform_code[graph.indices[lo:hi]] != graph.platform_code[i]))


def _topk_rows(sims: np.ndarray, row_ids: np.ndarray, k: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Per row: top-k positive columns by (similarity desc, column asc), excluding self."""
    sims = np.round(sims, _RANK_DECIMALS)
    sims[np.arange(len(row_ids)), row_ids] = -np.inf
    out = []
    n = sims.shape[1]
    kk = min(k, n - 1)
    if kk <= 0:
        return [(np.zeros(0, dtype=np.int64), np.zeros(0)) for _ in row_ids]
    part = np.argpartition(-sims, kk - 1, axis=1)[:, :kk]
    for r in range(len(row_ids)):
        row = sims[r]
        kth = row[part[r]].min()
        # every column tied with the k-th value competes on index order
        cand = np.flatnonzero(row >= kth)
        order = np.lexsort((cand, -row[cand]))[:kk]
        cols = cand[order]
        vals = row[cols]
        keep = vals > 0
        out.append((cols[keep], np.clip(vals[keep], 0.0, 1.0)))
    return out


def knn_graph(
    vectors: sparse.csr_matrix | np.ndarray,
    users: Sequence[UserRef],
    k: int = DEFAULT_K,
    mode: str = "exact",
    built_at_day: int | None = None,
    block: int = 1024,
    ef_search: int | None = None,
) -> UserGraph:
    """k most cosine-similar other users for each user.

    ``users`` must be sorted (row order is the tie-break order). Users with an
    all-zero vector get no neighbors and are reported in ``isolated``; pairs
    with zero similarity are never linked.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    users = list(users)
    if users != sorted(users):
        raise ValueError("users must be sorted")
    n = len(users)
    if n < 2:
        raise ValueError("knn_graph needs at least two users")
    W = sparse.csr_matrix(vectors) if not sparse.issparse(vectors) else vectors.tocsr()
    Wn = cosine_rows(W).tocsr()
    zero = np.asarray(abs(W).sum(axis=1)).ravel() == 0
    if mode == "exact":
        rows = _exact_knn(Wn, k, block)
    elif mode == "approximate":
        rows = _hnsw_knn(Wn, k, zero, ef_search)
    else:
        raise ValueError(f"unknown knn mode {mode!r}")
    indptr = np.zeros(n + 1, dtype=np.int64)
    idx_parts, w_parts = [], []
    for i, (cols, vals) in enumerate(rows):
        if zero[i]:
            cols, vals = cols[:0], vals[:0]
        indptr[i + 1] = indptr[i] + len(cols)
        idx_parts.append(cols.astype(np.int64))
        w_parts.append(vals.astype(np.float64))
    isolated = [users[i] for i in np.flatnonzero(zero)]
    if isolated:
        logger.info("knn_graph: %d isolated users with all-zero vectors", len(isolated))
    return UserGraph(
        users,
        indptr,
        np.concatenate(idx_parts) if idx_parts else np.zeros(0, dtype=np.int64),
        np.concatenate(w_parts) if w_parts else np.zeros(0),
        k=k,
        built_at_day=built_at_day,
        isolated=isolated,
    )


def _exact_knn(Wn: sparse.csr_matrix, k: int, block: int) -> list[tuple[np.ndarray, np.ndarray]]:
    n = Wn.shape[0]
    WT = Wn.T.tocsc()
    rows: list[tuple[np.ndarray, np.ndarray]] = []
    for lo in range(0, n, block):
        hi = min(n, lo + block)
        S = (Wn[lo:hi] @ WT).toarray()
        rows.extend(_topk_rows(S, np.arange(lo, hi), k))
    return rows


def _hnsw_knn(Wn: sparse.csr_matrix, k: int, zero: np.ndarray, ef_search: int | None) -> list[tuple[np.ndarray, np.ndarray]]:
    import faiss

    n, d = Wn.shape
    X = np.ascontiguousarray(Wn.toarray(), dtype=np.float32)
    live = np.flatnonzero(~zero)
    threads = faiss.omp_get_max_threads()
    faiss.omp_set_num_threads(1)  # single-threaded build keeps the graph deterministic
    try:
        index = faiss.IndexHNSWFlat(d, 32, faiss.METRIC_INNER_PRODUCT)
        index.hnsw.efConstruction = 200
        index.add(X[live])
        index.hnsw.efSearch = ef_search or max(4 * k, 128)
        kq = min(k + 1, len(live))
        D, I = index.search(X, kq)
    finally:
        faiss.omp_set_num_threads(threads)
    rows = []
    for i in range(n):
        ok = I[i] >= 0
        cols = live[I[i][ok]]
        vals = np.round(D[i][ok].astype(np.float64), _RANK_DECIMALS)
        mask = (cols != i) & (vals > 0)
        cols, vals = cols[mask], vals[mask]
        order = np.lexsort((cols, -vals))[:k]
        rows.append((cols[order], np.clip(vals[order], 0.0, 1.0)))
    return rows


def knn_recall(approx: UserGraph, exact: UserGraph) -> float:
    """Fraction of exact neighbor slots recovered by the approximate graph."""
    hit = total = 0
    for i in range(exact.n_users):
        e = set(exact.indices[exact.indptr[i]:exact.indptr[i + 1]].tolist())
        a = set(approx.indices[approx.indptr[i]:approx.indptr[i + 1]].tolist())
        hit += len(e & a)
        total += len(e)
    return hit / total if total else 1.0


# -- behavioral baselines -------------------------------------------------


def _graph_from_weights(users: list[UserRef], M: sparse.spmatrix, kind: str, built_at_day: int | None) -> UserGraph:
    """Turn a symmetric user x user weight matrix into sorted neighbor lists."""
    M = sparse.csr_matrix(M)
    M.setdiag(0)
    M.eliminate_zeros()
    M.sort_indices()
    n = len(users)
    indptr = np.zeros(n + 1, dtype=np.int64)
    idx_parts, w_parts = [], []
    for i in range(n):
        lo, hi = M.indptr[i], M.indptr[i + 1]
        cols, vals = M.indices[lo:hi], np.round(M.data[lo:hi], _RANK_DECIMALS)
        order = np.lexsort((cols, -vals))
        idx_parts.append(cols[order].astype(np.int64))
        w_parts.append(vals[order])
        indptr[i + 1] = indptr[i] + len(cols)
    return UserGraph(
        users,
        indptr,
        np.concatenate(idx_parts) if idx_parts else np.zeros(0, dtype=np.int64),
        np.concatenate(w_parts) if w_parts else np.zeros(0),
        k=None,
        built_at_day=built_at_day,
        kind=kind,
    )


def _incidence(posts: Sequence[Post], users: list[UserRef], keys: list[list]) -> sparse.csr_matrix:
    """User x item incidence where ``keys[i]`` lists the items of ``posts[i]``."""
    uidx = {u: i for i, u in enumerate(users)}
    items: dict = {}
    rows, cols = [], []
    for post, ks in zip(posts, keys):
        for key in ks:
            rows.append(uidx[post.author])
            cols.append(items.setdefault(key, len(items)))
    B = sparse.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(len(users), len(items)))
    B.data[:] = 1.0
    B.sum_duplicates()
    B.data[:] = 1.0
    return B


def co_url_graph(posts: Sequence[Post], users: list[UserRef], built_at_day: int | None = None) -> UserGraph:
    """Edge iff two users share at least one exact URL; weight = shared URLs / max shared."""
    B = _incidence(posts, users, [list(set(p.urls)) for p in posts])
    M = (B @ B.T).tocsr()
    M.setdiag(0)
    M.eliminate_zeros()
    if M.nnz:
        M.data = M.data / M.data.max()
    return _graph_from_weights(users, M, "co_url", built_at_day)


def hashtag_sequences(post: Post) -> list[tuple[str, ...]]:
    tags = tuple(t.lower().lstrip("#") for t in post.hashtags)
    return [tags] if len(tags) >= 2 else []


def hashtag_seq_graph(posts: Sequence[Post], users: list[UserRef], built_at_day: int | None = None) -> UserGraph:
    """Edge iff both users used the same ordered hashtag tuple (length >= 2) in a post."""
    B = _incidence(posts, users, [hashtag_sequences(p) for p in posts])
    M = (B @ B.T).tocsr()
    M.setdiag(0)
    M.eliminate_zeros()
    if M.nnz:
        M.data = M.data / M.data.max()
    return _graph_from_weights(users, M, "hashtag_seq", built_at_day)


def _unique_rows(X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    U, inv = np.unique(np.ascontiguousarray(X), axis=0, return_inverse=True)
    return U, inv.ravel()


def _threshold_pairs(U: np.ndarray, thr: float, block: int = 2048) -> sparse.csr_matrix:
    """Sparse matrix of unique-vector pairs with cosine > ``thr`` (diagonal included)."""
    n = len(U)
    rows, cols, vals = [], [], []
    Ud = U.astype(np.float64)
    if n > 40000:
        return _threshold_pairs_ann(U, thr)
    for lo in range(0, n, block):
        S = Ud[lo:lo + block] @ Ud.T
        r, c = np.nonzero(S > thr)
        rows.append(r + lo)
        cols.append(c)
        vals.append(S[r, c])
    return sparse.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n)
    )


def _threshold_pairs_ann(U: np.ndarray, thr: float, k: int = 100) -> sparse.csr_matrix:
    import faiss

    X = np.ascontiguousarray(U, dtype=np.float32)
    index = faiss.IndexHNSWFlat(X.shape[1], 32, faiss.METRIC_INNER_PRODUCT)
    index.add(X)
    index.hnsw.efSearch = 2 * k
    D, I = index.search(X, k)
    r = np.repeat(np.arange(len(X)), k)
    c, v = I.ravel(), D.ravel().astype(np.float64)
    ok = (c >= 0) & (v > thr)
    logger.warning("text_sim: %d unique posts, using ANN candidates (k=%d)", len(X), k)
    return sparse.csr_matrix((v[ok], (r[ok], c[ok])), shape=(len(X), len(X)))


def text_sim_graph(
    posts: Sequence[Post],
    vectors: np.ndarray,
    users: list[UserRef],
    threshold: float = TEXT_SIM_THRESHOLD,
    built_at_day: int | None = None,
) -> UserGraph:
    """Edge iff some post pair has cosine > ``threshold``; weight = mean matched similarity."""
    U, inv = _unique_rows(np.asarray(vectors, dtype=np.float32))
    A = _threshold_pairs(U, threshold)
    uidx = {u: i for i, u in enumerate(users)}
    rows = np.fromiter((uidx[p.author] for p in posts), dtype=np.int64, count=len(posts))
    B = sparse.csr_matrix((np.ones(len(posts)), (rows, inv)), shape=(len(users), len(U)))
    A_ind = A.copy()
    A_ind.data[:] = 1.0
    total = (B @ A @ B.T).tocsr()
    count = (B @ A_ind @ B.T).tocsr()
    total.setdiag(0)
    count.setdiag(0)
    total.eliminate_zeros()
    count.eliminate_zeros()
    mean = total.multiply(count.power(-1)).tocsr()
    return _graph_from_weights(users, mean, "text_sim", built_at_day)


def knn_embed_graph(
    posts: Sequence[Post],
    vectors: np.ndarray,
    users: list[UserRef],
    k_post: int = K_POST,
    built_at_day: int | None = None,
) -> UserGraph:
    """User edges induced by a post-level kNN graph.

    Weight is the number of post-pair links between two users divided by the
    geometric mean of their post counts, rescaled into [0, 1].
    """
    import faiss

    X = np.ascontiguousarray(vectors, dtype=np.float32)
    n = len(X)
    if n < 2:
        return _graph_from_weights(users, sparse.csr_matrix((len(users), len(users))), "knn_embed", built_at_day)
    kk = min(k_post + 1, n)
    threads = faiss.omp_get_max_threads()
    faiss.omp_set_num_threads(1)
    try:
        if n <= 20000:
            index = faiss.IndexFlatIP(X.shape[1])
        else:
            index = faiss.IndexHNSWFlat(X.shape[1], 16, faiss.METRIC_INNER_PRODUCT)
            index.hnsw.efConstruction = 40
        index.add(X)
        if hasattr(index, "hnsw"):
            index.hnsw.efSearch = max(2 * kk, 32)
        _, I = index.search(X, kk)
    finally:
        faiss.omp_set_num_threads(threads)
    r = np.repeat(np.arange(n), kk)
    c = I.ravel()
    ok = (c >= 0) & (c != r)
    P = sparse.csr_matrix((np.ones(int(ok.sum())), (r[ok], c[ok])), shape=(n, n))
    uidx = {u: i for i, u in enumerate(users)}
    rows = np.fromiter((uidx[p.author] for p in posts), dtype=np.int64, count=n)
    B = sparse.csr_matrix((np.ones(n), (rows, np.arange(n))), shape=(len(users), n))
    links = (B @ (P + P.T) @ B.T).tocsr()
    links.setdiag(0)
    links.eliminate_zeros()
    nposts = np.asarray(B.sum(axis=1)).ravel()
    norm = np.sqrt(np.maximum(nposts, 1.0))
    W = sparse.diags(1.0 / norm) @ links @ sparse.diags(1.0 / norm)
    W = sparse.csr_matrix(W)
    if W.nnz:
        W.data = W.data / W.data.max()
    return _graph_from_weights(users, W, "knn_embed", built_at_day)


def fused_graph(parts: Sequence[UserGraph], built_at_day: int | None = None) -> UserGraph:
    """Edge union of the constituent networks; weight = fraction of networks containing the edge."""
    users = parts[0].users
    n = len(users)
    M = sparse.csr_matrix((n, n))
    for g in parts:
        if g.users != users:
            raise ValueError("fused parts must share the user index")
        A = g.adjacency()
        A = ((A + A.T) > 0).astype(np.float64)
        M = M + A
    M = M / len(parts)
    return _graph_from_weights(users, M, "fused", built_at_day)


def build_baseline_graph(
    posts: Sequence[Post],
    kind: str,
    vectors: np.ndarray | None = None,
    users: list[UserRef] | None = None,
    built_at_day: int | None = None,
) -> UserGraph:
    """Behavioral network of ``kind`` over ``posts`` (already bounded by the build time)."""
    if users is None:
        users = sorted({p.author for p in posts})
    if kind == "co_url":
        return co_url_graph(posts, users, built_at_day)
    if kind == "hashtag_seq":
        return hashtag_seq_graph(posts, users, built_at_day)
    if kind in ("text_sim", "knn_embed", "fused") and vectors is None:
        raise ValueError(f"{kind} needs claim embeddings")
    if kind == "text_sim":
        return text_sim_graph(posts, vectors, users, built_at_day=built_at_day)
    if kind == "knn_embed":
        return knn_embed_graph(posts, vectors, users, built_at_day=built_at_day)
    if kind == "fused":
        parts = [
            co_url_graph(posts, users, built_at_day),
            hashtag_seq_graph(posts, users, built_at_day),
            text_sim_graph(posts, vectors, users, built_at_day=built_at_day),
        ]
        return fused_graph(parts, built_at_day)
    raise ValueError(f"unknown baseline graph kind {kind!r}")
