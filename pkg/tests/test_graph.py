from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import sparse

from conftest import post
from oracles import cosine_bruteforce, tfidf_bruteforce
from narrative_flux.corpus import UserRef
from narrative_flux.graph import (
    ParticipationMatrix, UserGraph, build_baseline_graph, build_participation, cross_degree, knn_graph, tfidf,
)


def users_on(platforms):
    return sorted(UserRef(p, f"u{i:03d}") for i, p in enumerate(platforms))


def knn_bruteforce(W: np.ndarray, k: int) -> list[list[int]]:
    S = np.round(cosine_bruteforce(W), 12)
    out = []
    for i in range(len(W)):
        cand = [j for j in range(len(W)) if j != i and S[i, j] > 0]
        cand.sort(key=lambda j: (-S[i, j], j))
        out.append(cand[:k])
    return out


def test_participation_counts():
    u = UserRef("x", "a")
    pm = build_participation([u, u, u], [7, 7, 7])
    assert pm.rows == {u: {7: 3}}
    empty = build_participation([], [])
    assert empty.n_users == 0 and tfidf(empty).shape[0] == 0


def test_participation_groupby_oracle():
    rng = np.random.default_rng(0)
    authors = [UserRef("x", f"u{int(i)}") for i in rng.integers(0, 40, 1000)]
    clusters = rng.integers(0, 25, 1000)
    pm = build_participation(authors, clusters)
    oracle: dict = {}
    for a, c in zip(authors, clusters.tolist()):
        oracle.setdefault(a, {}).setdefault(c, 0)
        oracle[a][c] += 1
    assert pm.rows == oracle


def test_tfidf_formula_value():
    # |U| = 100 users, cluster 0 touched by 10 of them, one of which posted 10 times
    authors = [UserRef("x", f"u{i:03d}") for i in range(100)]
    a = authors[:10] + [authors[0]] * 9
    c = [0] * 19
    rest_a = authors[10:]
    pm = build_participation(a + rest_a, c + [1] * 90)
    w = tfidf(pm)
    assert w[0, 0] == pytest.approx(10 * math.log(10), abs=1e-9)
    assert w[0, 0] == pytest.approx(23.0259, abs=1e-4)


def test_tfidf_zero_when_everyone_participates():
    authors = [UserRef("x", f"u{i}") for i in range(5)]
    w = tfidf(build_participation(authors, [3] * 5))
    assert w.nnz == 0


@pytest.mark.parametrize("seed", range(3))
def test_tfidf_and_cosine_match_oracle(seed):
    rng = np.random.default_rng(seed)
    counts = rng.poisson(0.4, (50, 20))
    counts[rng.integers(0, 50), :] += 1  # every cluster has a participant
    users = [UserRef("x", f"u{i:03d}") for i in range(50)]
    authors, clusters = [], []
    for i in range(50):
        for j in range(20):
            authors += [users[i]] * int(counts[i, j])
            clusters += [j] * int(counts[i, j])
    pm = build_participation(authors, clusters)
    present = [users.index(u) for u in pm.users]
    oracle = tfidf_bruteforce(counts[present])
    w = tfidf(pm).toarray()
    assert np.max(np.abs(w - oracle)) <= 1e-9


def test_knn_identical_pair_mutual():
    users = users_on(["x", "truth", "tiktok"])
    W = np.array([[1.0, 2, 0], [1.0, 2, 0], [0, 0.3, 5]])
    g = knn_graph(W, users, k=1)
    assert g.neighbors(users[0]) == [(users[1], 1.0)]
    assert g.neighbors(users[1]) == [(users[0], 1.0)]


@pytest.mark.parametrize("seed", range(10))
def test_knn_exact_equals_bruteforce(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(10, 60))
    W = rng.poisson(0.5, (n, 12)).astype(float)
    W[:3] = W[3]  # force exact ties
    users = users_on(rng.choice(["x", "truth", "tiktok", "telegram"], n).tolist())
    k = int(rng.integers(1, 8))
    g = knn_graph(sparse.csr_matrix(W), users, k=k)
    want = knn_bruteforce(W, k)
    for i in range(n):
        assert g.indices[g.indptr[i]:g.indptr[i + 1]].tolist() == want[i]


def test_knn_isolated_users_and_validation():
    users = users_on(["x", "x", "truth"])
    g = knn_graph(np.array([[1.0, 0], [0.0, 0], [1.0, 1]]), users, k=2)
    assert g.isolated == [users[1]]
    assert g.neighbors(users[1]) == []
    with pytest.raises(ValueError):
        knn_graph(np.eye(2), users[::-1][:2], k=1)
    with pytest.raises(ValueError):
        knn_graph(np.eye(2), users[:2], k=0)


def _graph(neigh: dict[int, list[int]], platforms: list[str]) -> tuple[UserGraph, list[UserRef]]:
    """Graph from neighbor lists given in input order; also returns users in input order."""
    orig = [UserRef(p, f"u{i:03d}") for i, p in enumerate(platforms)]
    users = sorted(orig)
    pos = {u: users.index(u) for u in orig}
    indptr = [0]
    idx = []
    for u in users:
        idx += [pos[orig[j]] for j in neigh.get(orig.index(u), [])]
        indptr.append(len(idx))
    return UserGraph(users, np.asarray(indptr), np.asarray(idx, dtype=np.int64), np.ones(len(idx))), orig


def test_cross_degree_counts():
    plats = ["x", "x", "x", "truth", "tiktok", "telegram"]
    g, u = _graph({0: [1, 2], 1: [0, 3, 4, 5, 2]}, plats)
    assert cross_degree(g, u[0]) == 0
    assert cross_degree(g, u[1]) == 3


@given(st.integers(0, 10_000))
@settings(max_examples=30, deadline=None)
def test_cross_degrees_vector_matches_recount(seed):
    rng = np.random.default_rng(seed)
    n = 15
    plats = rng.choice(["x", "truth", "tiktok"], n).tolist()
    neigh = {i: sorted(rng.choice([j for j in range(n) if j != i], int(rng.integers(0, 5)), replace=False).tolist())
             for i in range(n)}
    g, _ = _graph(neigh, plats)
    assert g.cross_degrees().tolist() == [cross_degree(g, u) for u in g.users]


def test_co_url_edge():
    posts = [post("1", "x", "a", 1, urls=("https://a.example/x",)), post("2", "truth", "b", 2, urls=("https://a.example/x",)),
             post("3", "x", "c", 3, urls=("https://other.example",))]
    g = build_baseline_graph(posts, "co_url")
    a, b, c = UserRef("x", "a"), UserRef("truth", "b"), UserRef("x", "c")
    assert (a, b) in g.edge_set() and (b, a) in g.edge_set()
    assert not any(c in e for e in g.edge_set())


def test_hashtag_sequences_are_ordered():
    posts = [post("1", "x", "a", 1, hashtags=("a", "b")), post("2", "x", "b", 2, hashtags=("b", "a"))]
    assert build_baseline_graph(posts, "hashtag_seq").edge_set() == set()
    posts.append(post("3", "x", "c", 3, hashtags=("A", "#b")))
    assert (UserRef("x", "a"), UserRef("x", "c")) in build_baseline_graph(posts, "hashtag_seq").edge_set()


def test_text_sim_identical_posts_weight_one():
    posts = [post("1", "x", "a", 1), post("2", "truth", "b", 2), post("3", "x", "c", 3)]
    v = np.array([[1.0, 0, 0], [1.0, 0, 0], [0, 1.0, 0]], dtype=np.float32)
    g = build_baseline_graph(posts, "text_sim", vectors=v)
    assert g.neighbors(UserRef("x", "a")) == [(UserRef("truth", "b"), 1.0)]
    assert g.neighbors(UserRef("x", "c")) == []


def test_knn_embed_and_fused_shapes():
    rng = np.random.default_rng(0)
    posts = [post(str(i), "x" if i % 2 else "truth", f"u{i % 6}", i, urls=(f"https://a.example/{i % 3}",))
             for i in range(30)]
    v = rng.normal(size=(30, 8)).astype(np.float32)
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    g = build_baseline_graph(posts, "knn_embed", vectors=v)
    assert g.n_users == 6 and all(0 < w <= 1 for _, _, w in g.edges())
    f = build_baseline_graph(posts, "fused", vectors=v)
    assert all(np.isclose(w, [1 / 3, 2 / 3, 1.0]).any() for _, _, w in f.edges())
    with pytest.raises(ValueError):
        build_baseline_graph(posts, "text_sim")
    with pytest.raises(ValueError):
        build_baseline_graph(posts, "nope")


def test_graph_dump(tmp_path):
    g, _ = _graph({0: [1]}, ["x", "truth"])
    g.dump(tmp_path / "g.csv")
    g.dump_cross_degree(tmp_path / "d.csv")
    assert (tmp_path / "g.csv").read_text().splitlines()[1:] == ["x,u000,truth,u001,1"]
    assert (tmp_path / "d.csv").read_text().splitlines()[1:] == ["truth:u001,0", "x:u000,1"]
