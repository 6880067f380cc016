"""Acceptance suite: one pass/fail line per criterion, printed in the terminal summary.

Criteria 6 and 7 run the pipeline end to end on the default synthetic corpus
and are marked slow.
"""

from __future__ import annotations

import json
import math
import time

import numpy as np
import pytest
from scipy import sparse

import conftest
from conftest import small_config
from oracles import (
    ari, auc_pairs, cosine_bruteforce, emergences_bruteforce, labels_bruteforce, planted_clusters,
    precision_at_k_manual, random_timeline, tfidf_bruteforce,
)
from narrative_flux.cli import main as cli_main
from narrative_flux.config import config_from_dict
from narrative_flux.corpus import UserRef
from narrative_flux.diffusion import (
    HawkesParams, ICParams, fit_hawkes, hawkes_emergence_prob, ic_emergence_prob, simulate_hawkes_events,
)
from narrative_flux.eval import (
    POPULARITY_COLUMNS, auc, cumulative_gain, precision_at_k, streaming_forest, threshold_metrics,
)
from narrative_flux.graph import UserGraph, build_participation, cosine_rows, knn_graph, knn_recall, tfidf
from narrative_flux.models import fit_logistic_fe
from narrative_flux.narrative import ClusterStore, Timelines, batch_dpmeans, detect_emergences, make_labels
from narrative_flux.pipeline import PipelineRun
from narrative_flux.synth import SynthConfig, adoption_rows, generate


def record(n: int, ok: bool, detail: str) -> None:
    line = f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    conftest.ACCEPTANCE[n] = line
    print(line)
    assert ok, line


# -- 1: TF-IDF and cosine -------------------------------------------------


def test_criterion_01_tfidf_cosine_oracle():
    t0 = time.perf_counter()
    rng = np.random.default_rng(101)
    worst_w = worst_s = 0.0
    for _ in range(100):
        n_users, n_clusters = int(rng.integers(2, 51)), int(rng.integers(1, 21))
        counts = rng.poisson(rng.uniform(0.1, 1.5), (n_users, n_clusters))
        counts[rng.integers(0, n_users, n_clusters), np.arange(n_clusters)] += 1
        counts[np.arange(n_users), rng.integers(0, n_clusters, n_users)] += 1
        users = [UserRef("x", f"u{i:03d}") for i in range(n_users)]
        rows, cols = np.nonzero(counts)
        reps = counts[rows, cols]
        pm = build_participation([users[i] for i in np.repeat(rows, reps)], np.repeat(cols, reps))
        order = [users.index(u) for u in pm.users]
        w = tfidf(pm).toarray()
        want = tfidf_bruteforce(counts[order][:, pm.cluster_ids])
        worst_w = max(worst_w, float(np.max(np.abs(w - want))))
        Wn = cosine_rows(sparse.csr_matrix(w))
        S = (Wn @ Wn.T).toarray()
        worst_s = max(worst_s, float(np.max(np.abs(S - cosine_bruteforce(want)))))
    sec = time.perf_counter() - t0
    record(1, worst_w <= 1e-9 and worst_s <= 1e-9 and sec < 10,
           f"max |dw|={worst_w:.1e}, max |dcos|={worst_s:.1e} over 100 matrices, {sec:.1f}s")


# -- 2: kNN fidelity ------------------------------------------------------


def _knn_bruteforce(W: np.ndarray, k: int) -> list[list[int]]:
    S = np.round(cosine_bruteforce(W), 12)
    out = []
    for i in range(len(W)):
        cand = [j for j in range(len(W)) if j != i and S[i, j] > 0]
        cand.sort(key=lambda j: (-S[i, j], j))
        out.append(cand[:k])
    return out


def test_criterion_02_knn_fidelity():
    t0 = time.perf_counter()
    rng = np.random.default_rng(202)
    plats = ["x", "truth", "tiktok", "telegram"]
    exact_ok = 0
    for _ in range(20):
        n = int(rng.integers(5, 201))
        W = rng.poisson(0.4, (n, int(rng.integers(5, 40)))).astype(float)
        users = sorted(UserRef(p, f"u{i:03d}") for i, p in enumerate(rng.choice(plats, n)))
        k = int(rng.integers(1, 25))
        g = knn_graph(sparse.csr_matrix(W), users, k=k)
        want = _knn_bruteforce(W, k)
        exact_ok += all(g.indices[g.indptr[i]:g.indptr[i + 1]].tolist() == want[i] for i in range(n))
    # 10k users with community-structured participation
    n_users, n_clusters, n_comm = 10_000, 400, 40
    comm = rng.integers(0, n_comm, n_users)
    prefs = rng.random((n_comm, n_clusters)) < 0.05
    rate = np.where(prefs[comm], 0.6, 0.01)
    W = sparse.csr_matrix(rng.poisson(rate).astype(float))
    weights = W.multiply(np.log(n_users / np.maximum(np.asarray((W > 0).sum(axis=0)), 1))).tocsr()
    users = sorted(UserRef(plats[i % 4], f"u{i:05d}") for i in range(n_users))
    exact = knn_graph(weights, users, k=20)
    approx = knn_graph(weights, users, k=20, mode="approximate")
    recall = knn_recall(approx, exact)
    sec = time.perf_counter() - t0
    record(2, exact_ok == 20 and recall >= 0.95 and sec < 120,
           f"exact == brute force on {exact_ok}/20, approximate recall@20={recall:.4f} on 10k users, {sec:.0f}s")


# -- 3: clustering --------------------------------------------------------


def test_criterion_03_dpmeans():
    rng = np.random.default_rng(303)
    X, labels, _ = planted_clusters(rng, 500, 5, dim=64, noise=0.02)
    score = ari(labels, batch_dpmeans(X, 0.10).assignments)
    # the store asserts the lambda-distance invariant on every assignment
    store = ClusterStore(lam=0.10, dim=64)
    ids = [store.assign(x, "x", 0, f"p{i}") for i, x in enumerate(X)]
    stream_ari = ari(labels, ids)
    record(3, score >= 0.95, f"batch ARI={score:.4f}, streaming ARI={stream_ari:.4f}, "
                              f"{len(X)} streaming assignments within lambda")


# -- 4: emergence labelling -----------------------------------------------


def test_criterion_04_emergence_labels():
    plats = ["x", "tiktok", "truth", "telegram"]
    mismatches = n_events = n_rows = 0
    for seed in range(10):
        recs = random_timeline(np.random.default_rng(seed), plats)
        tl = Timelines.from_records(recs, plats)
        got = [(e.cluster_id, e.source, e.target, e.source_first_ts, e.target_threshold_ts)
               for e in detect_emergences(tl)]
        want = emergences_bruteforce(recs, plats)
        mismatches += len(set(got) ^ set(want)) + (got != want and set(got) == set(want))
        rows = [(r.t, r.cluster_id, r.source, r.target, r.horizon, r.y)
                for r in make_labels(tl, range(0, 30), (3, 7, 14), 5)]
        oracle = labels_bruteforce(recs, plats, range(0, 30), (3, 7, 14))
        mismatches += len(set(rows) ^ set(oracle)) + (len(rows) != len(oracle))
        n_events += len(want)
        n_rows += len(oracle)
    record(4, mismatches == 0, f"{mismatches} mismatches over 10 seeds ({n_events} emergences, {n_rows} label rows)")


# -- 5: proximity coefficient recovery -----------------------------------


def _beta_estimates(beta: float, reps: int):
    est, covered = [], 0
    for s in range(reps):
        res = generate(SynthConfig(n_users=150, n_narratives=40, duration_days=60, beta1=beta, virality_sd=0.0,
                                   posts_per_adoption=2, log_decisions=True, seed=s))
        m = fit_logistic_fe(adoption_rows(res))
        lo, hi = m.conf_int("R")
        est.append(float(m.coef[m.index("R")]))
        covered += lo <= beta <= hi
    return np.asarray(est), covered


@pytest.mark.slow
def test_criterion_05_proximity_recovery():
    t0 = time.perf_counter()
    est2, cov2 = _beta_estimates(2.0, 20)
    est0, _ = _beta_estimates(0.0, 10)
    sec = time.perf_counter() - t0
    med2, med0 = float(np.median(est2)), float(np.median(est0))
    ok = abs(med2 - 2.0) <= 0.15 and cov2 / 20 >= 0.90 and abs(med0) <= 0.1 and sec < 300
    record(5, ok, f"beta=2: median {med2:.3f}, 95% CI coverage {cov2}/20; beta=0: median {med0:.3f} "
                  f"over 10 seeds; {sec:.0f}s")


# -- 6 and 7: default synthetic corpus end to end -------------------------

E2E_SEEDS = range(10)
BRIDGE_SEEDS = range(5)


@pytest.fixture(scope="module")
def default_runs():
    """Per seed: AUCs of every feature set, popularity, and the monitor strategies."""
    cfg0 = config_from_dict({})
    out = {}
    for seed in E2E_SEEDS:
        t0 = time.perf_counter()
        cfg = config_from_dict({"seed": seed})
        run = PipelineRun.from_posts(generate(SynthConfig(seed=seed)).posts, cfg)
        tab = run.feature_table()

        def auc_of(columns, h, table=tab):
            pred = streaming_forest(table, columns, h, run.window, cfg)
            return auc(table.labels[h][pred.rows], pred.scores)

        res = {"n_posts": len(run.prep.posts)}
        horizons = cfg.horizons if seed == 0 else cfg0.ablation_horizons
        res["discourse"] = {h: auc_of(cfg.features, h) for h in horizons}
        res["prior"] = {h: auc_of(cfg.features + ("transition_prior",), h) for h in horizons}
        res["popularity"] = {h: auc_of(POPULARITY_COLUMNS, h) for h in horizons}
        h = cfg.ablation_horizons[0]
        res["ablation"] = {
            "active": auc_of(("sum_active",), h),
            "ratio": auc_of(("mean_ratio",), h),
            "total": auc_of(("sum_total",), h),
        }
        if seed in BRIDGE_SEEDS:
            from dataclasses import replace
            for strategy in ("cross_degree", "random"):
                cols = run.discourse(monitor=strategy, quantile=0.25, seed=seed)
                sub = replace(tab, columns={**tab.columns, **cols})
                res[strategy] = auc_of(cfg.features, h, sub)
        res["seconds"] = time.perf_counter() - t0
        out[seed] = res
    return out


@pytest.mark.slow
def test_criterion_06_end_to_end_patterns(default_runs):
    first = default_runs[0]
    disc_ok = all(v >= 0.85 for v in first["discourse"].values())
    pop_ok = all(v <= 0.65 for v in first["popularity"].values())
    ordered = 0
    prior_ok = True
    broken = []
    for seed, res in default_runs.items():
        a = res["ablation"]
        h = min(res["discourse"])
        chain = (res["discourse"][h], a["active"], a["ratio"], a["total"])
        if chain[0] > chain[1] > chain[2] > chain[3]:
            ordered += 1
        else:
            broken.append(f"{seed}:" + ">".join(f"{v:.3f}" for v in chain))
        prior_ok &= all(res["prior"][k] >= res["discourse"][k] for k in res["discourse"])
    sec = first["seconds"]
    fmt = lambda d: "/".join(f"{v:.3f}" for _, v in sorted(d.items()))
    detail = (f"seed 0 ({first['n_posts']} posts): discourse AUC {fmt(first['discourse'])}, "
              f"popularity {fmt(first['popularity'])}, +prior {fmt(first['prior'])}; "
              f"ordering held in {ordered}/10 seeds (broken: {' '.join(broken) or 'none'}); "
              f"prior never lowers AUC: {prior_ok}; seed 0 run {sec:.0f}s")
    record(6, disc_ok and pop_ok and ordered >= 8 and prior_ok and sec < 20 * 60, detail)


@pytest.mark.slow
def test_criterion_07_bridge_monitor(default_runs):
    retained, wins = [], 0
    for seed in BRIDGE_SEEDS:
        res = default_runs[seed]
        full = res["discourse"][min(res["discourse"])]
        retained.append(res["cross_degree"] / full)
        wins += res["cross_degree"] > res["random"]
    detail = (f"cross_degree@0.25 retains {min(retained):.3f}-{max(retained):.3f} of full-monitor AUC "
              f"(seed 0 {retained[0]:.3f}); beats random in {wins}/5 seeds")
    record(7, retained[0] >= 0.95 and wins >= 4, detail)


# -- 8: diffusion baselines -----------------------------------------------


def test_criterion_08_diffusion():
    errs_mu, errs_a = [], []
    for seed in range(10):
        ev = simulate_hawkes_events(HawkesParams(2.0, 0.5, 0.0, 1.0), 500.0, seed=seed)
        fit = fit_hawkes(ev, [], 500.0, beta=1.0)
        errs_mu.append(abs(fit.params.mu - 2.0) / 2.0)
        errs_a.append(abs(fit.params.alpha_self - 0.5) / 0.5)
    n_sims, mu, horizon = 4000, 0.7, 2.0
    p = hawkes_emergence_prob(HawkesParams(mu), needed=1, horizon=horizon, n_sims=n_sims, seed=3)
    exact = 1 - math.exp(-mu * horizon)
    mc_err = 3 * math.sqrt(exact * (1 - exact) / n_sims)
    hub = UserRef("x", "hub")
    leaves = [UserRef("truth", f"l{i:02d}") for i in range(12)]
    users = sorted([hub, *leaves])
    h = users.index(hub)
    indptr = np.zeros(len(users) + 1, dtype=np.int64)
    indptr[h + 1:] = len(leaves)
    g = UserGraph(users, indptr, np.asarray([users.index(l) for l in leaves]), np.ones(len(leaves)))
    ic = ic_emergence_prob(g, [hub], "truth", 1, 1, ICParams(p_cross=0.08, n_sims=1000, seed=4))
    ic_exact = 1 - (1 - 0.08) ** 12
    ok = (np.median(errs_mu) <= 0.15 and np.median(errs_a) <= 0.15 and abs(p - exact) <= mc_err
          and abs(ic - ic_exact) <= 0.03)
    record(8, ok, f"Hawkes median rel err mu {np.median(errs_mu):.3f}, alpha {np.median(errs_a):.3f}; "
                  f"Poisson tail {p:.4f} vs {exact:.4f} (3 s.e. {mc_err:.4f}); IC {ic:.3f} vs {ic_exact:.3f}")


# -- 9: leakage sentinel --------------------------------------------------


def test_criterion_09_no_leakage(small_synth, tmp_path):
    from test_pipeline import CUT_DAY, feature_bytes, inject_future, label_bytes, prediction_bytes
    cfg = config_from_dict(small_config())
    base = PipelineRun.from_posts(small_synth.posts, cfg)
    tampered = PipelineRun.from_posts(inject_future(small_synth.posts, CUT_DAY), cfg)
    ta, tb = base.feature_table(), tampered.feature_table()
    same_f = feature_bytes(ta, CUT_DAY) == feature_bytes(tb, CUT_DAY)
    same_l = label_bytes(ta, CUT_DAY) == label_bytes(tb, CUT_DAY)
    same_p = prediction_bytes(ta, base, tmp_path, "a", CUT_DAY) == prediction_bytes(tb, tampered, tmp_path, "b", CUT_DAY)
    n_extra = len(tampered.prep.posts) - len(base.prep.posts)
    record(9, same_f and same_l and same_p,
           f"{n_extra} posts injected from day {CUT_DAY}: features identical {same_f}, labels {same_l}, "
           f"predictions {same_p}")


# -- 10: determinism ------------------------------------------------------


def test_criterion_10_determinism(small_corpus_dir, tmp_path, capsys):
    cfg = tmp_path / "config.json"
    cfg.write_text(json.dumps(small_config()))
    dirs = []
    for name, workers in (("a", 1), ("b", 1), ("c", 2)):
        out = tmp_path / name
        for cmd in ("features", "evaluate"):
            src = small_corpus_dir if cmd == "features" else out
            assert cli_main([cmd, "--config", str(cfg), "--in", str(src), "--out", str(out),
                             "--workers", str(workers)]) == 0
        assert cli_main(["report", "--in", str(out), "--out", str(out)]) == 0
        dirs.append(out)
    capsys.readouterr()
    names = sorted(p.name for p in dirs[0].iterdir())
    same = all(sorted(p.name for p in d.iterdir()) == names and
               all((d / n).read_bytes() == (dirs[0] / n).read_bytes() for n in names) for d in dirs[1:])
    record(10, same, f"{len(names)} report files byte-identical across two runs and --workers 1/2")


# -- 11: metric oracles ---------------------------------------------------


def test_criterion_11_metric_oracles():
    rng = np.random.default_rng(1111)
    exact = True
    for _ in range(50):
        y = rng.integers(0, 2, 20)
        y[:2] = (0, 1)
        s = rng.integers(0, 5, 20).astype(float)
        keys = [(int(i),) for i in rng.permutation(20)]
        exact &= auc(y, s) == auc_pairs(y, s)
        for pct in (5, 10, 50):
            exact &= precision_at_k(y, s, pct, keys) == precision_at_k_manual(y, s, pct, keys)
        pred = s >= 2
        tp, fp, fn = int((pred & (y == 1)).sum()), int((pred & (y == 0)).sum()), int((~pred & (y == 1)).sum())
        m = threshold_metrics(y, s, 2)
        f1 = 2 * tp / (2 * tp + fp + fn) if tp else 0.0
        exact &= math.isclose(m.f1, f1, abs_tol=1e-12)
        order = sorted(range(20), key=lambda i: (-s[i], keys[i]))
        for pct, rec in cumulative_gain(y, s, keys, percents=(0, 10, 25, 50, 100)):
            top = math.ceil(20 * pct / 100 - 1e-9)
            exact &= rec == sum(y[i] for i in order[:top]) / y.sum()
    # 20k instances put 200 in the top 1%, so one draw has sd ~0.026 around the base rate
    base, n = 0.16, 20_000
    p1 = []
    for seed in range(20):
        r = np.random.default_rng(seed)
        p1.append(precision_at_k(r.random(n) < base, r.random(n), 1))
    worst = max(abs(v - base) for v in p1)
    mean = float(np.mean(p1))
    record(11, exact and worst <= 0.08 and abs(mean - base) <= 0.08,
           f"AUC/P@k/F1/gain exact on 50 hand sets of 20: {exact}; random P@1% mean {mean:.3f}, every draw "
           f"within {worst:.3f} of base rate {base} (20 draws of {n})")
