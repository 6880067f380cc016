"""Classifiers and statistical validation models.

* :class:`Standardizer`: z-scores fitted on training rows only.
* :func:`fit_forest`: bagged class-weighted Gini trees, built with numba.
* :func:`fit_logistic_fe`: fixed-effects logit by IRLS with user-clustered
  sandwich errors; :func:`weighted_or` and :func:`quintile_lift` summarize it.
"""

from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numba
import numpy as np
from scipy import stats

MODEL_FORMAT_VERSION = 1


class ModelError(ValueError):
    pass


# -- standardizer ---------------------------------------------------------


@dataclass
class Standardizer:
    mean: np.ndarray
    scale: np.ndarray

    def transform(self, X: np.ndarray) -> np.ndarray:
        return (np.asarray(X, dtype=np.float64) - self.mean) / self.scale

    def inverse(self, Z: np.ndarray) -> np.ndarray:
        return np.asarray(Z, dtype=np.float64) * self.scale + self.mean


def fit_standardizer(X: np.ndarray) -> Standardizer:
    """Column means and population std; constant columns pass through untouched."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or len(X) == 0:
        raise ModelError("empty training set")
    if len(X) < 2:
        raise ModelError("standardizer needs at least two training rows")
    mean = X.mean(axis=0)
    std = X.std(axis=0)
    degenerate = std <= 1e-12 * np.maximum(1.0, np.abs(mean))
    mean = np.where(degenerate, 0.0, mean)
    std = np.where(degenerate, 1.0, std)
    return Standardizer(mean, std)


# -- random forest --------------------------------------------------------

MAX_BINS = 1024


@dataclass
class BinMapper:
    """Per-feature split grid: unique training values, or rank quantiles past ``MAX_BINS``."""

    uppers: list[np.ndarray]
    thresholds: list[np.ndarray]

    @classmethod
    def fit(cls, X: np.ndarray, max_bins: int = MAX_BINS) -> BinMapper:
        uppers, thresholds = [], []
        for j in range(X.shape[1]):
            u = np.unique(X[:, j])
            if len(u) > max_bins:
                # quantile edges taken from the sorted sample keep splits order-based
                srt = np.sort(X[:, j])
                cut = srt[np.linspace(0, len(srt) - 1, max_bins + 1).astype(np.int64)[1:]]
                u = np.unique(cut)
            uppers.append(u)
            thresholds.append(_bin_thresholds(X[:, j], u))
        return cls(uppers, thresholds)

    def transform(self, X: np.ndarray) -> np.ndarray:
        codes = np.empty(X.shape, dtype=np.int32)
        for j, u in enumerate(self.uppers):
            codes[:, j] = np.minimum(np.searchsorted(u, X[:, j], side="left"), len(u) - 1)
        return codes

    @property
    def n_bins(self) -> np.ndarray:
        return np.asarray([len(u) for u in self.uppers], dtype=np.int64)

    def threshold_table(self) -> np.ndarray:
        width = max(1, int(self.n_bins.max()))
        T = np.full((len(self.uppers), width), np.nan)
        for j, t in enumerate(self.thresholds):
            T[j, :len(t)] = t
        return T


def _bin_thresholds(col: np.ndarray, uppers: np.ndarray) -> np.ndarray:
    """Midpoint between the largest value in bin b and the smallest in bin b+1."""
    srt = np.sort(col)
    out = np.empty(max(len(uppers) - 1, 0))
    for b in range(len(uppers) - 1):
        lo = uppers[b]
        nxt = srt[np.searchsorted(srt, lo, side="right")]
        out[b] = lo + (nxt - lo) / 2.0
    return out


@numba.njit(nogil=True, cache=True)
def _build_tree(codes, y, w, cnt, n_bins, thr, min_leaf, max_depth):
    n, d = codes.shape
    cap = 2 * n + 1
    feature = np.full(cap, -1, np.int64)
    threshold = np.zeros(cap)
    left = np.full(cap, -1, np.int64)
    right = np.full(cap, -1, np.int64)
    value = np.zeros(cap)
    idx = np.arange(n)
    st_node = np.zeros(cap, np.int64)
    st_lo = np.zeros(cap, np.int64)
    st_hi = np.zeros(cap, np.int64)
    st_depth = np.zeros(cap, np.int64)
    top = 0
    st_node[0] = 0
    st_lo[0] = 0
    st_hi[0] = n
    top = 1
    n_nodes = 1
    maxb = 1
    for j in range(d):
        if n_bins[j] > maxb:
            maxb = n_bins[j]
    h0 = np.zeros(maxb)
    h1 = np.zeros(maxb)
    hc = np.zeros(maxb, np.int64)
    while top > 0:
        top -= 1
        node = st_node[top]
        lo = st_lo[top]
        hi = st_hi[top]
        depth = st_depth[top]
        w0 = 0.0
        w1 = 0.0
        c = 0
        for ii in range(lo, hi):
            i = idx[ii]
            if y[i] == 1:
                w1 += w[i]
            else:
                w0 += w[i]
            c += cnt[i]
        W = w0 + w1
        value[node] = w1 / W if W > 0 else 0.0
        if w0 == 0.0 or w1 == 0.0 or c < 2 * min_leaf or (max_depth > 0 and depth >= max_depth):
            continue
        parent = (w0 * w0 + w1 * w1) / W
        best_score = parent + 1e-12 * W
        best_f = -1
        best_b = -1
        for f in range(d):
            nb = n_bins[f]
            if nb < 2:
                continue
            for b in range(nb):
                h0[b] = 0.0
                h1[b] = 0.0
                hc[b] = 0
            for ii in range(lo, hi):
                i = idx[ii]
                b = codes[i, f]
                if y[i] == 1:
                    h1[b] += w[i]
                else:
                    h0[b] += w[i]
                hc[b] += cnt[i]
            l0 = 0.0
            l1 = 0.0
            lc = 0
            for b in range(nb - 1):
                l0 += h0[b]
                l1 += h1[b]
                lc += hc[b]
                if lc < min_leaf:
                    continue
                if c - lc < min_leaf:
                    break
                WL = l0 + l1
                r0 = w0 - l0
                r1 = w1 - l1
                WR = r0 + r1
                if WL <= 0.0 or WR <= 0.0:
                    continue
                score = (l0 * l0 + l1 * l1) / WL + (r0 * r0 + r1 * r1) / WR
                if score > best_score:
                    best_score = score
                    best_f = f
                    best_b = b
        if best_f < 0:
            continue
        # partition idx[lo:hi] so codes <= best_b come first
        a = lo
        z = hi - 1
        while a <= z:
            if codes[idx[a], best_f] <= best_b:
                a += 1
            else:
                tmp = idx[a]
                idx[a] = idx[z]
                idx[z] = tmp
                z -= 1
        feature[node] = best_f
        threshold[node] = thr[best_f, best_b]
        lnode = n_nodes
        rnode = n_nodes + 1
        n_nodes += 2
        left[node] = lnode
        right[node] = rnode
        st_node[top] = rnode
        st_lo[top] = a
        st_hi[top] = hi
        st_depth[top] = depth + 1
        top += 1
        st_node[top] = lnode
        st_lo[top] = lo
        st_hi[top] = a
        st_depth[top] = depth + 1
        top += 1
    return feature[:n_nodes], threshold[:n_nodes], left[:n_nodes], right[:n_nodes], value[:n_nodes]


@numba.njit(nogil=True, cache=True)
def _predict_tree(X, feature, threshold, left, right, value, out):
    for i in range(X.shape[0]):
        node = 0
        while feature[node] >= 0:
            if X[i, feature[node]] <= threshold[node]:
                node = left[node]
            else:
                node = right[node]
        out[i] += value[node]


@dataclass
class Tree:
    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray

    def to_dict(self) -> dict:
        return {
            "feature": self.feature.tolist(),
            "threshold": [float(x) for x in self.threshold],
            "left": self.left.tolist(),
            "right": self.right.tolist(),
            "value": [float(x) for x in self.value],
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> Tree:
        return cls(
            np.asarray(d["feature"], dtype=np.int64),
            np.asarray(d["threshold"], dtype=np.float64),
            np.asarray(d["left"], dtype=np.int64),
            np.asarray(d["right"], dtype=np.int64),
            np.asarray(d["value"], dtype=np.float64),
        )


@dataclass
class ForestConfig:
    n_trees: int = 100
    min_leaf: int = 5
    max_depth: int | None = None
    workers: int = 1


@dataclass
class RandomForestModel:
    trees: list[Tree]
    n_features: int
    seed: int
    config: ForestConfig = field(default_factory=ForestConfig)

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        X = np.ascontiguousarray(np.atleast_2d(np.asarray(X, dtype=np.float64)))
        if X.shape[1] != self.n_features:
            raise ModelError(f"expected {self.n_features} features, got {X.shape[1]}")
        out = np.zeros(len(X))
        for t in self.trees:
            _predict_tree(X, t.feature, t.threshold, t.left, t.right, t.value, out)
        return np.clip(out / len(self.trees), 0.0, 1.0)

    def to_json(self) -> str:
        return json.dumps(
            {
                "format": "narrative_flux.forest",
                "version": MODEL_FORMAT_VERSION,
                "n_features": self.n_features,
                "seed": self.seed,
                "min_leaf": self.config.min_leaf,
                "max_depth": self.config.max_depth,
                "trees": [t.to_dict() for t in self.trees],
            },
            separators=(",", ":"),
        )

    @classmethod
    def from_json(cls, text: str) -> RandomForestModel:
        d = json.loads(text)
        if d.get("format") != "narrative_flux.forest" or d.get("version") != MODEL_FORMAT_VERSION:
            raise ModelError("unsupported model dump")
        cfg = ForestConfig(n_trees=len(d["trees"]), min_leaf=d["min_leaf"], max_depth=d["max_depth"])
        return cls([Tree.from_dict(t) for t in d["trees"]], d["n_features"], d["seed"], cfg)


def predict_proba(model: RandomForestModel, X: np.ndarray) -> np.ndarray:
    return model.predict_proba(X)


def _fit_one(codes, y, mult, n_bins, thr, min_leaf, max_depth, seed) -> Tree:
    g = len(y)
    rng = np.random.default_rng(seed)
    # n / gcd(multiplicities) draws: the plain bootstrap size, unchanged by k-fold duplication
    n_draw = int(mult.sum() // np.gcd.reduce(mult))
    cum = np.cumsum(mult)
    picks = np.searchsorted(cum, rng.random(n_draw) * cum[-1], side="right")
    draws = np.bincount(np.minimum(picks, g - 1), minlength=g)
    rows = np.flatnonzero(draws)
    cnt = draws[rows].astype(np.int64)
    yb = y[rows]
    n1 = int(cnt[yb == 1].sum())
    n0 = int(cnt.sum()) - n1
    # class weights from this tree's bootstrap; a one-class draw keeps unit weights
    if n0 and n1:
        cw = np.array([n_draw / (2.0 * n0), n_draw / (2.0 * n1)])
    else:
        cw = np.ones(2)
    w = cnt * cw[yb]
    parts = _build_tree(
        np.ascontiguousarray(codes[rows]), yb.astype(np.int8), w.astype(np.float64), cnt,
        n_bins, thr, min_leaf, -1 if max_depth is None else max_depth,
    )
    return Tree(*parts)


def fit_forest(X: np.ndarray, y: np.ndarray, cfg: ForestConfig | None = None, seed: int = 0) -> RandomForestModel:
    """Bagged class-weighted Gini trees; tree ``i`` draws its bootstrap from ``seed + i``.

    Identical (row, label) pairs are pooled first. Each bootstrap makes
    ``n / gcd(multiplicities)`` draws with probability proportional to
    multiplicity: the usual ``n`` draws for ordinary data, and exactly the
    same forest when the whole training set is repeated k times. Every feature is a split candidate at every node. A leaf
    predicts the class-weighted positive fraction of its bootstrap rows.
    """
    cfg = cfg or ForestConfig()
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y).astype(np.int64).ravel()
    if X.ndim != 2 or len(X) != len(y):
        raise ModelError("X and y shapes disagree")
    if not np.all(np.isfinite(X)):
        raise ModelError("non-finite feature values")
    if set(np.unique(y).tolist()) - {0, 1}:
        raise ModelError("labels must be 0/1")
    if y.min() == y.max():
        raise ModelError("single-class training set")
    mapper = BinMapper.fit(X)
    codes = mapper.transform(X)
    n_bins = mapper.n_bins
    thr = mapper.threshold_table()
    pooled, mult = np.unique(np.column_stack([codes, y]), axis=0, return_counts=True)
    gcodes = np.ascontiguousarray(pooled[:, :-1], dtype=np.int32)
    gy = pooled[:, -1].astype(np.int64)

    def job(i: int) -> Tree:
        return _fit_one(gcodes, gy, mult, n_bins, thr, cfg.min_leaf, cfg.max_depth, seed + i)

    if cfg.workers > 1:
        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            trees = list(pool.map(job, range(cfg.n_trees)))
    else:
        trees = [job(i) for i in range(cfg.n_trees)]
    return RandomForestModel(trees, X.shape[1], seed, cfg)


# -- fixed-effects logistic regression -------------------------------------


@dataclass
class AdoptionRows:
    """One row per (user, narrative, period) adoption decision."""

    user: np.ndarray
    platform: np.ndarray
    period: np.ndarray
    R: np.ndarray
    posts: np.ndarray
    adopted: np.ndarray

    def __post_init__(self) -> None:
        self.user = np.asarray(self.user)
        self.platform = np.asarray(self.platform)
        self.period = np.asarray(self.period)
        self.R = np.asarray(self.R, dtype=np.float64)
        self.posts = np.asarray(self.posts, dtype=np.float64)
        self.adopted = np.asarray(self.adopted, dtype=np.int64)
        n = len(self.adopted)
        for name in ("user", "platform", "period", "R", "posts"):
            if len(getattr(self, name)) != n:
                raise ModelError(f"adoption rows: {name} has wrong length")

    def __len__(self) -> int:
        return len(self.adopted)


@dataclass
class LogisticModel:
    names: list[str]
    coef: np.ndarray
    cov: np.ndarray
    loglik: float
    n_iter: int
    n_obs: int
    n_clusters: int
    gradient: np.ndarray

    def index(self, name: str) -> int:
        return self.names.index(name)

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.maximum(np.diag(self.cov), 0.0))

    def conf_int(self, name: str, level: float = 0.95) -> tuple[float, float]:
        i = self.index(name)
        z = stats.norm.ppf(0.5 + level / 2)
        return float(self.coef[i] - z * self.se[i]), float(self.coef[i] + z * self.se[i])

    def report_rows(self) -> list[tuple[str, float, float, float, float, float]]:
        se = self.se
        out = []
        for name, b, s in zip(self.names, self.coef, se):
            z = b / s if s > 0 else float("nan")
            p = 2 * stats.norm.sf(abs(z)) if s > 0 else float("nan")
            out.append((name, float(b), float(s), float(z), float(p), float(math.exp(b))))
        return out

    def write_report(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("coefficient", "estimate", "clustered_se", "z", "p", "odds_ratio"))
            for row in self.report_rows():
                w.writerow((row[0], *(f"{v:.10g}" for v in row[1:])))


def _dummies(values: np.ndarray, prefix: str) -> tuple[np.ndarray, list[str]]:
    levels = np.unique(values)
    cols = [(values == lv).astype(np.float64) for lv in levels[1:]]
    names = [f"{prefix}[{lv}]" for lv in levels[1:]]
    return (np.column_stack(cols) if cols else np.zeros((len(values), 0))), names


def logistic_design(
    rows: AdoptionRows,
    interactions: bool = False,
    binarize: bool = False,
    activity_control: bool = True,
    platform_fe: bool = True,
    period_fe: bool = True,
) -> tuple[np.ndarray, list[str]]:
    """Design matrix with one reference level dropped per fixed-effect group."""
    R = (rows.R > 0).astype(np.float64) if binarize else rows.R
    cols = [np.ones(len(rows))]
    names = ["intercept"]
    if interactions:
        for p in np.unique(rows.platform):
            cols.append(R * (rows.platform == p))
            names.append(f"R:{p}")
    else:
        cols.append(R)
        names.append("R")
    if activity_control:
        cols.append(np.log1p(rows.posts))
        names.append("log1p_posts")
    X = np.column_stack(cols)
    for enabled, values, prefix in ((platform_fe, rows.platform, "platform"), (period_fe, rows.period, "period")):
        if enabled:
            D, dn = _dummies(values, prefix)
            X = np.hstack([X, D])
            names += dn
    return X, names


def _loglik(X: np.ndarray, y: np.ndarray, beta: np.ndarray) -> float:
    eta = X @ beta
    return float(np.sum(y * eta - np.logaddexp(0.0, eta)))


def fit_logistic_fe(
    rows: AdoptionRows,
    interactions: bool = False,
    binarize: bool = False,
    activity_control: bool = True,
    platform_fe: bool = True,
    period_fe: bool = True,
    tol: float = 1e-8,
    max_iter: int = 100,
    separation_bound: float = 30.0,
) -> LogisticModel:
    """Maximum-likelihood logit by IRLS with a user-clustered sandwich covariance.

    Iterates until the log-likelihood changes by less than ``tol`` (at most
    ``max_iter`` Newton steps). Raises ``ModelError`` with "collinear" for a
    rank-deficient design and "quasi-separation" when a coefficient exceeds
    ``separation_bound`` in magnitude.
    """
    y = rows.adopted.astype(np.float64)
    if len(y) == 0 or y.min() == y.max():
        raise ModelError("no variation in outcome")
    X, names = logistic_design(rows, interactions, binarize, activity_control, platform_fe, period_fe)
    n, p = X.shape
    if np.linalg.matrix_rank(X) < p:
        R = X[:, 1]
        if np.ptp(R) == 0:
            raise ModelError("collinear: R has no variation, coefficient cannot be identified")
        raise ModelError("collinear: design matrix is rank-deficient")
    beta = np.zeros(p)
    ll = _loglik(X, y, beta)
    it = 0
    for it in range(1, max_iter + 1):
        eta = X @ beta
        mu = 1.0 / (1.0 + np.exp(-eta))
        wts = np.maximum(mu * (1.0 - mu), 1e-12)
        H = X.T @ (X * wts[:, None])
        step = np.linalg.solve(H, X.T @ (y - mu))
        new_beta = beta + step
        new_ll = _loglik(X, y, new_beta)
        # Newton on the logit likelihood may overshoot far from the optimum
        halvings = 0
        while new_ll < ll - 1e-12 and halvings < 30:
            step /= 2.0
            new_beta = beta + step
            new_ll = _loglik(X, y, new_beta)
            halvings += 1
        beta, delta, ll = new_beta, new_ll - ll, new_ll
        if np.max(np.abs(beta)) > separation_bound:
            raise ModelError("quasi-separation: coefficient magnitude exceeds bound")
        if abs(delta) < tol and np.max(np.abs(step)) < 1e-6:
            break
    mu = 1.0 / (1.0 + np.exp(-(X @ beta)))
    score = X * (y - mu)[:, None]
    grad = score.sum(axis=0)
    H = X.T @ (X * (mu * (1 - mu))[:, None])
    Hinv = np.linalg.inv(H)
    _, g_idx = np.unique(rows.user, return_inverse=True)
    G = int(g_idx.max()) + 1
    S = np.zeros((G, p))
    np.add.at(S, g_idx, score)
    meat = S.T @ S
    corr = (G / (G - 1)) * ((n - 1) / (n - p)) if G > 1 and n > p else 1.0
    cov = corr * Hinv @ meat @ Hinv
    return LogisticModel(names, beta, cov, ll, it, n, G, grad)


def weighted_or(model: LogisticModel, weights: Mapping[str, float], level: float = 0.95) -> tuple[float, tuple[float, float]]:
    """``exp(sum_p w_p * beta_p)`` over platform interaction terms, delta-method CI."""
    w = np.asarray(list(weights.values()), dtype=np.float64)
    if abs(w.sum() - 1.0) > 1e-9:
        raise ModelError("platform weights must sum to 1")
    idx = []
    for p in weights:
        name = f"R:{p}"
        if name not in model.names:
            raise ModelError(f"missing interaction coefficient {name}")
        idx.append(model.index(name))
    b = model.coef[idx]
    V = model.cov[np.ix_(idx, idx)]
    est = float(w @ b)
    sd = math.sqrt(max(float(w @ V @ w), 0.0))
    z = stats.norm.ppf(0.5 + level / 2)
    return math.exp(est), (math.exp(est - z * sd), math.exp(est + z * sd))


@dataclass
class LiftResult:
    lift: float
    ci: tuple[float, float]
    bottom_rate: float
    top_rate: float
    floored: bool


def _quintile_rates(R: np.ndarray, adopted: np.ndarray) -> tuple[float, float, bool]:
    order = np.argsort(R, kind="stable")
    groups = np.array_split(order, 5)
    if any(len(g) == 0 for g in groups):
        raise ModelError("empty quintile")
    bottom, top = groups[0], groups[-1]
    rb = adopted[bottom].mean()
    rt = adopted[top].mean()
    floored = rb == 0
    if floored:
        rb = 0.5 / len(bottom)
    return float(rb), float(rt), bool(floored)


def quintile_lift(R: np.ndarray, adopted: np.ndarray, n_boot: int = 1000, seed: int = 0, level: float = 0.95) -> LiftResult:
    """Top-vs-bottom quintile adoption-rate lift ``top/bottom - 1`` with a percentile bootstrap CI."""
    R = np.asarray(R, dtype=np.float64)
    a = np.asarray(adopted, dtype=np.float64)
    if len(R) < 50:
        raise ModelError("quintile lift needs at least 50 rows")
    rb, rt, floored = _quintile_rates(R, a)
    rng = np.random.default_rng(seed)
    boots = np.empty(n_boot)
    for i in range(n_boot):
        s = rng.integers(0, len(R), len(R))
        b, t, _ = _quintile_rates(R[s], a[s])
        boots[i] = t / b - 1.0
    q = (1 - level) / 2
    lo, hi = np.quantile(boots, [q, 1 - q])
    return LiftResult(rt / rb - 1.0, (float(lo), float(hi)), rb, rt, floored)
