"""Epidemic-style baselines: exogenously driven Hawkes process and independent cascade."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numba
import numpy as np

from .graph import UserGraph

MU_FLOOR = 1e-3
BRANCHING_CAP = 0.99


@dataclass(frozen=True)
class HawkesParams:
    """Intensity ``mu + a_self * sum exp(-beta dt) + a_exo * sum exp(-beta ds)`` in events/day."""

    mu: float
    alpha_self: float = 0.0
    alpha_exo: float = 0.0
    beta: float = 1.0

    def __post_init__(self) -> None:
        if self.mu < 0 or self.alpha_self < 0 or self.alpha_exo < 0 or self.beta <= 0:
            raise ValueError("Hawkes parameters must be nonnegative with beta > 0")


@dataclass(frozen=True)
class ICParams:
    p_within: float = 0.3
    p_cross: float = 0.1
    steps_per_day: int = 1
    n_sims: int = 1000
    seed: int = 0

    def __post_init__(self) -> None:
        if not (0 <= self.p_within <= 1 and 0 <= self.p_cross <= 1):
            raise ValueError("IC probabilities must lie in [0,1]")


def jitter(times: np.ndarray) -> np.ndarray:
    """Sort and break exact ties by ``+1e-6 * rank`` within each tied run."""
    t = np.sort(np.asarray(times, dtype=np.float64))
    if len(t) < 2:
        return t
    out = t.copy()
    run = 0
    for i in range(1, len(t)):
        run = run + 1 if t[i] == t[i - 1] else 0
        out[i] = t[i] + 1e-6 * run
    return out


def _excite(tgt: np.ndarray, src: np.ndarray, beta: float) -> tuple[np.ndarray, np.ndarray]:
    n = len(tgt)
    A = np.zeros(n)
    if n > 1:
        A = _recursive_sum(tgt, beta)
    B = np.zeros(n)
    if len(src) and n:
        B = _cross_sum(tgt, src, beta)
    return A, B


@numba.njit(cache=True)
def _recursive_sum(t, beta):
    n = len(t)
    A = np.zeros(n)
    for i in range(1, n):
        A[i] = math.exp(-beta * (t[i] - t[i - 1])) * (1.0 + A[i - 1])
    return A


@numba.njit(cache=True)
def _cross_sum(t, s, beta):
    """sum over source events strictly before each target event, in one merged pass."""
    n = len(t)
    B = np.zeros(n)
    acc = 0.0
    cur = 0.0
    j = 0
    started = False
    for i in range(n):
        while j < len(s) and s[j] < t[i]:
            if started:
                acc = acc * math.exp(-beta * (s[j] - cur)) + 1.0
            else:
                acc = 1.0
                started = True
            cur = s[j]
            j += 1
        if started:
            acc = acc * math.exp(-beta * (t[i] - cur))
            cur = t[i]
        B[i] = acc
    return B


def _compensator_terms(tgt: np.ndarray, src: np.ndarray, T: float, beta: float) -> tuple[float, float]:
    ct = float(np.sum(1.0 - np.exp(-beta * (T - tgt)))) / beta
    s = src[src < T]
    cs = float(np.sum(1.0 - np.exp(-beta * (T - s)))) / beta
    return ct, cs


class HawkesLikelihood:
    """Log-likelihood and gradient on a fixed observation window ``[0, T]``."""

    def __init__(self, target: np.ndarray, source: np.ndarray, T: float, beta: float = 1.0):
        self.t = jitter(target)
        self.s = jitter(source)
        if len(self.t) and self.t[-1] > T:
            raise ValueError("target events beyond observation window")
        self.T = float(T)
        self.beta = float(beta)
        self.A, self.B = _excite(self.t, self.s, self.beta)
        self.ct, self.cs = _compensator_terms(self.t, self.s, self.T, self.beta)

    def value(self, theta: np.ndarray) -> float:
        mu, a, b = theta
        lam = mu + a * self.A + b * self.B
        if np.any(lam <= 0):
            return -math.inf
        return float(np.sum(np.log(lam)) - mu * self.T - a * self.ct - b * self.cs)

    def gradient(self, theta: np.ndarray) -> np.ndarray:
        mu, a, b = theta
        lam = mu + a * self.A + b * self.B
        inv = 1.0 / lam
        return np.array([
            inv.sum() - self.T,
            (self.A * inv).sum() - self.ct,
            (self.B * inv).sum() - self.cs,
        ])

    def curvature(self, theta: np.ndarray) -> np.ndarray:
        """Diagonal of the negative Hessian."""
        mu, a, b = theta
        lam = mu + a * self.A + b * self.B
        inv2 = 1.0 / (lam * lam)
        return np.array([inv2.sum(), (self.A ** 2 * inv2).sum(), (self.B ** 2 * inv2).sum()])


def hawkes_loglik(params: HawkesParams, target: np.ndarray, source: np.ndarray, T: float) -> float:
    L = HawkesLikelihood(np.asarray(target), np.asarray(source), T, params.beta)
    return L.value(np.array([params.mu, params.alpha_self, params.alpha_exo]))


@dataclass
class HawkesFit:
    params: HawkesParams
    loglik_path: list[float]
    n_iter: int
    converged: bool


def fit_hawkes(
    target_events,
    source_events,
    T: float,
    beta: float = 1.0,
    max_iter: int = 500,
    tol: float = 1e-6,
) -> HawkesFit:
    """Projected gradient ascent on ``(mu, alpha_self, alpha_exo)`` with Armijo backtracking.

    Steps are scaled by the inverse diagonal curvature. The box keeps
    ``mu >= 1e-3``, alphas nonnegative and ``alpha_self / beta <= 0.99``.
    """
    tgt = np.asarray(target_events, dtype=np.float64)
    src = np.asarray(source_events, dtype=np.float64)
    if len(tgt) == 0:
        return HawkesFit(HawkesParams(MU_FLOOR, 0.0, 0.0, beta), [], 0, True)
    L = HawkesLikelihood(tgt, src, T, beta)
    lo = np.array([MU_FLOOR, 0.0, 0.0])
    hi = np.array([np.inf, BRANCHING_CAP * beta, np.inf])
    if not len(src):
        hi[2] = 0.0
    theta = np.array([max(len(tgt) / T * 0.5, MU_FLOOR), 0.1 * beta, 0.0 if not len(src) else 0.1])
    theta = np.clip(theta, lo, hi)
    ll = L.value(theta)
    path = [ll]
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        g = L.gradient(theta)
        pg = np.clip(theta + g, lo, hi) - theta
        if np.linalg.norm(pg) < tol:
            converged = True
            break
        scale = 1.0 / np.maximum(L.curvature(theta), 1e-12)
        step = 1.0
        while True:
            cand = np.clip(theta + step * scale * g, lo, hi)
            cll = L.value(cand)
            if cll >= ll + 1e-4 * float(g @ (cand - theta)):
                break
            step *= 0.5
            if step < 1e-12:
                cand, cll = theta, ll
                break
        if cll - ll < 1e-12 * max(1.0, abs(ll)) and np.allclose(cand, theta, rtol=1e-10, atol=1e-12):
            converged = True
            break
        theta, ll = cand, cll
        path.append(ll)
    return HawkesFit(HawkesParams(float(theta[0]), float(theta[1]), float(theta[2]), beta), path, it, converged)


@numba.njit(cache=True)
def _simulate_counts(mu, a_self, a_exo, beta, exc_self0, exc_exo0, horizon, needed, n_sims, seed, stop_early):
    out = np.zeros(n_sims, np.int64)
    for s in range(n_sims):
        np.random.seed(seed + s)
        t = 0.0
        es = exc_self0
        ex = exc_exo0
        count = 0
        while True:
            lam_bar = mu + a_self * es + a_exo * ex
            if lam_bar <= 0.0:
                break
            w = np.random.exponential(1.0 / lam_bar)
            t_new = t + w
            if t_new > horizon:
                break
            decay = math.exp(-beta * w)
            es *= decay
            ex *= decay
            t = t_new
            lam = mu + a_self * es + a_exo * ex
            if np.random.random() * lam_bar <= lam:
                count += 1
                es += 1.0
                if stop_early and count >= needed:
                    break
        out[s] = count
    return out


def simulate_hawkes(
    params: HawkesParams,
    horizon: float,
    n_sims: int = 1,
    seed: int = 0,
    history_target=(),
    history_source=(),
    t_now: float = 0.0,
) -> np.ndarray:
    """Ogata thinning over ``(t_now, t_now + horizon]``; returns per-run event counts."""
    es, ex = _history_excitation(history_target, history_source, t_now, params.beta)
    return _simulate_counts(params.mu, params.alpha_self, params.alpha_exo, params.beta, es, ex,
                            float(horizon), 1 << 62, n_sims, seed, False)


def simulate_hawkes_events(params: HawkesParams, T: float, seed: int = 0, source=()) -> np.ndarray:
    """One Ogata-thinned event path on ``[0, T]`` (source events as exogenous input)."""
    rng = np.random.default_rng(seed)
    src = np.sort(np.asarray(source, dtype=np.float64))
    events: list[float] = []
    t = 0.0
    es = ex = 0.0
    j = 0
    b = params.beta
    while True:
        lam_bar = params.mu + params.alpha_self * es + params.alpha_exo * ex
        nxt_src = src[j] if j < len(src) else math.inf
        w = rng.exponential(1.0 / lam_bar) if lam_bar > 0 else math.inf
        if t + w >= nxt_src:
            # intensity jumps at the source event; restart the bound there
            decay = math.exp(-b * (nxt_src - t))
            es *= decay
            ex = ex * decay + 1.0
            t = nxt_src
            j += 1
            if t > T:
                break
            continue
        t += w
        if t > T:
            break
        decay = math.exp(-b * w)
        es *= decay
        ex *= decay
        lam = params.mu + params.alpha_self * es + params.alpha_exo * ex
        if rng.random() * lam_bar <= lam:
            events.append(t)
            es += 1.0
    return np.asarray(events)


def _history_excitation(target, source, t_now: float, beta: float) -> tuple[float, float]:
    tg = np.asarray(target, dtype=np.float64)
    sr = np.asarray(source, dtype=np.float64)
    es = float(np.exp(-beta * (t_now - tg[tg <= t_now])).sum()) if len(tg) else 0.0
    ex = float(np.exp(-beta * (t_now - sr[sr <= t_now])).sum()) if len(sr) else 0.0
    return es, ex


def hawkes_emergence_prob(
    params: HawkesParams,
    needed: int,
    horizon: float,
    n_sims: int = 1000,
    seed: int = 0,
    history_target=(),
    history_source=(),
    t_now: float = 0.0,
) -> float:
    """Fraction of thinning runs on ``(t_now, t_now + horizon]`` reaching ``needed`` target events.

    Future source activity is not forecast; history contributes only its
    decaying excitation.
    """
    if needed <= 0:
        return 1.0
    es, ex = _history_excitation(history_target, history_source, t_now, params.beta)
    counts = _simulate_counts(params.mu, params.alpha_self, params.alpha_exo, params.beta, es, ex,
                              float(horizon), int(needed), n_sims, seed, True)
    return float(np.mean(counts >= needed))


# -- independent cascade ---------------------------------------------------


@numba.njit(cache=True)
def _ic_runs(indptr, indices, cross, on_target, seeds, p_within, p_cross, rounds, needed, n_sims, seed):
    n = len(indptr) - 1
    hits = 0
    state = np.zeros(n, np.int64)
    frontier = np.empty(n, np.int64)
    nxt = np.empty(n, np.int64)
    for s in range(n_sims):
        np.random.seed(seed + s)
        stamp = s + 1
        nf = 0
        for u in seeds:
            if state[u] != stamp:
                state[u] = stamp
                frontier[nf] = u
                nf += 1
        gained = 0
        r = 0
        while r < rounds and nf > 0 and gained < needed:
            nn = 0
            for fi in range(nf):
                u = frontier[fi]
                for e in range(indptr[u], indptr[u + 1]):
                    v = indices[e]
                    if state[v] == stamp:
                        continue
                    p = p_cross if cross[e] else p_within
                    if np.random.random() < p:
                        state[v] = stamp
                        nxt[nn] = v
                        nn += 1
                        if on_target[v]:
                            gained += 1
            for k in range(nn):
                frontier[k] = nxt[k]
            nf = nn
            r += 1
        if gained >= needed:
            hits += 1
    return hits


def ic_emergence_prob(
    graph: UserGraph,
    adopters,
    target_platform: str,
    needed: int,
    horizon_days: int,
    params: ICParams | None = None,
) -> float:
    """Monte Carlo independent cascade over the symmetrized graph.

    Each newly activated user gets one chance per incident edge, succeeding
    with ``p_within`` for same-platform edges and ``p_cross`` otherwise.
    Returns the fraction of runs with at least ``needed`` new activations on
    ``target_platform`` within ``horizon_days * steps_per_day`` rounds.
    """
    params = params or ICParams()
    seeds = np.asarray(sorted({graph.index_of(u) for u in adopters if u in graph}), dtype=np.int64)
    if needed <= 0:
        return 1.0
    if not len(seeds):
        return 0.0
    A = graph.adjacency()
    A = ((A + A.T) > 0).tocsr()
    A.sort_indices()
    code = graph.platform_code
    rows = np.repeat(np.arange(graph.n_users), np.diff(A.indptr))
    cross = code[rows] != code[A.indices]
    on_target = np.asarray([u.platform == target_platform for u in graph.users])
    hits = _ic_runs(A.indptr.astype(np.int64), A.indices.astype(np.int64), cross, on_target, seeds,
                    params.p_within, params.p_cross, int(horizon_days * params.steps_per_day), int(needed),
                    params.n_sims, params.seed)
    return hits / params.n_sims
