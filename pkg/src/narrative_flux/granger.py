"""Granger-causality filter for migratory narratives."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import stats

DEFAULT_LAGS = tuple(range(2, 8))
MIN_DAYS = 30


@dataclass
class GrangerResult:
    passed: bool
    p_value: float
    best_lag: int | None = None
    reason: str = ""
    f_stats: dict[int, float] = field(default_factory=dict)
    p_values: dict[int, float] = field(default_factory=dict)


def _lagged(series: np.ndarray, lag: int) -> np.ndarray:
    n = len(series)
    return np.column_stack([series[lag - j:n - j] for j in range(1, lag + 1)])


def _rss(X: np.ndarray, y: np.ndarray) -> float:
    beta, *_ = np.linalg.lstsq(X, y, rcond=None)
    r = y - X @ beta
    return float(r @ r)


def granger_f_test(src: np.ndarray, tgt: np.ndarray, lag: int) -> tuple[float, float, int, int]:
    """F test of AR(lag) for ``tgt`` against the same model plus ``lag`` source lags.

    Both regressions include an intercept. Returns ``(F, p, df_num, df_den)``.
    """
    y = tgt[lag:]
    ones = np.ones((len(y), 1))
    restricted = np.hstack([ones, _lagged(tgt, lag)])
    full = np.hstack([restricted, _lagged(src, lag)])
    df_den = len(y) - full.shape[1]
    if df_den <= 0:
        raise ValueError("series too short for lag")
    if np.linalg.matrix_rank(full) < full.shape[1]:
        raise np.linalg.LinAlgError("rank-deficient design")
    rss_r = _rss(restricted, y)
    rss_u = _rss(full, y)
    if rss_u <= 0:
        return float("inf"), 0.0, lag, df_den
    f = ((rss_r - rss_u) / lag) / (rss_u / df_den)
    f = max(f, 0.0)
    return f, float(stats.f.sf(f, lag, df_den)), lag, df_den


def granger_filter(
    src_daily,
    tgt_daily,
    lags=DEFAULT_LAGS,
    alpha: float = 0.05,
    bonferroni_n: int = 1,
) -> GrangerResult:
    """Does source activity improve prediction of target activity?

    The smallest p-value over ``lags`` is Bonferroni-adjusted by both the number
    of lag orders tried and ``bonferroni_n`` (the number of candidate pairs in
    the run) before comparison with ``alpha``.
    """
    src = np.asarray(src_daily, dtype=np.float64)
    tgt = np.asarray(tgt_daily, dtype=np.float64)
    if len(src) != len(tgt):
        raise ValueError("series lengths differ")
    if len(tgt) < MIN_DAYS:
        return GrangerResult(False, 1.0, reason=f"fewer than {MIN_DAYS} days")
    if np.var(tgt) == 0 or np.var(src) == 0:
        return GrangerResult(False, 1.0, reason="no variance")
    res = GrangerResult(False, 1.0)
    for lag in lags:
        try:
            f, p, _, _ = granger_f_test(src, tgt, lag)
        except np.linalg.LinAlgError:
            continue
        res.f_stats[lag] = f
        res.p_values[lag] = p
    if not res.p_values:
        res.reason = "no variance"
        return res
    best = min(res.p_values, key=lambda k: (res.p_values[k], k))
    adj = min(1.0, res.p_values[best] * len(tuple(lags)) * bonferroni_n)
    res.best_lag = best
    res.p_value = adj
    res.passed = adj < alpha
    res.reason = "significant" if res.passed else "not significant"
    return res
