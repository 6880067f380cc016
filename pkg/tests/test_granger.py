from __future__ import annotations

import numpy as np
from scipy import stats

from narrative_flux.granger import granger_f_test, granger_filter


def _f_oracle(src, tgt, lag):
    n = len(tgt)
    y = tgt[lag:]
    rows_r, rows_u = [], []
    for i in range(lag, n):
        own = [tgt[i - j] for j in range(1, lag + 1)]
        other = [src[i - j] for j in range(1, lag + 1)]
        rows_r.append([1.0] + own)
        rows_u.append([1.0] + own + other)

    def rss(X):
        X = np.asarray(X)
        beta = np.linalg.solve(X.T @ X, X.T @ y)
        r = y - X @ beta
        return float(r @ r)

    df_den = len(y) - (1 + 2 * lag)
    f = ((rss(rows_r) - rss(rows_u)) / lag) / (rss(rows_u) / df_den)
    return f, stats.f.sf(f, lag, df_den)


def test_shifted_series_passes_and_f_matches_ols():
    rng = np.random.default_rng(0)
    src = rng.poisson(5.0, 123).astype(float)
    tgt = np.r_[np.zeros(3), src[:-3]] + rng.normal(0, 0.5, 123)
    src, tgt = src[3:], tgt[3:]
    res = granger_filter(src, tgt)
    assert res.passed and res.best_lag is not None
    for lag in (2, 3, 5, 7):
        f, p, _, _ = granger_f_test(src, tgt, lag)
        f0, p0 = _f_oracle(src, tgt, lag)
        assert np.isclose(f, f0, rtol=1e-8) and np.isclose(p, p0, rtol=1e-6, atol=1e-300)


def test_independent_noise_calibrated():
    rng = np.random.default_rng(1)
    passed = sum(granger_filter(rng.normal(size=120), rng.normal(size=120)).passed for _ in range(200))
    assert passed / 200 <= 0.05


def test_constant_target_fails():
    res = granger_filter(np.arange(60.0), np.full(60, 3.0))
    assert not res.passed and res.reason == "no variance"


def test_short_series_fails():
    assert not granger_filter(np.arange(10.0), np.arange(10.0)).passed


def test_bonferroni_scales_p():
    rng = np.random.default_rng(2)
    src = rng.normal(size=100)
    tgt = np.r_[0, 0, src[:-2]] * 0.3 + rng.normal(size=100)
    a = granger_filter(src, tgt)
    b = granger_filter(src, tgt, bonferroni_n=4)
    assert b.p_value == min(1.0, a.p_value * 4)
