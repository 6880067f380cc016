"""Streaming evaluation, baselines, ablations and report files."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .config import PipelineConfig
from .corpus import SECONDS_PER_DAY
from .diffusion import ICParams, fit_hawkes, hawkes_emergence_prob, ic_emergence_prob
from .graph import BASELINE_KINDS
from .models import ForestConfig, ModelError, fit_forest, fit_standardizer
from .pipeline import POPULARITY_COLUMNS, EvalWindow, InstanceTable, PipelineRun

logger = logging.getLogger(__name__)

GAIN_PERCENTS = tuple(range(0, 101))


class EvalError(RuntimeError):
    pass


# -- metrics --------------------------------------------------------------


def auc(y: np.ndarray, scores: np.ndarray) -> float:
    """Mann-Whitney AUC with midranks for ties; both classes must be present."""
    y = np.asarray(y).astype(bool)
    s = np.asarray(scores, dtype=np.float64)
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise EvalError("auc needs both classes (single-class input)")
    order = np.argsort(s, kind="mergesort")
    ranks = np.empty(len(s))
    sorted_s = s[order]
    bounds = np.flatnonzero(np.r_[True, sorted_s[1:] != sorted_s[:-1], True])
    for lo, hi in zip(bounds[:-1], bounds[1:]):
        ranks[order[lo:hi]] = (lo + hi + 1) / 2.0
    return float((ranks[y].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def rank_order(scores: np.ndarray, keys: Sequence[tuple] | None = None) -> np.ndarray:
    """Indices by descending score; equal scores fall back to ascending key."""
    s = np.asarray(scores, dtype=np.float64)
    if keys is None:
        return np.lexsort((np.arange(len(s)), -s))
    key_rank = np.empty(len(s), dtype=np.int64)
    key_rank[sorted(range(len(s)), key=lambda i: keys[i])] = np.arange(len(s))
    return np.lexsort((key_rank, -s))


def precision_at_k(y: np.ndarray, scores: np.ndarray, pct: float, keys: Sequence[tuple] | None = None) -> float:
    """Positive fraction among the top ``ceil(n * pct / 100)`` instances."""
    y = np.asarray(y)
    n = len(y)
    if n * pct / 100.0 < 1.0 - 1e-9:
        raise EvalError(f"precision at {pct}% undefined for {n} instances (selects no instance)")
    top = math.ceil(n * pct / 100.0 - 1e-9)
    return float(y[rank_order(scores, keys)[:top]].mean())


@dataclass
class ThresholdMetrics:
    precision: float
    recall: float
    f1: float


def threshold_metrics(y: np.ndarray, scores: np.ndarray, threshold: float = 0.5) -> ThresholdMetrics:
    y = np.asarray(y).astype(bool)
    pred = np.asarray(scores) >= threshold
    tp = int((pred & y).sum())
    fp = int((pred & ~y).sum())
    fn = int((~pred & y).sum())
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return ThresholdMetrics(precision, recall, f1)


def cumulative_gain(
    y: np.ndarray, scores: np.ndarray, keys: Sequence[tuple] | None = None, percents: Sequence[int] = GAIN_PERCENTS
) -> list[tuple[float, float]]:
    """(percent reviewed, recall) points; starts at (0, 0) and ends at (100, 1)."""
    y = np.asarray(y)
    n, n_pos = len(y), int(np.asarray(y).sum())
    if n_pos == 0:
        raise EvalError("cumulative gain needs at least one positive")
    hits = np.r_[0, np.cumsum(y[rank_order(scores, keys)])]
    out = []
    for p in percents:
        m = min(n, math.ceil(n * p / 100.0 - 1e-9))
        out.append((float(p), float(hits[m] / n_pos)))
    return out


# -- streaming evaluation -------------------------------------------------


@dataclass
class Predictions:
    horizon: int
    rows: np.ndarray
    scores: np.ndarray
    retrain_days: list[int] = field(default_factory=list)


def test_rows(table: InstanceTable, window: EvalWindow) -> np.ndarray:
    return np.flatnonzero((table.t >= window.test_start) & (table.t <= window.test_end))


def streaming_forest(
    table: InstanceTable,
    features: Sequence[str],
    horizon: int,
    window: EvalWindow,
    cfg: PipelineConfig,
    seed: int | None = None,
) -> Predictions:
    """Score test days with forests retrained every ``retrain_every_days``.

    A retrain on day ``r`` uses rows with ``train_start <= t`` whose labels
    closed before ``r`` (``t + horizon < r``), standardized on that set.
    """
    seed = cfg.seed if seed is None else seed
    X = table.matrix(features)
    y = table.labels[horizon]
    rows = test_rows(table, window)
    scores = np.zeros(len(rows))
    fcfg = ForestConfig(cfg.n_trees, cfg.min_leaf, cfg.max_depth, cfg.workers)
    retrains = []
    for r in range(window.test_start, window.test_end + 1, cfg.retrain_every_days):
        train = np.flatnonzero((table.t >= window.train_start) & (table.t + horizon < r))
        if not len(train) or y[train].min() == y[train].max():
            raise EvalError(f"horizon {horizon}: training rows before day {r} hold a single class")
        scaler = fit_standardizer(X[train])
        model = fit_forest(scaler.transform(X[train]), y[train], fcfg, seed)
        block = (table.t[rows] >= r) & (table.t[rows] < r + cfg.retrain_every_days)
        if block.any():
            scores[block] = model.predict_proba(scaler.transform(X[rows[block]]))
        retrains.append(r)
    return Predictions(horizon, rows, scores, retrains)


def instance_keys(table: InstanceTable, rows: np.ndarray, horizon: int) -> list[tuple]:
    names = table.platforms
    return [
        (int(table.cluster[i]), names[table.source[i]], names[table.target[i]], int(table.t[i]), horizon)
        for i in rows
    ]


@dataclass
class MetricRow:
    method: str
    horizon: int
    scope: str
    n: int
    n_pos: int
    auc: float
    precision: float
    recall: float
    f1: float
    p_at_1: float
    p_at_5: float


METRIC_HEADER = ("method", "horizon_days", "scope", "n_instances", "n_positive", "auc",
                 "precision", "recall", "f1", "precision_at_1pct", "precision_at_5pct")


def _or_nan(fn: Callable[..., float], *args) -> float:
    # report scopes may hold one class or too few rows; the cell is left blank
    try:
        return fn(*args)
    except EvalError:
        return float("nan")


def score_metrics(
    table: InstanceTable, pred: Predictions, method: str, threshold: float = 0.5, per_pair: bool = True
) -> list[MetricRow]:
    y = table.labels[pred.horizon][pred.rows]
    keys = instance_keys(table, pred.rows, pred.horizon)
    scopes: list[tuple[str, np.ndarray]] = [("overall", np.arange(len(y)))]
    if per_pair:
        pairs = sorted({(k[1], k[2]) for k in keys})
        src = np.asarray([k[1] for k in keys])
        tgt = np.asarray([k[2] for k in keys])
        for s, t in pairs:
            scopes.append((f"{s}->{t}", np.flatnonzero((src == s) & (tgt == t))))
    out = []
    for scope, idx in scopes:
        yy, ss = y[idx], pred.scores[idx]
        kk = [keys[i] for i in idx]
        tm = threshold_metrics(yy, ss, threshold)
        out.append(MetricRow(
            method, pred.horizon, scope, len(idx), int(yy.sum()), _or_nan(auc, yy, ss),
            tm.precision, tm.recall, tm.f1,
            _or_nan(precision_at_k, yy, ss, 1, kk), _or_nan(precision_at_k, yy, ss, 5, kk),
        ))
    return out


def _fmt(v: float | int) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return "" if not np.isfinite(v) else f"{v:.6f}"


def write_metrics(rows: Sequence[MetricRow], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_HEADER)
        for r in rows:
            w.writerow((r.method, r.horizon, r.scope, r.n, r.n_pos, _fmt(r.auc), _fmt(r.precision),
                        _fmt(r.recall), _fmt(r.f1), _fmt(r.p_at_1), _fmt(r.p_at_5)))


def read_metrics(path: str | Path) -> list[dict[str, str]]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def write_predictions(table: InstanceTable, pred: Predictions, path: str | Path) -> None:
    keys = instance_keys(table, pred.rows, pred.horizon)
    y = table.labels[pred.horizon][pred.rows]
    order = sorted(range(len(keys)), key=lambda i: keys[i])
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("cluster_id", "source", "target", "t_day", "horizon_days", "score", "y"))
        for i in order:
            w.writerow((*keys[i], repr(float(pred.scores[i])), int(y[i])))


def write_gain_curves(curves: dict[tuple[str, int], list[tuple[float, float]]], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("method", "horizon_days", "pct_reviewed", "recall"))
        for (method, h), pts in sorted(curves.items()):
            for p, r in pts:
                w.writerow((method, h, f"{p:g}", f"{r:.6f}"))


def write_config(cfg: PipelineConfig, path: str | Path) -> None:
    Path(path).write_text(cfg.dumps())


# -- method registry ------------------------------------------------------


def evaluate_table(
    table: InstanceTable, window: EvalWindow, cfg: PipelineConfig, out_dir: str | Path | None = None,
    method: str = "discourse",
) -> tuple[list[MetricRow], dict[int, Predictions]]:
    """Streaming forest on the configured feature columns for every horizon."""
    metrics: list[MetricRow] = []
    preds: dict[int, Predictions] = {}
    curves = {}
    for h in sorted(cfg.horizons):
        pred = streaming_forest(table, cfg.features, h, window, cfg)
        preds[h] = pred
        metrics.extend(score_metrics(table, pred, method, cfg.threshold))
        y = table.labels[h][pred.rows]
        if y.any():
            curves[(method, h)] = cumulative_gain(y, pred.scores, instance_keys(table, pred.rows, h))
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_metrics(metrics, out / "metrics.csv")
        write_gain_curves(curves, out / "gain_curve.csv")
        for h, pred in preds.items():
            write_predictions(table, pred, out / f"predictions_{h}.csv")
        write_config(cfg, out / "config.json")
    return metrics, preds


def hawkes_scores(run: PipelineRun, horizon_rows: np.ndarray, horizons: Sequence[int]) -> dict[int, np.ndarray]:
    """Self- and source-excited Hawkes fit per instance, in day units."""
    tab = run.instances()
    gt = run.gt
    tl = gt.timelines
    cfg = run.cfg
    order = np.lexsort((tl.ts, tl.platform, tl.cluster))
    c_sorted, p_sorted, ts_sorted = tl.cluster[order], tl.platform[order], tl.ts[order] / SECONDS_PER_DAY
    out = {h: np.zeros(len(horizon_rows)) for h in horizons}

    key_sorted = c_sorted * len(tl.platforms) + p_sorted

    def events(c: int, p: int, until: float) -> np.ndarray:
        k = c * len(tl.platforms) + p
        ev = ts_sorted[np.searchsorted(key_sorted, k, side="left"):np.searchsorted(key_sorted, k, side="right")]
        return ev[ev < until]

    for j, i in enumerate(horizon_rows):
        c, s, g, t = int(tab.cluster[i]), int(tab.source[i]), int(tab.target[i]), int(tab.t[i])
        now = float(t + 1)
        tgt = events(c, g, now)
        src = events(c, s, now)
        fit = fit_hawkes(tgt, src, now, beta=1.0, max_iter=200)
        needed = cfg.emergence_threshold - len(tgt)
        for h in horizons:
            out[h][j] = hawkes_emergence_prob(
                fit.params, needed, float(h), cfg.baseline_sims, cfg.seed + j, tgt, src, now
            )
    return out


def ic_scores(run: PipelineRun, rows: np.ndarray, horizons: Sequence[int]) -> dict[int, np.ndarray]:
    """Independent cascade on the discourse snapshot from each instance's adopters."""
    tab = run.instances()
    prep, gt, cfg = run.prep, run.gt, run.cfg
    snaps = run.snapshots()
    snap_days = np.asarray([s.day for s in snaps])
    out = {h: np.zeros(len(rows)) for h in horizons}
    cum = np.cumsum(gt.counts, axis=2)
    ci = gt.cluster_index(tab.cluster)
    for j, i in enumerate(rows):
        t = int(tab.t[i])
        snap = snaps[int(np.searchsorted(snap_days, t, side="right")) - 1]
        if snap.graph is None:
            continue
        n = prep.count_through(t)
        mask = gt.stream.ids[:n] == tab.cluster[i]
        adopters = {prep.users[u] for u in np.unique(prep.user_idx[:n][mask])}
        needed = cfg.emergence_threshold - int(cum[ci[i], tab.target[i], t])
        for h in horizons:
            params = ICParams(n_sims=cfg.baseline_sims, seed=cfg.seed + j)
            out[h][j] = ic_emergence_prob(snap.graph, adopters, tab.platforms[tab.target[i]], needed, h, params)
    return out


BASELINE_METHODS = ("popularity", "transitions", "hawkes", "ic") + tuple(f"graph_{k}" for k in BASELINE_KINDS)


def run_baselines(
    run: PipelineRun, methods: Sequence[str] = BASELINE_METHODS, out_dir: str | Path | None = None
) -> list[MetricRow]:
    cfg = run.cfg
    tab = run.feature_table()
    window = run.window
    rows = test_rows(tab, window)
    horizons = sorted(cfg.horizons)
    metrics: list[MetricRow] = []
    curves = {}

    def record(method: str, h: int, pred: Predictions) -> None:
        metrics.extend(score_metrics(tab, pred, method, cfg.threshold, per_pair=False))
        y = tab.labels[h][pred.rows]
        if y.any():
            curves[(method, h)] = cumulative_gain(y, pred.scores, instance_keys(tab, pred.rows, h))

    for method in methods:
        logger.info("baseline %s", method)
        if method == "popularity":
            for h in horizons:
                record(method, h, streaming_forest(tab, POPULARITY_COLUMNS, h, window, cfg))
        elif method == "transitions":
            for h in horizons:
                record(method, h, Predictions(h, rows, tab.columns["transition_prior"][rows]))
        elif method in ("hawkes", "ic"):
            fn: Callable = hawkes_scores if method == "hawkes" else ic_scores
            scores = fn(run, rows, horizons)
            for h in horizons:
                record(method, h, Predictions(h, rows, scores[h]))
        elif method.startswith("graph_") and method[6:] in BASELINE_KINDS:
            sub = InstanceTable(tab.platforms, tab.cluster, tab.source, tab.target, tab.t, tab.labels,
                                dict(run.baseline_proximity(method[6:])))
            for h in horizons:
                record(method, h, streaming_forest(sub, ("sum_active", "sum_total"), h, window, cfg))
        else:
            raise EvalError(f"unknown baseline {method!r}")
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_metrics(metrics, out / "baselines.csv")
        write_gain_curves(curves, out / "baseline_gain_curve.csv")
        write_config(cfg, out / "config.json")
    return metrics


# -- ablations ------------------------------------------------------------


FEATURE_SETS = {
    "total": ("sum_total",),
    "ratio": ("mean_ratio",),
    "active": ("sum_active",),
    "active+total": ("sum_active", "sum_total"),
    "active+total+prior": ("sum_active", "sum_total", "transition_prior"),
}


@dataclass
class AblationRow:
    study: str
    variant: str
    text_mode: str
    k: int
    monitor: str
    quantile: float
    seed: int
    horizon: int
    auc: float


ABLATION_HEADER = ("study", "variant", "text_mode", "k", "monitor", "quantile", "seed", "horizon_days", "auc")


def _auc_for(table: InstanceTable, columns: dict[str, np.ndarray], names: Sequence[str], h: int,
             run: PipelineRun, seed: int | None = None) -> float:
    sub = InstanceTable(table.platforms, table.cluster, table.source, table.target, table.t, table.labels,
                        {**table.columns, **columns})
    pred = streaming_forest(sub, names, h, run.window, run.cfg, seed)
    return auc(sub.labels[h][pred.rows], pred.scores)


def feature_ablation(run: PipelineRun, text_modes: Sequence[str] = ("claims", "raw")) -> list[AblationRow]:
    cfg = run.cfg
    tab = run.instances()
    out = []
    for mode in text_modes:
        cols = run.discourse(text_mode=mode, monitor="all", quantile=1.0)
        for name, names in FEATURE_SETS.items():
            for h in cfg.ablation_horizons:
                out.append(AblationRow("features", name, mode, cfg.k, "all", 1.0, cfg.seed, h,
                                       _auc_for(tab, cols, names, h, run)))
    return out


def k_ablation(run: PipelineRun) -> list[AblationRow]:
    cfg = run.cfg
    tab = run.instances()
    out = []
    for k in cfg.ablation_k:
        cols = run.discourse(k=k, monitor="all", quantile=1.0)
        for h in cfg.ablation_horizons:
            out.append(AblationRow("k", f"k={k}", cfg.text_mode, k, "all", 1.0, cfg.seed, h,
                                   _auc_for(tab, cols, cfg.features, h, run)))
    return out


def monitor_ablation(
    run: PipelineRun,
    strategies: Sequence[str] = ("random", "popularity", "cross_degree"),
    seeds: Sequence[int] | None = None,
) -> list[AblationRow]:
    """AUC per monitor strategy and quantile; ``random`` repeats over ``seeds``."""
    cfg = run.cfg
    tab = run.instances()
    seeds = tuple(seeds) if seeds is not None else (cfg.seed,)
    out = []
    full = run.discourse(monitor="all", quantile=1.0)
    for h in cfg.ablation_horizons:
        out.append(AblationRow("monitor", "all", cfg.text_mode, cfg.k, "all", 1.0, cfg.seed, h,
                               _auc_for(tab, full, cfg.features, h, run)))
    for strategy in strategies:
        for q in cfg.ablation_quantiles:
            for s in (seeds if strategy == "random" else (cfg.seed,)):
                cols = run.discourse(monitor=strategy, quantile=q, seed=s)
                for h in cfg.ablation_horizons:
                    out.append(AblationRow("monitor", strategy, cfg.text_mode, cfg.k, strategy, q, s, h,
                                           _auc_for(tab, cols, cfg.features, h, run)))
    return out


def write_ablation(rows: Sequence[AblationRow], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ABLATION_HEADER)
        for r in rows:
            w.writerow((r.study, r.variant, r.text_mode, r.k, r.monitor, f"{r.quantile:g}", r.seed,
                        r.horizon, _fmt(r.auc)))


def summarize(metrics_path: str | Path) -> str:
    """Plain-text table of overall rows from a metrics file."""
    rows = [r for r in read_metrics(metrics_path) if r["scope"] == "overall"]
    lines = [f"{'method':<20} {'h':>3} {'n':>7} {'pos':>5} {'auc':>8} {'f1':>8} {'p@1%':>8} {'p@5%':>8}"]
    for r in rows:
        lines.append(
            f"{r['method']:<20} {r['horizon_days']:>3} {r['n_instances']:>7} {r['n_positive']:>5} "
            f"{r['auc'] or 'nan':>8} {r['f1']:>8} {r['precision_at_1pct']:>8} {r['precision_at_5pct']:>8}"
        )
    return "\n".join(lines)


def dump_json(obj: object, path: str | Path) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


__all__ = [
    "EvalError", "ModelError", "auc", "precision_at_k", "threshold_metrics", "cumulative_gain",
    "streaming_forest", "evaluate_table", "run_baselines", "feature_ablation", "k_ablation",
    "monitor_ablation", "write_ablation", "summarize",
]
