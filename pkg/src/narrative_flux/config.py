"""Pipeline configuration: defaults, JSON binding and validation."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

from .features import MONITOR_STRATEGIES


class ConfigError(ValueError):
    pass


@dataclass
class NormalizerSection:
    mode: str = "rule_based"
    endpoint: str | None = None
    prompt_template: str | None = None
    batch_size: int = 64
    retries: int = 3
    max_in_flight: int = 1


@dataclass
class PipelineConfig:
    # narrative clustering
    lam: float = 0.10
    embedding_dim: int = 256
    embedding_seed: int = 0
    embeddings_path: str | None = None
    text_mode: str = "claims"
    reservoir_size: int = 128
    refresh_days: int = 2
    exposure_lag_days: int = 2
    # emergence and labels
    emergence_threshold: int = 10
    precedence_hours: int = 48
    min_source_posts: int = 5
    window_days: int = 7
    horizons: tuple[int, ...] = (3, 7, 14)
    # discourse network and monitor set
    k: int = 50
    knn_mode: str = "exact"
    graph_rebuild_days: int = 2
    monitor: str = "all"
    quantile: float = 1.0
    # evaluation, offsets in days from the first corpus day
    train_start_day: int = 14
    test_start_day: int = 60
    test_end_day: int | None = None
    retrain_every_days: int = 7
    features: tuple[str, ...] = ("sum_active", "sum_total")
    n_trees: int = 100
    min_leaf: int = 5
    max_depth: int | None = None
    threshold: float = 0.5
    seed: int = 0
    # baselines and ablation
    baseline_sims: int = 200
    baseline_rebuild_days: int = 7
    ablation_k: tuple[int, ...] = (10, 20, 50, 100)
    ablation_quantiles: tuple[float, ...] = (0.1, 0.25, 0.5)
    ablation_horizons: tuple[int, ...] = (3,)
    normalizer: NormalizerSection = field(default_factory=NormalizerSection)
    # runtime only, never echoed into reports
    workers: int = 1

    def to_dict(self, include_runtime: bool = False) -> dict[str, Any]:
        d = asdict(self)
        d["lambda"] = d.pop("lam")
        for key, value in list(d.items()):
            if isinstance(value, tuple):
                d[key] = list(value)
        if not include_runtime:
            d.pop("workers")
        return dict(sorted(d.items()))

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


FEATURE_COLUMNS = ("sum_active", "sum_total", "mean_ratio", "transition_prior",
                   "growth_rate", "engagement_velocity", "steepness")
_TUPLE_KEYS = {"horizons", "features", "ablation_k", "ablation_quantiles", "ablation_horizons"}


def _validate(cfg: PipelineConfig) -> None:
    def bad(key: str, why: str) -> None:
        raise ConfigError(f"{key} {why}")

    if not 0.0 < cfg.lam < 1.0:
        bad("lambda", "out of (0,1)")
    for key in ("embedding_dim", "reservoir_size", "refresh_days", "emergence_threshold", "k",
                "graph_rebuild_days", "retrain_every_days", "n_trees", "min_leaf", "baseline_sims",
                "baseline_rebuild_days", "min_source_posts", "window_days"):
        if not isinstance(getattr(cfg, key), int) or getattr(cfg, key) < 1:
            bad(key, "must be a positive integer")
    for key in ("exposure_lag_days", "precedence_hours", "train_start_day", "test_start_day"):
        if not isinstance(getattr(cfg, key), int) or getattr(cfg, key) < 0:
            bad(key, "must be a nonnegative integer")
    if cfg.test_end_day is not None and (not isinstance(cfg.test_end_day, int) or cfg.test_end_day < cfg.test_start_day):
        bad("test_end_day", "must be null or >= test_start_day")
    if cfg.test_start_day <= cfg.train_start_day:
        bad("test_start_day", "must be after train_start_day")
    if cfg.text_mode not in ("claims", "raw"):
        bad("text_mode", "must be 'claims' or 'raw'")
    if cfg.knn_mode not in ("exact", "approximate"):
        bad("knn_mode", "must be 'exact' or 'approximate'")
    if cfg.monitor not in MONITOR_STRATEGIES:
        bad("monitor", f"must be one of {', '.join(MONITOR_STRATEGIES)}")
    if not 0.0 < cfg.quantile <= 1.0:
        bad("quantile", "out of (0,1]")
    if not 0.0 <= cfg.threshold <= 1.0:
        bad("threshold", "out of [0,1]")
    if not cfg.horizons or any(not isinstance(h, int) or h < 1 for h in cfg.horizons):
        bad("horizons", "must be a nonempty list of positive integers")
    if len(set(cfg.horizons)) != len(cfg.horizons):
        bad("horizons", "must not repeat")
    if not set(cfg.ablation_horizons) <= set(cfg.horizons):
        bad("ablation_horizons", "must be a subset of horizons")
    if not cfg.features or any(f not in FEATURE_COLUMNS for f in cfg.features):
        bad("features", f"must be drawn from {', '.join(FEATURE_COLUMNS)}")
    if cfg.max_depth is not None and (not isinstance(cfg.max_depth, int) or cfg.max_depth < 1):
        bad("max_depth", "must be null or a positive integer")
    if any(not isinstance(k, int) or k < 1 for k in cfg.ablation_k):
        bad("ablation_k", "must hold positive integers")
    if any(not 0.0 < q <= 1.0 for q in cfg.ablation_quantiles):
        bad("ablation_quantiles", "out of (0,1]")
    if not isinstance(cfg.workers, int) or cfg.workers < 1:
        bad("workers", "must be a positive integer")
    n = cfg.normalizer
    if n.mode not in ("rule_based", "external_service"):
        bad("normalizer.mode", "must be rule_based or external_service")
    if (n.mode == "external_service") != bool(n.endpoint):
        bad("normalizer.endpoint", "is required iff mode is external_service")
    if n.batch_size < 1:
        bad("normalizer.batch_size", "must be a positive integer")


def config_from_dict(data: dict[str, Any]) -> PipelineConfig:
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    data = dict(data)
    known = {f.name for f in fields(PipelineConfig)} - {"lam"} | {"lambda"}
    for key in data:
        if key not in known:
            raise ConfigError(f"unknown key {key!r}")
    kwargs: dict[str, Any] = {}
    for key, value in data.items():
        name = "lam" if key == "lambda" else key
        if name == "normalizer":
            if not isinstance(value, dict):
                raise ConfigError("normalizer must be an object")
            nkeys = {f.name for f in fields(NormalizerSection)}
            for nk in value:
                if nk not in nkeys:
                    raise ConfigError(f"unknown key 'normalizer.{nk}'")
            value = NormalizerSection(**value)
        elif name in _TUPLE_KEYS:
            if not isinstance(value, list):
                raise ConfigError(f"{key} must be a list")
            value = tuple(value)
        elif name == "lam" and isinstance(value, int) and not isinstance(value, bool):
            value = float(value)
        kwargs[name] = value
    cfg = PipelineConfig(**kwargs)
    _check_types(cfg)
    _validate(cfg)
    return cfg


def _check_types(cfg: PipelineConfig) -> None:
    for f in fields(PipelineConfig):
        v = getattr(cfg, f.name)
        name = "lambda" if f.name == "lam" else f.name
        if isinstance(v, bool) and f.name != "workers":
            raise ConfigError(f"{name} has the wrong type")
        if f.name in ("lam", "quantile", "threshold") and not isinstance(v, (int, float)):
            raise ConfigError(f"{name} must be a number")


def parse_config(path: str | Path | None) -> PipelineConfig:
    """Load a JSON config file, filling defaults; ``None`` gives the defaults."""
    if path is None:
        return config_from_dict({})
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from None
    try:
        data = json.loads(text) if text.strip() else {}
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON ({exc.msg})") from None
    return config_from_dict(data)
