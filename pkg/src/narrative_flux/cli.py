"""Command-line entry point: ``narrative-flux <subcommand> [flags]``.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 invariant violation.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .config import ConfigError, PipelineConfig, parse_config
from .corpus import CorpusError, CorpusStream
from .eval import (
    BASELINE_METHODS,
    EvalError,
    evaluate_table,
    feature_ablation,
    k_ablation,
    monitor_ablation,
    run_baselines,
    summarize,
    write_ablation,
    write_config,
)
from .features import read_features, write_features
from .models import ForestConfig, ModelError, fit_forest, fit_standardizer
from .narrative import EmergenceEvent, make_labels, write_emergences, write_labels
from .normalize import EmbeddingError, NormalizerError, write_precomputed
from .pipeline import EvalWindow, InstanceTable, PipelineError, PipelineRun
from .synth import SynthConfig, SynthError, generate, verify

EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_INVARIANT = 3

SUBCOMMANDS = ("synth", "normalize", "cluster", "network", "label", "features",
               "train", "evaluate", "baselines", "ablate", "report")

logger = logging.getLogger("narrative_flux")


class UsageError(Exception):
    pass


class InvariantError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # argparse would exit 2, which is our data-error code
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="narrative-flux", description="Cross-platform narrative emergence prediction.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("subcommand", choices=SUBCOMMANDS)
    p.add_argument("--config", help="JSON pipeline config")
    p.add_argument("--in", dest="inp", help="corpus (manifest, directory or JSONL) or stage input")
    p.add_argument("--out", help="output directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--horizon", type=int, help="restrict to one horizon (days)")
    p.add_argument("--monitor", choices=("all", "random", "popularity", "cross_degree"))
    p.add_argument("--quantile", type=float)
    return p


def resolve_config(args: argparse.Namespace) -> PipelineConfig:
    cfg = parse_config(args.config)
    updates: dict = {}
    if args.seed is not None:
        updates["seed"] = args.seed
    if args.workers is not None:
        updates["workers"] = args.workers
    if args.monitor is not None:
        updates["monitor"] = args.monitor
    if args.quantile is not None:
        updates["quantile"] = args.quantile
    if args.horizon is not None:
        if args.horizon not in cfg.horizons:
            raise ConfigError(f"horizon {args.horizon} not among configured horizons {list(cfg.horizons)}")
        updates["horizons"] = (args.horizon,)
        updates["ablation_horizons"] = (args.horizon,)
    if not updates:
        return cfg
    data = cfg.to_dict(include_runtime=True)
    data.update({k: list(v) if isinstance(v, tuple) else v for k, v in updates.items()})
    from .config import config_from_dict

    return config_from_dict(data)


def _need(value: str | None, flag: str) -> str:
    if not value:
        raise UsageError(f"{flag} is required for this subcommand")
    return value


def _out(args: argparse.Namespace) -> Path:
    out = Path(_need(args.out, "--out"))
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_run(args: argparse.Namespace, cfg: PipelineConfig) -> PipelineRun:
    stream = CorpusStream.open(_need(args.inp, "--in"))
    posts = stream.read_all()
    return PipelineRun.from_posts(posts, cfg, stream.platforms)


# -- subcommands ----------------------------------------------------------


def cmd_synth(args: argparse.Namespace, cfg: PipelineConfig) -> int:
    out = _out(args)
    res = generate(SynthConfig(seed=cfg.seed))
    res.write(out)
    report = verify(res.posts, res.truth)
    if not report.ok:
        raise InvariantError("generated corpus disagrees with its truth file: " + "; ".join(report.mismatches[:5]))
    print(f"wrote {len(res.posts)} posts, {len(res.truth['emergences'])} planted emergences to {out}")
    return 0


def cmd_normalize(args: argparse.Namespace, cfg: PipelineConfig) -> int:
    out = _out(args)
    run = _load_run(args, cfg)
    prep = run.prep
    with open(out / "claims.jsonl", "w", encoding="utf-8") as fh:
        for post, claim, ok in zip(prep.posts, prep.claims, prep.claim_ok):
            fh.write(json.dumps({"post_id": post.post_id, "claim": claim, "skipped": not bool(ok)}) + "\n")
    write_precomputed(
        out / "embeddings.bin",
        ((p.post_id, prep.claim_vecs[i]) for i, p in enumerate(prep.posts) if prep.claim_ok[i]),
    )
    print(f"normalized {len(prep.posts)} posts ({prep.n_skipped} skipped)")
    return 0


def cmd_cluster(args: argparse.Namespace, cfg: PipelineConfig) -> int:
    out = _out(args)
    run = _load_run(args, cfg)
    gt = run.gt
    pred = run.stream(cfg.text_mode)
    gt.stream.store.dump(out / "clusters.jsonl")
    pred.store.dump(out / "prediction_clusters.jsonl")
    final_alias = pred.store.alias_table()
    with open(out / "assignments.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("post_id", "cluster_id", "prediction_cluster_id"))
        for i, post in enumerate(run.prep.posts):
            g = int(gt.stream.ids[i])
            p = int(pred.ids[i])
            w.writerow((post.post_id, g, int(final_alias[p]) if p >= 0 else -1))
    print(f"{len(gt.stream.store.clusters)} ground-truth clusters, {len(pred.store.clusters)} prediction clusters")
    return 0


def cmd_network(args: argparse.Namespace, cfg: PipelineConfig) -> int:
    out = _out(args)
    run = _load_run(args, cfg)
    snaps = run.snapshots()
    snap = next((s for s in reversed(snaps) if s.graph is not None), None)
    if snap is None:
        raise PipelineError("no graph snapshot has two or more users")
    snap.graph.dump(out / "graph.csv")
    snap.graph.dump_cross_degree(out / "cross_degree.csv")
    print(f"graph at day {run.absolute_day(snap.day)}: {snap.graph.n_users} users, {len(snap.graph.indices)} edges")
    return 0


def _absolute_events(run: PipelineRun) -> list[EmergenceEvent]:
    base = run.prep.origin_day * 86400
    return [
        EmergenceEvent(e.cluster_id, e.source, e.target, e.source_first_ts + base, e.target_threshold_ts + base)
        for e in run.gt.events
    ]


def cmd_label(args: argparse.Namespace, cfg: PipelineConfig) -> int:
    out = _out(args)
    run = _load_run(args, cfg)
    write_emergences(_absolute_events(run), out / "emergences.csv")
    rows = make_labels(run.gt.timelines, run.window.days, cfg.horizons, cfg.min_source_posts,
                       cfg.emergence_threshold, cfg.window_days)
    write_labels(rows, out / "labels.csv")
    print(f"{len(run.gt.events)} emergences, {len(rows)} label rows")
    return 0


def cmd_features(args: argparse.Namespace, cfg: PipelineConfig) -> int:
    out = _out(args)
    run = _load_run(args, cfg)
    tab = run.feature_table()
    write_features(tab.feature_rows(), out / "features.csv")
    write_config(cfg, out / "config.json")
    print(f"{len(tab)} instances x {len(cfg.horizons)} horizons")
    return 0


def _table_from_input(args: argparse.Namespace, cfg: PipelineConfig) -> tuple[InstanceTable, EvalWindow]:
    """Feature table from a features.csv (file or directory) or computed from a corpus."""
    inp = Path(_need(args.inp, "--in"))
    feat = inp / "features.csv" if inp.is_dir() else inp
    if feat.name.endswith(".csv") and feat.exists():
        try:
            rows = read_features(feat)
        except (KeyError, ValueError) as exc:
            raise CorpusError(f"malformed feature file ({exc})", path=str(feat)) from None
        rows = [r for r in rows if r.horizon in cfg.horizons]
        if not rows:
            raise PipelineError("feature file has no rows for the configured horizons")
        tab = InstanceTable.from_feature_rows(rows)
        end = cfg.test_end_day if cfg.test_end_day is not None else int(tab.t.max())
        if end < cfg.test_start_day:
            raise PipelineError("feature file ends before test_start_day")
        return tab, EvalWindow(cfg.train_start_day, cfg.test_start_day, end)
    run = _load_run(args, cfg)
    return run.feature_table(), run.window


def cmd_train(args: argparse.Namespace, cfg: PipelineConfig) -> int:
    out = _out(args)
    tab, window = _table_from_input(args, cfg)
    X = tab.matrix(cfg.features)
    for h in cfg.horizons:
        train = np.flatnonzero((tab.t >= window.train_start) & (tab.t + h < window.test_start))
        y = tab.labels[h][train]
        if not len(train) or y.min() == y.max():
            raise EvalError(f"horizon {h}: no positive training labels before day {window.test_start}")
        scaler = fit_standardizer(X[train])
        model = fit_forest(scaler.transform(X[train]), y,
                           ForestConfig(cfg.n_trees, cfg.min_leaf, cfg.max_depth, cfg.workers), cfg.seed)
        doc = {
            "format": "narrative_flux.model", "version": 1, "horizon_days": h,
            "features": list(cfg.features),
            "standardizer": {"mean": scaler.mean.tolist(), "scale": scaler.scale.tolist()},
            "forest": json.loads(model.to_json()),
        }
        (out / f"model_{h}.json").write_text(json.dumps(doc, sort_keys=True) + "\n")
    write_config(cfg, out / "config.json")
    print(f"trained {len(cfg.horizons)} models into {out}")
    return 0


def cmd_evaluate(args: argparse.Namespace, cfg: PipelineConfig) -> int:
    out = _out(args)
    tab, window = _table_from_input(args, cfg)
    evaluate_table(tab, window, cfg, out)
    print(summarize(out / "metrics.csv"))
    return 0


def cmd_baselines(args: argparse.Namespace, cfg: PipelineConfig) -> int:
    out = _out(args)
    run = _load_run(args, cfg)
    run_baselines(run, BASELINE_METHODS, out)
    print((out / "baselines.csv").read_text(), end="")
    return 0


def cmd_ablate(args: argparse.Namespace, cfg: PipelineConfig) -> int:
    out = _out(args)
    run = _load_run(args, cfg)
    rows = feature_ablation(run) + k_ablation(run) + monitor_ablation(run)
    write_ablation(rows, out / "ablation.csv")
    write_config(cfg, out / "config.json")
    print((out / "ablation.csv").read_text(), end="")
    return 0


def cmd_report(args: argparse.Namespace, cfg: PipelineConfig) -> int:
    inp = Path(_need(args.inp, "--in"))
    metrics = inp / "metrics.csv"
    if not metrics.exists():
        raise CorpusError("report directory has no metrics.csv", path=str(inp))
    text = summarize(metrics)
    print(text)
    if args.out:
        _out(args).joinpath("summary.txt").write_text(text + "\n")
    return 0


COMMANDS = {name: globals()[f"cmd_{name}"] for name in SUBCOMMANDS}


def _configure_logging() -> None:
    level = os.environ.get("NARRATIVE_FLUX_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")


def main(argv: Sequence[str] | None = None) -> int:
    _configure_logging()
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.subcommand](args, cfg)
    except (UsageError, ConfigError) as exc:
        print(f"narrative-flux: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (CorpusError, EmbeddingError, NormalizerError, PipelineError, EvalError, ModelError, SynthError) as exc:
        print(f"narrative-flux: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (InvariantError, AssertionError) as exc:
        print(f"narrative-flux: invariant violation: {exc}", file=sys.stderr)
        return EXIT_INVARIANT


if __name__ == "__main__":
    sys.exit(main())
