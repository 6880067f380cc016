from __future__ import annotations

import json
from pathlib import Path

import pytest

from narrative_flux.corpus import Post, UserRef
from narrative_flux.synth import SynthConfig, generate

DAY = 86400


def post(pid: str, platform: str, user: str, ts: int, text: str = "some words", **kw) -> Post:
    return Post(pid, UserRef(platform, user), ts, text, **kw)


def write_records(path: Path, records: list[dict]) -> Path:
    path.write_text("".join(json.dumps(r) + "\n" for r in records))
    return path


# A small corpus that still carries migrations; shared by the pipeline, eval and CLI tests.
SMALL = dict(n_users=120, n_communities=8, n_bridge=4, n_narratives=40, duration_days=75,
             posts_per_adoption=4, seed=11)


@pytest.fixture(scope="session")
def small_synth():
    return generate(SynthConfig(**SMALL))


@pytest.fixture(scope="session")
def small_corpus_dir(tmp_path_factory, small_synth):
    out = tmp_path_factory.mktemp("small_corpus")
    small_synth.write(out)
    return out


def small_config(**overrides) -> dict:
    cfg = {"train_start_day": 10, "test_start_day": 35, "n_trees": 20, "horizons": [3, 7],
           "ablation_horizons": [3], "k": 20, "baseline_sims": 20}
    cfg.update(overrides)
    return cfg


# One line per acceptance criterion, echoed after the run.
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
