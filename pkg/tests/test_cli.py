from __future__ import annotations

import csv
import json

import pytest

from conftest import small_config
from narrative_flux.cli import main
from narrative_flux.synth import verify


@pytest.fixture(scope="module")
def cfg_file(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "config.json"
    path.write_text(json.dumps(small_config()))
    return path


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    cap = capsys.readouterr()
    return code, cap.out, cap.err


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_unknown_flag_exits_1_with_usage(capsys):
    code = None
    with pytest.raises(SystemExit) as exc:
        main(["evaluate", "--frobnicate"])
    code = exc.value.code
    err = capsys.readouterr().err
    assert code == 1 and "usage:" in err


def test_unknown_subcommand_exits_1(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["explode"])
    assert exc.value.code == 1


def test_missing_input_is_usage_error(capsys, tmp_path):
    code, _, err = run(capsys, "features", "--out", tmp_path)
    assert code == 1 and "--in" in err


def test_bad_config_exits_1(capsys, tmp_path):
    bad = tmp_path / "c.json"
    bad.write_text(json.dumps({"n_trees": 0}))
    code, _, err = run(capsys, "label", "--config", bad, "--in", tmp_path, "--out", tmp_path / "o")
    assert code == 1 and "n_trees" in err
    bad.write_text(json.dumps({"no_such_option": 1}))
    assert run(capsys, "label", "--config", bad, "--in", tmp_path, "--out", tmp_path / "o")[0] == 1


def test_horizon_must_be_configured(capsys, tmp_path, cfg_file):
    code, _, err = run(capsys, "evaluate", "--config", cfg_file, "--horizon", "5", "--in", tmp_path, "--out", tmp_path)
    assert code == 1 and "horizon" in err


def test_corrupt_line_exits_2_naming_line(capsys, tmp_path, small_corpus_dir):
    lines = (small_corpus_dir / "corpus.jsonl").read_text().splitlines()[:60]
    lines[41] = lines[41][:-7]
    path = tmp_path / "bad.jsonl"
    path.write_text("\n".join(lines) + "\n")
    code, _, err = run(capsys, "normalize", "--in", path, "--out", tmp_path / "o")
    assert code == 2 and "line 42" in err


def test_out_of_order_corpus_exits_2(capsys, tmp_path, small_corpus_dir):
    lines = (small_corpus_dir / "corpus.jsonl").read_text().splitlines()[:60]
    path = tmp_path / "rev.jsonl"
    path.write_text("\n".join(lines[::-1]) + "\n")
    assert run(capsys, "normalize", "--in", path, "--out", tmp_path / "o")[0] == 2


def test_report_without_metrics_exits_2(capsys, tmp_path):
    assert run(capsys, "report", "--in", tmp_path)[0] == 2


def test_stage_commands_end_to_end(capsys, tmp_path, small_corpus_dir, small_synth, cfg_file):
    common = ("--config", cfg_file, "--in", small_corpus_dir)
    code, out, _ = run(capsys, "normalize", *common, "--out", tmp_path / "norm")
    assert code == 0 and (tmp_path / "norm" / "embeddings.bin").stat().st_size > 0
    claims = (tmp_path / "norm" / "claims.jsonl").read_text().splitlines()
    assert len(claims) == len(small_synth.posts)

    assert run(capsys, "cluster", *common, "--out", tmp_path / "cl")[0] == 0
    assign = read_csv(tmp_path / "cl" / "assignments.csv")
    assert len(assign) == len(small_synth.posts)

    assert run(capsys, "network", *common, "--out", tmp_path / "net")[0] == 0
    assert read_csv(tmp_path / "net" / "graph.csv")

    assert run(capsys, "label", *common, "--out", tmp_path / "lab")[0] == 0
    em = read_csv(tmp_path / "lab" / "emergences.csv")
    # emergence timestamps are absolute, so they agree with the planted truth file
    report = verify(small_synth.posts, small_synth.truth)
    assert report.ok and len(em) == len(small_synth.truth["emergences"])
    first_ts = small_synth.posts[0].timestamp
    assert all(int(r["target_threshold_ts"]) >= first_ts for r in em)

    assert run(capsys, "features", *common, "--out", tmp_path / "feat")[0] == 0
    feats = read_csv(tmp_path / "feat" / "features.csv")
    assert feats and {r["horizon_days"] for r in feats} == {"3", "7"}

    code, out, _ = run(capsys, "evaluate", "--config", cfg_file, "--in", tmp_path / "feat", "--out", tmp_path / "ev")
    assert code == 0 and "discourse" in out
    metrics = read_csv(tmp_path / "ev" / "metrics.csv")
    overall = {r["horizon_days"]: r for r in metrics if r["scope"] == "overall"}
    assert set(overall) == {"3", "7"} and all(0.5 < float(r["auc"]) <= 1 for r in overall.values())
    for h in (3, 7):
        assert (tmp_path / "ev" / f"predictions_{h}.csv").exists()

    # evaluating straight from the corpus gives the same predictions as from features.csv
    assert run(capsys, "evaluate", *common, "--out", tmp_path / "ev2")[0] == 0
    assert (tmp_path / "ev" / "predictions_7.csv").read_text() == (tmp_path / "ev2" / "predictions_7.csv").read_text()

    assert run(capsys, "train", "--config", cfg_file, "--in", tmp_path / "feat", "--out", tmp_path / "tr")[0] == 0
    model = json.loads((tmp_path / "tr" / "model_3.json").read_text())
    assert model["horizon_days"] == 3 and model["features"]

    code, out, _ = run(capsys, "report", "--in", tmp_path / "ev", "--out", tmp_path / "rep")
    assert code == 0 and (tmp_path / "rep" / "summary.txt").read_text().strip() == out.strip()


@pytest.mark.slow
def test_baselines_and_ablate_commands(capsys, tmp_path, small_corpus_dir, cfg_file):
    common = ("--config", cfg_file, "--in", small_corpus_dir, "--horizon", "3")
    assert run(capsys, "baselines", *common, "--out", tmp_path / "b")[0] == 0
    methods = {r["method"] for r in read_csv(tmp_path / "b" / "baselines.csv")}
    assert {"popularity", "transitions", "hawkes", "ic"} <= methods
    assert run(capsys, "ablate", *common, "--out", tmp_path / "a")[0] == 0
    studies = {r["study"] for r in read_csv(tmp_path / "a" / "ablation.csv")}
    assert studies == {"features", "k", "monitor"}


@pytest.mark.slow
def test_synth_command_writes_verified_corpus(capsys, tmp_path):
    code, out, _ = run(capsys, "synth", "--seed", "3", "--out", tmp_path)
    assert code == 0 and "planted emergences" in out
    assert (tmp_path / "manifest.json").exists() and (tmp_path / "truth.json").exists()
