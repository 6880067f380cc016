from __future__ import annotations

import json

import numpy as np
import pytest

from conftest import DAY, post, write_records
from narrative_flux.corpus import (
    CorpusError, CorpusStream, Manifest, Post, UserRef, corpus_stats, day_of, parse_post_line,
    sort_posts, write_jsonl,
)


def rec(pid, ts, platform="x", user="u1", text="hello", **kw):
    return {"post_id": pid, "platform": platform, "user_id": user, "ts": ts, "text": text, **kw}


def test_parse_defaults():
    p = parse_post_line('{"post_id":"a1","platform":"x","user_id":"u9","ts":1717200000,"text":"hello"}')
    assert p == Post("a1", UserRef("x", "u9"), 1717200000, "hello")
    assert p.urls == () and p.hashtags == () and p.likes == 0 and p.shares == 0


def test_missing_timestamp():
    with pytest.raises(CorpusError, match="missing timestamp"):
        parse_post_line(json.dumps({"post_id": "a", "platform": "x", "user_id": "u", "text": "t"}))


@pytest.mark.parametrize("bad, msg", [
    ({"ts": "12"}, "integer"),
    ({"ts": -1}, "non-negative"),
    ({"platform": "X"}, "invalid platform"),
    ({"platform": "myspace"}, "unknown platform"),
    ({"text": "", "urls": []}, "empty text"),
    ({"likes": -2}, "likes"),
])
def test_parse_rejects(bad, msg):
    with pytest.raises(CorpusError, match=msg):
        parse_post_line(json.dumps({**rec("a", 5), **bad}), 3)


def test_empty_text_with_url_is_accepted():
    p = parse_post_line(json.dumps(rec("a", 5, text="", urls=["https://a.example/x"])))
    assert p.urls == ("https://a.example/x",)


def test_equal_timestamps_replay_by_post_id(tmp_path):
    records = [rec(f"p{i}", 100 + (i // 2)) for i in range(8)]
    records.insert(2, rec("b", 100))
    records.insert(3, rec("a", 100))
    path = write_records(tmp_path / "c.jsonl", records)
    out = CorpusStream([path]).replay(10**9)
    oracle = sorted(records, key=lambda r: (r["ts"], r["post_id"]))
    assert [p.post_id for p in out] == [r["post_id"] for r in oracle]
    ids = [p.post_id for p in out]
    assert ids.index("a") < ids.index("b")


def test_replay_empty_file(tmp_path):
    path = tmp_path / "empty.jsonl"
    path.write_text("")
    assert CorpusStream([path]).replay(10**9) == []


def test_replay_until_day_boundary_and_idempotent(tmp_path):
    rng = np.random.default_rng(0)
    base = 1717200000
    ts = np.sort(base + rng.integers(0, 10 * DAY, 100))
    path = write_records(tmp_path / "c.jsonl", [rec(f"p{i:03d}", int(t)) for i, t in enumerate(ts)])
    stream = CorpusStream([path])
    until = base + 6 * DAY - 1  # end of day 5
    out = stream.replay(until)
    assert len(out) == int((ts <= until).sum())
    assert all(p.timestamp <= until for p in out)
    assert stream.replay(until) == []
    rest = stream.replay(base + 20 * DAY)
    assert len(out) + len(rest) == 100


def test_replay_rejects_backwards_cursor(tmp_path):
    path = write_records(tmp_path / "c.jsonl", [rec("a", 10)])
    stream = CorpusStream([path])
    stream.replay(50)
    with pytest.raises(ValueError):
        stream.replay(40)


def test_out_of_order_file_names_line(tmp_path):
    path = write_records(tmp_path / "c.jsonl", [rec("a", 10), rec("b", 5)])
    with pytest.raises(CorpusError, match="line 2"):
        CorpusStream([path]).read_all()


def test_corrupt_line_is_named(tmp_path):
    path = tmp_path / "c.jsonl"
    lines = [json.dumps(rec(f"p{i}", i)) for i in range(50)]
    lines[41] = "{not json"
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(CorpusError) as err:
        CorpusStream([path]).read_all()
    assert err.value.line == 42 and "line 42" in str(err.value)


def test_duplicate_post_id(tmp_path):
    path = write_records(tmp_path / "c.jsonl", [rec("a", 1), rec("a", 2)])
    with pytest.raises(CorpusError, match="duplicate post_id"):
        CorpusStream([path]).read_all()


def test_manifest_merges_files(tmp_path):
    a = write_records(tmp_path / "a.jsonl", [rec("a1", 1), rec("a2", 5)])
    b = write_records(tmp_path / "b.jsonl", [rec("b1", 3, platform="truth"), rec("b2", 5, platform="truth")])
    Manifest(("x", "truth"), (a, b)).dump(tmp_path / "manifest.json")
    stream = CorpusStream.open(tmp_path)
    assert [p.post_id for p in stream.read_all()] == ["a1", "b1", "a2", "b2"]


def test_manifest_platform_vocabulary(tmp_path):
    a = write_records(tmp_path / "a.jsonl", [rec("a1", 1, platform="mastodon")])
    Manifest(("mastodon",), (a,)).dump(tmp_path / "manifest.json")
    assert CorpusStream.open(tmp_path / "manifest.json").read_all()[0].platform == "mastodon"
    (tmp_path / "bad.json").write_text('{"platforms": [], "inputs": ["a.jsonl"]}')
    with pytest.raises(CorpusError):
        Manifest.load(tmp_path / "bad.json")


def test_corpus_stats_hand_count():
    posts = [post("1", "x", "a", 1), post("2", "x", "b", 2), post("3", "truth", "a", 3), post("4", "truth", "a", 4)]
    stats = corpus_stats(posts)
    assert stats.posts == {"truth": 2, "x": 2}
    assert stats.users == {"truth": 1, "x": 2}


def test_corpus_stats_empty():
    stats = corpus_stats([], ["x", "truth"])
    assert stats.posts == {"truth": 0, "x": 0} and stats.users == {"truth": 0, "x": 0}
    assert stats.total_posts == 0


def test_corpus_stats_match_generator(small_synth):
    stats = corpus_stats(small_synth.posts, small_synth.truth["platforms"])
    assert stats.posts == small_synth.truth["volumes"]


def test_write_roundtrip(tmp_path):
    posts = sort_posts([post("b", "x", "u", 5, urls=("https://a.example",), hashtags=("t",), likes=3),
                        post("a", "tiktok", "v", 5)])
    write_jsonl(posts, tmp_path / "c.jsonl")
    assert CorpusStream([tmp_path / "c.jsonl"]).read_all() == posts
    assert [p.post_id for p in posts] == ["a", "b"]
    assert day_of(DAY * 3 + 5) == 3
