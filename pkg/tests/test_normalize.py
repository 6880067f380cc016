from __future__ import annotations

import json
import threading
from http.server import BaseHTTPRequestHandler, HTTPServer

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import post
from narrative_flux.normalize import (
    Claim, EmbeddingError, HashingEmbedder, NormalizerConfig, NormalizerError, clean_text, embed_hashed,
    load_precomputed, normalize_external, normalize_posts, normalize_rule_based, write_precomputed,
)


def test_clean_text_rules():
    assert clean_text("FEMA blocking rescue ops #HurricaneHelene https://t.co/x") == \
        "fema blocking rescue ops hurricanehelene"


@pytest.mark.parametrize("text", ["", "@user1 @user2", "https://a.example/x www.b.example"])
def test_degenerate_text_is_skippable(text):
    assert normalize_rule_based(post("a", "x", "u", 1, text=text)).skippable


def test_clean_text_strips_emoji_and_collapses_space():
    assert clean_text("Wow  \U0001F525\U0001F525  BIG\tnews!") == "wow big news!"


@given(st.text(max_size=80))
@settings(max_examples=200, deadline=None)
def test_clean_text_idempotent(text):
    once = clean_text(text)
    assert clean_text(once) == once
    assert once == once.strip() and "  " not in once


class _Stub(BaseHTTPRequestHandler):
    drop_last = False

    def do_POST(self):
        items = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
        out = [{"post_id": it["post_id"], "claim": it["text"].lower()} for it in items]
        if self.drop_last:
            out = out[:-1]
        body = json.dumps(out).encode()
        self.send_response(200)
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def log_message(self, *args):
        pass


@pytest.fixture
def stub_server():
    servers = []

    def start(drop_last: bool):
        handler = type("H", (_Stub,), {"drop_last": drop_last})
        srv = HTTPServer(("127.0.0.1", 0), handler)
        threading.Thread(target=srv.serve_forever, daemon=True).start()
        servers.append(srv)
        return f"http://127.0.0.1:{srv.server_port}/"

    yield start
    for s in servers:
        s.shutdown()
        s.server_close()


POSTS = [post("a", "x", "u", 1, "ONE Claim"), post("b", "x", "u", 2, "TWO Claim"), post("c", "x", "u", 3, "THREE")]


def test_external_healthy(stub_server):
    cfg = NormalizerConfig(mode="external_service", endpoint=stub_server(False))
    res = normalize_external(POSTS, cfg)
    assert [c.text for c in res.claims] == ["one claim", "two claim", "three"]
    assert res.fallbacks == []


def test_external_partial_response_falls_back(stub_server):
    cfg = NormalizerConfig(mode="external_service", endpoint=stub_server(True))
    res = normalize_external(POSTS, cfg)
    assert len(res.claims) == 3
    assert res.fallbacks == ["c"]
    assert res.claims[2] == normalize_rule_based(POSTS[2])


def test_external_unreachable_raises():
    cfg = NormalizerConfig(mode="external_service", endpoint="http://127.0.0.1:9/", retries=1,
                           backoff_seconds=0.0, timeout_seconds=0.5)
    with pytest.raises(NormalizerError, match="unreachable"):
        normalize_external(POSTS, cfg)


def test_normalizer_config_validation():
    with pytest.raises(ValueError):
        NormalizerConfig(mode="external_service")
    with pytest.raises(ValueError):
        NormalizerConfig(mode="llm")
    assert [c.text for c in normalize_posts(POSTS).claims] == ["one claim", "two claim", "three"]


def test_embedding_identical_and_order_invariant():
    a = embed_hashed(Claim("1", "a b"))
    assert np.allclose(a, embed_hashed(Claim("2", "a b")))
    assert np.allclose(a, embed_hashed(Claim("3", "b a")))
    assert float(a @ a) == pytest.approx(1.0, abs=1e-6)
    assert a.dtype == np.float32 and a.shape == (256,)


def test_embedding_seed_changes_hashing():
    assert not np.allclose(embed_hashed(Claim("1", "alpha beta gamma"), seed=0),
                           embed_hashed(Claim("1", "alpha beta gamma"), seed=1))


def test_skippable_claim_is_unembeddable():
    with pytest.raises(EmbeddingError, match="unembeddable"):
        embed_hashed(Claim("1", "", skippable=True))


def test_disjoint_claims_near_orthogonal():
    rng = np.random.default_rng(0)
    emb = HashingEmbedder(256, 0)
    cos = []
    for i in range(1000):
        toks = [f"w{j}" for j in rng.choice(100000, size=16, replace=False)]
        cos.append(abs(float(emb.embed(" ".join(toks[:8])) @ emb.embed(" ".join(toks[8:])))))
    mean = float(np.mean(cos))
    print(f"mean |cosine| over 1000 disjoint pairs: {mean:.4f}")
    assert mean < 0.15


def test_embed_many_matches_embed():
    emb = HashingEmbedder(64, 3)
    texts = ["x y z", "", "x x"]
    vecs, ok = emb.embed_many(texts)
    assert ok.tolist() == [True, False, True]
    assert np.allclose(vecs[0], emb.embed("x y z"), atol=1e-6)
    assert not vecs[1].any()


def test_precomputed_roundtrip(tmp_path):
    path = tmp_path / "e.bin"
    write_precomputed(path, {"p1": np.array([3, 4, 0, 0.0]), "p2": np.array([0, 0, 2, 0.0])})
    got = load_precomputed(path)
    assert set(got) == {"p1", "p2"}
    for v in got.values():
        assert np.linalg.norm(v) == pytest.approx(1.0, abs=1e-6)
    assert np.allclose(got["p1"], [0.6, 0.8, 0, 0])


def test_precomputed_rejects(tmp_path):
    path = tmp_path / "z.bin"
    write_precomputed(path, {"p1": np.zeros(4)})
    with pytest.raises(EmbeddingError, match="non-normalizable"):
        load_precomputed(path)
    write_precomputed(path, [("dup", np.ones(4)), ("dup", np.ones(4))])
    with pytest.raises(EmbeddingError, match="dup"):
        load_precomputed(path)
    write_precomputed(path, {"p1": np.ones(4)})
    with pytest.raises(EmbeddingError, match="dim mismatch"):
        load_precomputed(path, dim=8)
