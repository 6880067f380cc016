"""Claim normalization and fixed-dimension unit embeddings.

Two normalizers are provided: a deterministic rule-based cleaner and a client
for an external claim-extraction service. Embeddings come either from signed
feature hashing or from a precomputed binary file.
"""

from __future__ import annotations

import hashlib
import json
import logging
import re
import struct
import time
import unicodedata
import urllib.error
import urllib.request
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .corpus import Post

logger = logging.getLogger(__name__)

EMBED_MAGIC = b"NFEMB1\x00\x00"
DEFAULT_DIM = 256

_URL_RE = re.compile(r"(?:https?://|www\.)\S*", re.IGNORECASE)
_MENTION_RE = re.compile(r"@\w+")
_DROP_CHARS = {"\u200d", "\ufe0e", "\ufe0f", "\u20e3"}
_SYMBOL_CANDIDATE_RE = re.compile(r"[\^`]|[^\x00-\x7f]")


class NormalizerError(RuntimeError):
    pass


class EmbeddingError(ValueError):
    pass


@dataclass(frozen=True)
class Claim:
    post_id: str
    text: str
    skippable: bool = False


@lru_cache(maxsize=65536)
def _dropped(ch: str) -> bool:
    return ch in _DROP_CHARS or unicodedata.category(ch) in ("So", "Sk")


def _drop_symbol(m: re.Match) -> str:
    return "" if _dropped(m.group()) else m.group()


def _strip_once(text: str) -> str:
    # only '^', '`' and non-ASCII characters can be So/Sk or joiners
    text = _SYMBOL_CANDIDATE_RE.sub(_drop_symbol, text)
    text = text.lower()
    text = _URL_RE.sub(" ", text)
    text = text.replace("#", "")
    text = _MENTION_RE.sub(" ", text)
    return " ".join(text.split())


def clean_text(text: str) -> str:
    """Apply the cleaning rules until nothing changes.

    Removing one artifact can expose another (``http#s://`` becomes a URL once
    the sigil goes), so the rules run to a fixed point; each pass only deletes
    characters, which bounds the loop.
    """
    prev = None
    while text != prev:
        prev, text = text, _strip_once(text)
    return text


def normalize_rule_based(post: Post) -> Claim:
    text = clean_text(post.text)
    return Claim(post.post_id, text, skippable=not text)


@dataclass
class NormalizerConfig:
    mode: str = "rule_based"
    endpoint: str | None = None
    prompt_template: str | None = None
    batch_size: int = 64
    retries: int = 3
    backoff_seconds: float = 0.5
    timeout_seconds: float = 10.0
    max_in_flight: int = 1

    def __post_init__(self) -> None:
        if self.mode not in ("rule_based", "external_service"):
            raise ValueError(f"normalizer mode must be rule_based or external_service, got {self.mode!r}")
        if (self.mode == "external_service") != bool(self.endpoint):
            raise ValueError("normalizer endpoint is required iff mode is external_service")
        if self.batch_size < 1:
            raise ValueError("normalizer batch_size must be positive")
        if self.max_in_flight < 1:
            raise ValueError("normalizer max_in_flight must be positive")


@dataclass
class ExternalResult:
    claims: list[Claim]
    fallbacks: list[str] = field(default_factory=list)


def _post_batch(cfg: NormalizerConfig, payload: bytes) -> object:
    last: Exception | None = None
    for attempt in range(cfg.retries + 1):
        if attempt:
            time.sleep(cfg.backoff_seconds * 2 ** (attempt - 1))
        req = urllib.request.Request(
            cfg.endpoint, data=payload, headers={"Content-Type": "application/json"}, method="POST"
        )
        try:
            with urllib.request.urlopen(req, timeout=cfg.timeout_seconds) as resp:
                body = resp.read()
        except (urllib.error.URLError, OSError) as exc:
            last = exc
            logger.warning("normalizer request failed (attempt %d): %s", attempt + 1, exc)
            continue
        try:
            return json.loads(body)
        except json.JSONDecodeError:
            # an unparseable body is a per-item failure for the whole batch
            return None
    raise NormalizerError(f"normalizer endpoint unreachable after {cfg.retries} retries: {last}")


def _normalize_batch(posts: Sequence[Post], cfg: NormalizerConfig) -> ExternalResult:
    request = [{"post_id": p.post_id, "text": p.text} for p in posts]
    if cfg.prompt_template:
        request = [dict(r, prompt=cfg.prompt_template) for r in request]
    response = _post_batch(cfg, json.dumps(request).encode("utf-8"))

    by_id: dict[str, str] = {}
    if isinstance(response, list):
        for item in response:
            if isinstance(item, dict) and isinstance(item.get("post_id"), str) and isinstance(item.get("claim"), str):
                by_id.setdefault(item["post_id"], item["claim"])

    result = ExternalResult(claims=[])
    for post in posts:
        raw = by_id.get(post.post_id)
        if raw is None:
            result.fallbacks.append(post.post_id)
            result.claims.append(normalize_rule_based(post))
            continue
        text = clean_text(raw)
        result.claims.append(Claim(post.post_id, text, skippable=not text))
    return result


def normalize_external(posts: Sequence[Post], cfg: NormalizerConfig) -> ExternalResult:
    """Normalize posts through the HTTP claim-extraction service.

    Output order matches input order. Items the service drops or garbles fall
    back to :func:`normalize_rule_based` and are listed in ``fallbacks``.
    """
    if cfg.mode != "external_service":
        raise ValueError("normalize_external requires mode=external_service")
    batches = [posts[i:i + cfg.batch_size] for i in range(0, len(posts), cfg.batch_size)]
    with ThreadPoolExecutor(max_workers=cfg.max_in_flight) as pool:
        parts = list(pool.map(lambda b: _normalize_batch(b, cfg), batches))
    out = ExternalResult(claims=[])
    for part in parts:
        out.claims.extend(part.claims)
        out.fallbacks.extend(part.fallbacks)
    return out


def normalize_posts(posts: Sequence[Post], cfg: NormalizerConfig | None = None) -> ExternalResult:
    cfg = cfg or NormalizerConfig()
    if cfg.mode == "external_service":
        return normalize_external(posts, cfg)
    return ExternalResult(claims=[normalize_rule_based(p) for p in posts])


def raw_text(post: Post) -> str:
    """Unnormalized text used by the raw-post ablation: lowercased, nothing stripped."""
    return " ".join(post.text.lower().split())


class HashingEmbedder:
    """Signed feature hashing of whitespace tokens into ``dim`` buckets.

    Each token maps to a bucket and a sign through a seeded BLAKE2b digest;
    the bag of signed one-hots is summed and L2-normalized.
    """

    def __init__(self, dim: int = DEFAULT_DIM, seed: int = 0):
        if dim < 1:
            raise ValueError("dim must be positive")
        self.dim = dim
        self.seed = seed
        self._key = struct.pack("<q", seed)
        self._cache: dict[str, tuple[int, float]] = {}

    def token_slot(self, token: str) -> tuple[int, float]:
        slot = self._cache.get(token)
        if slot is None:
            digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8, key=self._key).digest()
            h = int.from_bytes(digest, "little")
            slot = (h % self.dim, 1.0 if (h >> 63) & 1 else -1.0)
            self._cache[token] = slot
        return slot

    def accumulate(self, text: str) -> np.ndarray:
        vec = np.zeros(self.dim, dtype=np.float64)
        for tok in text.split():
            b, s = self.token_slot(tok)
            vec[b] += s
        return vec

    def embed(self, text: str) -> np.ndarray:
        vec = self.accumulate(text)
        norm = np.linalg.norm(vec)
        if norm == 0.0:
            raise EmbeddingError("unembeddable")
        return _unit32(vec / norm)

    def embed_many(self, texts: Sequence[str]) -> tuple[np.ndarray, np.ndarray]:
        """Embed a batch; returns ``(vectors, ok)`` where rows with ``ok=False`` are zero."""
        out = np.zeros((len(texts), self.dim), dtype=np.float64)
        rows: list[int] = []
        cols: list[int] = []
        vals: list[float] = []
        for i, text in enumerate(texts):
            for tok in text.split():
                b, s = self.token_slot(tok)
                rows.append(i)
                cols.append(b)
                vals.append(s)
        np.add.at(out, (np.asarray(rows, dtype=np.int64), np.asarray(cols, dtype=np.int64)), np.asarray(vals))
        norms = np.linalg.norm(out, axis=1)
        ok = norms > 0
        out[ok] /= norms[ok, None]
        vecs = out.astype(np.float32)
        vecs[ok] /= np.linalg.norm(vecs[ok], axis=1)[:, None]
        return vecs, ok


def embed_hashed(claim: Claim, dim: int = DEFAULT_DIM, seed: int = 0) -> np.ndarray:
    if claim.skippable:
        raise EmbeddingError("unembeddable")
    return HashingEmbedder(dim, seed).embed(claim.text)


def _unit32(vec: np.ndarray) -> np.ndarray:
    v = np.asarray(vec, dtype=np.float32)
    return v / np.linalg.norm(v)


def write_precomputed(path: str | Path, vectors: Mapping[str, np.ndarray] | Iterable[tuple[str, np.ndarray]]) -> None:
    items = list(vectors.items()) if isinstance(vectors, Mapping) else list(vectors)
    dim = len(items[0][1]) if items else 0
    with open(path, "wb") as fh:
        fh.write(EMBED_MAGIC + struct.pack("<II", dim, len(items)))
        for pid, vec in items:
            arr = np.asarray(vec, dtype="<f4")
            if arr.shape != (dim,):
                raise EmbeddingError(f"dim mismatch for {pid!r}: {arr.shape} vs ({dim},)")
            raw = pid.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(arr.tobytes())


def load_precomputed(path: str | Path, dim: int | None = None) -> dict[str, np.ndarray]:
    """Read a binary embedding file; vectors are renormalized to unit length."""
    data = Path(path).read_bytes()
    if len(data) < 16 or data[:8] != EMBED_MAGIC:
        raise EmbeddingError("not an NFEMB1 embedding file")
    file_dim, count = struct.unpack_from("<II", data, 8)
    if dim is not None and file_dim != dim:
        raise EmbeddingError(f"dim mismatch: file has {file_dim}, expected {dim}")
    out: dict[str, np.ndarray] = {}
    pos = 16
    nbytes = 4 * file_dim
    for _ in range(count):
        if pos + 4 > len(data):
            raise EmbeddingError("truncated embedding file")
        (n,) = struct.unpack_from("<I", data, pos)
        pos += 4
        if pos + n + nbytes > len(data):
            raise EmbeddingError("dim mismatch: record shorter than header dim")
        pid = data[pos:pos + n].decode("utf-8")
        pos += n
        vec = np.frombuffer(data, dtype="<f4", count=file_dim, offset=pos).astype(np.float32)
        pos += nbytes
        if pid in out:
            raise EmbeddingError(f"duplicate post_id {pid!r}")
        if not np.all(np.isfinite(vec)):
            raise EmbeddingError(f"non-finite values for {pid!r}")
        norm = float(np.linalg.norm(vec.astype(np.float64)))
        if norm == 0.0:
            raise EmbeddingError(f"non-normalizable vector for {pid!r}")
        out[pid] = _unit32(vec / norm)
    if pos != len(data):
        raise EmbeddingError("dim mismatch: trailing bytes after last record")
    return out
