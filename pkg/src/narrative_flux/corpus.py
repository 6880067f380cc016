"""Ingest, validate and chronologically replay multi-platform post streams."""

from __future__ import annotations

import heapq
import json
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Iterator, Sequence

SECONDS_PER_DAY = 86400
DEFAULT_PLATFORMS = ("x", "tiktok", "truth", "telegram")


class CorpusError(ValueError):
    """Malformed or inconsistent corpus input."""

    def __init__(self, message: str, line: int | None = None, path: str | None = None):
        self.reason = message
        self.line = line
        self.path = path
        where = ""
        if path is not None:
            where += f"{path}:"
        if line is not None:
            where += f"line {line}: "
        elif where:
            where += " "
        super().__init__(where + message)


@dataclass(frozen=True, order=True)
class UserRef:
    platform: str
    user_id: str

    def __str__(self) -> str:
        return f"{self.platform}:{self.user_id}"


@dataclass(frozen=True)
class Post:
    post_id: str
    author: UserRef
    timestamp: int
    text: str
    urls: tuple[str, ...] = ()
    hashtags: tuple[str, ...] = ()
    likes: int = 0
    shares: int = 0

    @property
    def platform(self) -> str:
        return self.author.platform

    @property
    def day(self) -> int:
        return day_of(self.timestamp)

    @property
    def sort_key(self) -> tuple[int, str]:
        return (self.timestamp, self.post_id)

    def to_record(self) -> dict[str, Any]:
        return {
            "post_id": self.post_id,
            "platform": self.author.platform,
            "user_id": self.author.user_id,
            "ts": self.timestamp,
            "text": self.text,
            "urls": list(self.urls),
            "hashtags": list(self.hashtags),
            "likes": self.likes,
            "shares": self.shares,
        }


def day_of(ts: int) -> int:
    """UTC day index of an integer timestamp."""
    return ts // SECONDS_PER_DAY


def _require_str(rec: dict, key: str, line: int | None) -> str:
    if key not in rec:
        raise CorpusError(f"missing {key}", line)
    value = rec[key]
    if not isinstance(value, str):
        raise CorpusError(f"{key} must be a string", line)
    return value


def _str_list(rec: dict, key: str, line: int | None) -> tuple[str, ...]:
    value = rec.get(key)
    if value is None:
        return ()
    if not isinstance(value, list) or not all(isinstance(v, str) for v in value):
        raise CorpusError(f"{key} must be an array of strings", line)
    return tuple(value)


def _count(rec: dict, key: str, line: int | None) -> int:
    value = rec.get(key, 0)
    if value is None:
        return 0
    if isinstance(value, bool) or not isinstance(value, int) or value < 0:
        raise CorpusError(f"{key} must be a non-negative integer", line)
    return value


def parse_post_line(
    line: str,
    lineno: int | None = None,
    platforms: Iterable[str] | None = DEFAULT_PLATFORMS,
) -> Post:
    """Parse one JSONL record into a :class:`Post`.

    ``platforms`` is the declared platform vocabulary (from a manifest); pass
    ``None`` to accept any lowercase token. Unknown record keys are ignored.
    """
    try:
        rec = json.loads(line)
    except json.JSONDecodeError as exc:
        raise CorpusError(f"malformed JSON ({exc.msg})", lineno) from None
    if not isinstance(rec, dict):
        raise CorpusError("record is not a JSON object", lineno)

    post_id = _require_str(rec, "post_id", lineno)
    if not post_id:
        raise CorpusError("empty post_id", lineno)
    platform = _require_str(rec, "platform", lineno)
    if not platform or platform != platform.lower() or not platform.isascii():
        raise CorpusError(f"invalid platform token {platform!r}", lineno)
    if platforms is not None and platform not in platforms:
        raise CorpusError(f"unknown platform {platform!r}", lineno)
    user_id = _require_str(rec, "user_id", lineno)

    if "ts" not in rec or rec["ts"] is None:
        raise CorpusError("missing timestamp", lineno)
    ts = rec["ts"]
    if isinstance(ts, bool) or not isinstance(ts, int):
        if isinstance(ts, float) and math.isfinite(ts) and ts == int(ts):
            ts = int(ts)
        else:
            raise CorpusError("ts must be integer seconds", lineno)
    if ts < 0:
        raise CorpusError("ts must be non-negative", lineno)

    text = rec.get("text", "")
    if text is None:
        text = ""
    if not isinstance(text, str):
        raise CorpusError("text must be a string", lineno)
    urls = _str_list(rec, "urls", lineno)
    if not text and not urls:
        raise CorpusError("empty text requires at least one url", lineno)

    return Post(
        post_id=post_id,
        author=UserRef(platform, user_id),
        timestamp=ts,
        text=text,
        urls=urls,
        hashtags=_str_list(rec, "hashtags", lineno),
        likes=_count(rec, "likes", lineno),
        shares=_count(rec, "shares", lineno),
    )


@dataclass
class Manifest:
    platforms: tuple[str, ...]
    inputs: tuple[Path, ...]

    @classmethod
    def load(cls, path: str | Path) -> Manifest:
        path = Path(path)
        try:
            data = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise CorpusError(f"unreadable manifest ({exc})", path=str(path)) from None
        if not isinstance(data, dict):
            raise CorpusError("manifest must be a JSON object", path=str(path))
        platforms = data.get("platforms")
        inputs = data.get("inputs")
        if not isinstance(platforms, list) or not platforms:
            raise CorpusError("manifest needs a nonempty 'platforms' list", path=str(path))
        if len(set(platforms)) != len(platforms):
            raise CorpusError("duplicate platform in manifest", path=str(path))
        for p in platforms:
            if not isinstance(p, str) or not p or p != p.lower() or not p.isascii():
                raise CorpusError(f"invalid platform token {p!r}", path=str(path))
        if not isinstance(inputs, list) or not inputs:
            raise CorpusError("manifest needs a nonempty 'inputs' list", path=str(path))
        base = path.parent
        return cls(tuple(platforms), tuple(base / str(p) for p in inputs))

    def dump(self, path: str | Path) -> None:
        path = Path(path)
        rel = []
        for p in self.inputs:
            try:
                rel.append(str(Path(p).relative_to(path.parent)))
            except ValueError:
                rel.append(str(p))
        path.write_text(json.dumps({"platforms": list(self.platforms), "inputs": rel}, indent=2) + "\n")


def _read_file(path: Path, platforms: Sequence[str] | None) -> Iterator[Post]:
    """Yield posts of one file in (ts, post_id) order; the file must be ts-sorted."""
    group: list[Post] = []
    last_ts = -1
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                post = parse_post_line(line, lineno, platforms)
            except CorpusError as exc:
                raise CorpusError(exc.reason, lineno, str(path)) from None
            if post.timestamp < last_ts:
                raise CorpusError(
                    f"out-of-order timestamp at post_id {post.post_id!r}", lineno, str(path)
                )
            if post.timestamp != last_ts and group:
                group.sort(key=lambda p: p.post_id)
                yield from group
                group = []
            last_ts = post.timestamp
            group.append(post)
    group.sort(key=lambda p: p.post_id)
    yield from group


class CorpusStream:
    """Chronological replay over one or more ts-sorted JSONL files.

    Files are merged on ``(timestamp, post_id)``. The cursor only moves
    forward; :meth:`replay` hands out each post exactly once.
    """

    def __init__(self, paths: Sequence[str | Path], platforms: Sequence[str] | None = DEFAULT_PLATFORMS):
        self.paths = tuple(Path(p) for p in paths)
        self.platforms = tuple(platforms) if platforms is not None else None
        self.cursor: int | None = None
        self._iter = self._merged()
        self._pending: Post | None = None
        self._seen: set[str] = set()

    @classmethod
    def open(cls, source: str | Path) -> CorpusStream:
        """Open a manifest, a directory holding ``manifest.json``/``corpus.jsonl``, or a JSONL file."""
        source = Path(source)
        if source.is_dir():
            if (source / "manifest.json").exists():
                source = source / "manifest.json"
            elif (source / "corpus.jsonl").exists():
                source = source / "corpus.jsonl"
            else:
                raise CorpusError("directory has neither manifest.json nor corpus.jsonl", path=str(source))
        if not source.exists():
            raise CorpusError("no such file", path=str(source))
        if source.suffix == ".json":
            man = Manifest.load(source)
            return cls(man.inputs, man.platforms)
        return cls([source])

    def _merged(self) -> Iterator[Post]:
        streams = [_read_file(p, self.platforms) for p in self.paths]
        if len(streams) == 1:
            return streams[0]
        return heapq.merge(*streams, key=lambda p: p.sort_key)

    def _next(self) -> Post | None:
        if self._pending is not None:
            post, self._pending = self._pending, None
            return post
        post = next(self._iter, None)
        if post is not None:
            if post.post_id in self._seen:
                raise CorpusError(f"duplicate post_id {post.post_id!r}")
            self._seen.add(post.post_id)
        return post

    def replay(self, until: int) -> list[Post]:
        """Return every not-yet-emitted post with ``timestamp <= until``."""
        if self.cursor is not None and until < self.cursor:
            raise ValueError(f"until={until} is behind the cursor ({self.cursor})")
        out: list[Post] = []
        while True:
            post = self._next()
            if post is None:
                break
            if post.timestamp > until:
                self._pending = post
                break
            out.append(post)
        self.cursor = until
        return out

    def __iter__(self) -> Iterator[Post]:
        while True:
            post = self._next()
            if post is None:
                return
            self.cursor = post.timestamp
            yield post

    def read_all(self) -> list[Post]:
        return list(self)


@dataclass
class CorpusStats:
    posts: dict[str, int] = field(default_factory=dict)
    users: dict[str, int] = field(default_factory=dict)

    @property
    def total_posts(self) -> int:
        return sum(self.posts.values())

    @property
    def total_users(self) -> int:
        return sum(self.users.values())


def corpus_stats(posts: Iterable[Post], platforms: Iterable[str] = ()) -> CorpusStats:
    """Per-platform post and distinct-user counts (users keyed by :class:`UserRef`)."""
    n_posts: Counter[str] = Counter({p: 0 for p in platforms})
    users: set[UserRef] = set()
    for post in posts:
        n_posts[post.platform] += 1
        users.add(post.author)
    n_users: Counter[str] = Counter({p: 0 for p in n_posts})
    for u in users:
        n_users[u.platform] += 1
    return CorpusStats(dict(sorted(n_posts.items())), dict(sorted(n_users.items())))


def write_jsonl(posts: Iterable[Post], path: str | Path) -> int:
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        for post in posts:
            fh.write(json.dumps(post.to_record(), ensure_ascii=False, separators=(",", ":")))
            fh.write("\n")
            n += 1
    return n


def sort_posts(posts: Iterable[Post]) -> list[Post]:
    return sorted(posts, key=lambda p: p.sort_key)
