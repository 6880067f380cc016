"""Synthetic multi-platform corpora with planted communities and migrations.

Users live in latent communities. A single-platform community occupies one
block of users on one platform; a bridge community owns a block on each of two
platforms. Every narrative belongs to one community. Each day every eligible
community member adopts an open narrative with probability
``logistic(b0 + beta1 * R + gamma_p + v_n)``, where ``R`` is the fraction of
the community (on platforms where the narrative is open) that has already
adopted. Bridge-community narratives are migratory: they open on the
secondary platform only after a planted lag. The pipeline never sees the
communities; it has to recover proximity from co-participation.
"""

from __future__ import annotations

import json
import math
from collections import Counter, defaultdict
from dataclasses import asdict, dataclass, field
from itertools import combinations
from pathlib import Path
from typing import Any

import numpy as np

from .corpus import DEFAULT_PLATFORMS, SECONDS_PER_DAY, Manifest, Post, UserRef, write_jsonl
from .models import AdoptionRows
from .normalize import clean_text

DEFAULT_START_TS = 1717200000  # 2024-06-01T00:00:00Z
MAX_EXPECTED_POSTS = 10_000_000
_EMOJI = {"x": "", "tiktok": "\U0001F525", "truth": "\U0001F1FA\U0001F1F8", "telegram": "❗"}


class SynthError(ValueError):
    pass


@dataclass
class SynthConfig:
    platforms: tuple[str, ...] = DEFAULT_PLATFORMS
    n_users: int = 500
    n_communities: int = 14
    n_bridge: int = 6
    n_narratives: int = 200
    fraction_migratory: float = 0.3
    beta1: float = 2.0
    base_rate: float = 0.03
    platform_effects: tuple[float, ...] = (0.0, 0.1, -0.1, 0.05)
    virality_sd: float = 0.5
    lag_min: int = 3
    lag_max: int = 28
    life_min: int = 20
    life_max: int = 40
    vocab_size: int = 300
    narrative_tokens: int = 16
    noise_tokens: int = 1
    posts_per_adoption: int = 8
    post_gap_p: float = 0.2
    noise_adoption_rate: float = 0.002
    duration_days: int = 120
    start_ts: int = DEFAULT_START_TS
    log_decisions: bool = False
    seed: int = 0

    def __post_init__(self) -> None:
        self.platforms = tuple(self.platforms)
        self.platform_effects = tuple(self.platform_effects)
        P = len(self.platforms)
        if P < 2:
            raise SynthError("need at least two platforms")
        if len(self.platform_effects) != P:
            raise SynthError("platform_effects must have one entry per platform")
        for name in ("fraction_migratory", "base_rate", "post_gap_p"):
            v = getattr(self, name)
            if not 0.0 < v < 1.0:
                raise SynthError(f"{name} out of (0,1)")
        if not 0.0 <= self.noise_adoption_rate < 1.0:
            raise SynthError("noise_adoption_rate out of [0,1)")
        if self.n_bridge < 1 or self.n_bridge >= self.n_communities:
            raise SynthError("n_bridge must be in [1, n_communities)")
        if not 1 <= self.lag_min <= self.lag_max:
            raise SynthError("need 1 <= lag_min <= lag_max")
        if not 1 <= self.life_min <= self.life_max:
            raise SynthError("need 1 <= life_min <= life_max")
        if self.vocab_size < self.narrative_tokens + self.noise_tokens:
            raise SynthError("vocab_size too small for narrative tokens")
        if min(self.n_users, self.n_narratives, self.posts_per_adoption, self.duration_days) < 1:
            raise SynthError("sizes must be positive")
        blocks = 2 * self.n_bridge + (self.n_communities - self.n_bridge)
        if blocks > P * self.n_users:
            raise SynthError("more community blocks than users")

    def expected_posts_bound(self) -> float:
        """Upper bound: every community member adopts every community narrative."""
        blocks = 2 * self.n_bridge + (self.n_communities - self.n_bridge)
        block = len(self.platforms) * self.n_users / blocks
        per_narrative = 2 * block
        noise = self.noise_adoption_rate * self.n_users * len(self.platforms) * self.duration_days
        return self.n_narratives * per_narrative * self.posts_per_adoption + noise


@dataclass
class SynthResult:
    posts: list[Post]
    truth: dict[str, Any]
    decisions: dict[str, np.ndarray] | None = None

    def write(self, out_dir: str | Path) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_jsonl(self.posts, out / "corpus.jsonl")
        Manifest(tuple(self.truth["platforms"]), (out / "corpus.jsonl",)).dump(out / "manifest.json")
        truth = dict(self.truth)
        if self.decisions is not None:
            truth["decisions"] = {k: v.tolist() for k, v in self.decisions.items()}
        (out / "truth.json").write_text(json.dumps(truth, separators=(",", ":")) + "\n")
        return out


def _words(rng: np.random.Generator, n: int, taken: set[str]) -> list[str]:
    letters = np.array(list("abcdefghijklmnopqrstuvwxyz"))
    out: list[str] = []
    while len(out) < n:
        w = "".join(rng.choice(letters, size=int(rng.integers(5, 9))))
        if w not in taken:
            taken.add(w)
            out.append(w)
    return out


def _logistic(x: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-x))


def _layout(cfg: SynthConfig, rng: np.random.Generator):
    """Communities as lists of (platform, block) and the user -> community map."""
    P = len(cfg.platforms)
    pairs = list(combinations(range(P), 2))
    order = rng.permutation(len(pairs))
    communities: list[dict[str, Any]] = []
    for b in range(cfg.n_bridge):
        a, c = pairs[order[b % len(pairs)]]
        if rng.random() < 0.5:
            a, c = c, a
        communities.append({"id": b, "bridge": True, "platforms": [a, c]})
    for s in range(cfg.n_communities - cfg.n_bridge):
        # single-platform communities go to the platforms with the fewest blocks
        load = Counter(p for cm in communities for p in cm["platforms"])
        p = min(range(P), key=lambda q: (load[q], q))
        communities.append({"id": cfg.n_bridge + s, "bridge": False, "platforms": [p]})
    members: dict[int, dict[int, np.ndarray]] = defaultdict(dict)
    user_comm = np.full((P, cfg.n_users), -1, dtype=np.int64)
    for p in range(P):
        owners = [cm["id"] for cm in communities if p in cm["platforms"]]
        if not owners:
            raise SynthError(f"platform {cfg.platforms[p]} has no community")
        perm = rng.permutation(cfg.n_users)
        for cid, block in zip(owners, np.array_split(perm, len(owners))):
            members[cid][p] = np.sort(block)
            user_comm[p, block] = cid
    return communities, members, user_comm


def generate(cfg: SynthConfig) -> SynthResult:
    bound = cfg.expected_posts_bound()
    if bound > MAX_EXPECTED_POSTS:
        raise SynthError(f"infeasible config: up to {bound:.3g} expected posts exceeds {MAX_EXPECTED_POSTS:.0e}")
    rng = np.random.default_rng(cfg.seed)
    P = len(cfg.platforms)
    D = cfg.duration_days
    communities, members, user_comm = _layout(cfg, rng)
    taken: set[str] = set()
    vocab = {cm["id"]: _words(rng, cfg.vocab_size, taken) for cm in communities}

    # narratives: the migratory share goes to bridge communities
    n_mig = int(round(cfg.fraction_migratory * cfg.n_narratives))
    bridges = [cm for cm in communities if cm["bridge"]]
    singles = [cm for cm in communities if not cm["bridge"]]
    narratives: list[dict[str, Any]] = []
    for n in range(cfg.n_narratives):
        migratory = n < n_mig
        cm = bridges[n % len(bridges)] if migratory else singles[(n - n_mig) % len(singles)]
        src_code = cm["platforms"][0]
        life = int(rng.integers(cfg.life_min, cfg.life_max + 1))
        lag = int(rng.integers(cfg.lag_min, cfg.lag_max + 1)) if migratory else None
        latest = max(0, D - life - (lag or 0) - 1)
        start = int(rng.integers(0, latest + 1))
        toks = list(rng.choice(vocab[cm["id"]], size=cfg.narrative_tokens, replace=False))
        narratives.append({
            "id": n,
            "community": cm["id"],
            "migratory": migratory,
            "source": cfg.platforms[src_code],
            "source_code": src_code,
            "target": cfg.platforms[cm["platforms"][1]] if migratory else None,
            "lag_days": lag,
            "start_day": start,
            "life_days": life,
            "virality": float(rng.normal(0.0, cfg.virality_sd)) if cfg.virality_sd > 0 else 0.0,
            "tokens": [str(t) for t in toks],
            "url": f"https://news.example/{toks[0]}-{toks[1]}",
        })

    b0 = math.log(cfg.base_rate / (1 - cfg.base_rate))
    gamma = np.asarray(cfg.platform_effects)
    adopted = [dict() for _ in narratives]  # (platform, user) -> day
    adoptions: list[tuple[int, int, int, int, float, bool]] = []  # p, u, narrative, day, R, planted
    dec: dict[str, list] = defaultdict(list)
    prior_posts = np.zeros((P, cfg.n_users), dtype=np.int64)
    pending_posts: dict[int, np.ndarray] = {}
    first_source_day: dict[int, int] = {}

    def open_platforms(nar: dict, day: int) -> list[int]:
        cm = communities[nar["community"]]
        s, end = nar["start_day"], nar["start_day"] + nar["life_days"]
        out = []
        if s <= day < end:
            out.append(nar["source_code"])
        first = first_source_day.get(nar["id"])
        if nar["migratory"] and first is not None:
            # lag counts from the first source post, so the target side never leads it
            ts_ = first + nar["lag_days"] + 1
            if ts_ <= day < ts_ + nar["life_days"]:
                out.append(cm["platforms"][1])
        return out

    post_days: list[np.ndarray] = []
    for day in range(D):
        day_adopt: list[tuple[int, int, int, float, bool]] = []
        open_by_platform: dict[int, list[int]] = defaultdict(list)
        for nar in narratives:
            plats = open_platforms(nar, day)
            if not plats:
                continue
            cm_members = members[nar["community"]]
            ado = adopted[nar["id"]]
            n_open = sum(len(cm_members[p]) for p in plats)
            n_done = sum(1 for (p, _u) in ado if p in plats)
            R = n_done / max(n_open - 1, 1)
            for p in plats:
                open_by_platform[p].append(nar["id"])
                users = cm_members[p]
                elig = np.asarray([u for u in users if (p, int(u)) not in ado], dtype=np.int64)
                if not len(elig):
                    continue
                prob = _logistic(b0 + cfg.beta1 * R + gamma[p] + nar["virality"])
                draw = rng.random(len(elig)) < prob
                if cfg.log_decisions:
                    dec["platform"].append(np.full(len(elig), p))
                    dec["user"].append(elig)
                    dec["narrative"].append(np.full(len(elig), nar["id"]))
                    dec["day"].append(np.full(len(elig), day))
                    dec["R"].append(np.full(len(elig), R))
                    dec["prior_posts"].append(prior_posts[p, elig].copy())
                    dec["adopted"].append(draw.astype(np.int64))
                for u in elig[draw]:
                    day_adopt.append((p, int(u), nar["id"], R, True))
        # off-community noise: one post on a narrative open on the user's own platform
        if cfg.noise_adoption_rate > 0:
            for p in range(P):
                cands = open_by_platform.get(p)
                if not cands:
                    continue
                hits = np.flatnonzero(rng.random(cfg.n_users) < cfg.noise_adoption_rate)
                for u in hits:
                    nid = int(cands[int(rng.integers(len(cands)))])
                    if narratives[nid]["community"] == user_comm[p, u] or (p, int(u)) in adopted[nid]:
                        continue
                    day_adopt.append((p, int(u), nid, -1.0, False))
        for p, u, nid, R, planted in day_adopt:
            if (p, u) in adopted[nid]:
                continue
            adopted[nid][(p, u)] = day
            if p == narratives[nid]["source_code"]:
                first_source_day.setdefault(nid, day)
            if planted:
                n_posts = cfg.posts_per_adoption
                gaps = rng.geometric(cfg.post_gap_p, size=n_posts - 1) if n_posts > 1 else np.zeros(0, np.int64)
                days = day + np.r_[0, np.cumsum(gaps)]
                days = days[days < D]
            else:
                days = np.array([day])
            adoptions.append((p, u, nid, day, R, planted))
            post_days.append(days)
            # prior-post counts only include posts already made
            for d in days:
                pending_posts.setdefault(int(d), np.zeros((P, cfg.n_users), dtype=np.int64))[p, u] += 1
        if day in pending_posts:
            prior_posts += pending_posts.pop(day)

    posts = _render_posts(cfg, rng, narratives, communities, adoptions, post_days, vocab, user_comm)
    truth = _truth(cfg, communities, narratives, user_comm, adoptions, post_days, posts)
    decisions = None
    if cfg.log_decisions:
        decisions = {k: np.concatenate(v) if v else np.zeros(0) for k, v in dec.items()}
    return SynthResult(posts, truth, decisions)


def user_id(platform: str, u: int) -> str:
    return f"{platform}_u{u:04d}"


def _render_posts(cfg, rng, narratives, communities, adoptions, post_days, vocab, user_comm) -> list[Post]:
    P = len(cfg.platforms)
    # each platform writes its own three narrative words as hashtags
    tag_slots = {p: [(3 * p + j) % cfg.narrative_tokens for j in range(3)] for p in range(P)}
    rows = []
    for (p, u, nid, _day, _R, _planted), days in zip(adoptions, post_days):
        for d in days:
            rows.append((int(d), p, u, nid))
    n = len(rows)
    if not n:
        return []
    arr = np.asarray(rows, dtype=np.int64)
    ts = arr[:, 0] * SECONDS_PER_DAY + rng.integers(0, SECONDS_PER_DAY, n)
    order = np.lexsort((arr[:, 3], arr[:, 2], arr[:, 1], ts))
    arr, ts = arr[order], ts[order]
    width = cfg.narrative_tokens + cfg.noise_tokens
    perms = np.argsort(rng.random((n, width)), axis=1)
    noise_idx = rng.integers(0, cfg.vocab_size, (n, cfg.noise_tokens))
    url_draw = rng.random(n)
    url_shared = rng.random(n) < 0.3
    mention = rng.random(n) < 0.3
    mention_user = rng.integers(0, cfg.n_users, n)
    likes = np.floor(rng.pareto(1.5, n) * 3).astype(np.int64)
    shares = rng.binomial(likes, 0.1)
    rendered: dict[tuple[int, int], tuple[list[str], tuple[str, ...]]] = {}
    posts = []
    for k in range(n):
        p, u, nid = int(arr[k, 1]), int(arr[k, 2]), int(arr[k, 3])
        nar = narratives[nid]
        plat = cfg.platforms[p]
        key = (nid, p)
        if key not in rendered:
            words = nar["tokens"]
            rendered[key] = (
                [("#" + w if i in tag_slots[p] else w) for i, w in enumerate(words)],
                tuple(words[i] for i in sorted(tag_slots[p])),
            )
        body, tags = rendered[key]
        voc = vocab[int(user_comm[p, u])]
        full = body + [voc[j] for j in noise_idx[k]]
        text_tokens = [full[i] for i in perms[k]]
        urls: tuple[str, ...] = ()
        if plat == "telegram" or url_draw[k] < 0.2:
            urls = (nar["url"] if url_shared[k] else f"https://{plat}.example/p/{k}",)
        if mention[k]:
            text_tokens.insert(0, "@" + user_id(plat, int(mention_user[k])))
        emoji = _EMOJI.get(plat, "")
        if emoji:
            text_tokens.append(emoji)
        posts.append(Post(
            post_id=f"p{k:07d}",
            author=UserRef(plat, user_id(plat, u)),
            timestamp=cfg.start_ts + int(ts[k]),
            text=" ".join(text_tokens + list(urls)),
            urls=urls,
            hashtags=tags,
            likes=int(likes[k]),
            shares=int(shares[k]),
        ))
    return posts


def _truth(cfg, communities, narratives, user_comm, adoptions, post_days, posts) -> dict[str, Any]:
    P = len(cfg.platforms)
    volumes = Counter(p.platform for p in posts)
    # per-narrative, per-platform post timestamps for the emergence bookkeeping
    by_np: dict[tuple[int, str], list[int]] = defaultdict(list)
    owner = _attribute(posts, narratives)
    for post, nid in zip(posts, owner):
        by_np[(nid, post.platform)].append(post.timestamp)
    planted = []
    for nar in narratives:
        if not nar["migratory"]:
            continue
        tgt = sorted(by_np.get((nar["id"], nar["target"]), []))
        src = sorted(by_np.get((nar["id"], nar["source"]), []))
        nar["source_first_ts"] = src[0] if src else None
        nar["target_first_ts"] = tgt[0] if tgt else None
        nar["target_threshold_ts"] = tgt[9] if len(tgt) >= 10 else None
        if len(tgt) >= 10 and src:
            planted.append({
                "narrative": nar["id"], "source": nar["source"], "target": nar["target"],
                "source_first_ts": src[0], "target_threshold_ts": tgt[9],
            })
    return {
        "config": {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(cfg).items()},
        "platforms": list(cfg.platforms),
        "start_ts": cfg.start_ts,
        "communities": [
            {"id": c["id"], "bridge": c["bridge"], "platforms": [cfg.platforms[p] for p in c["platforms"]]}
            for c in communities
        ],
        "user_community": {
            f"{cfg.platforms[p]}:{user_id(cfg.platforms[p], u)}": int(user_comm[p, u])
            for p in range(P) for u in range(cfg.n_users)
        },
        "narratives": narratives,
        "adoptions": [
            {
                "user": f"{cfg.platforms[p]}:{user_id(cfg.platforms[p], u)}", "narrative": nid, "day": day,
                "R": R, "planted": planted_, "n_posts": int(len(days)),
            }
            for (p, u, nid, day, R, planted_), days in zip(adoptions, post_days)
        ],
        "emergences": planted,
        "volumes": {p: int(volumes.get(p, 0)) for p in cfg.platforms},
        "n_posts": len(posts),
    }


def _attribute(posts, narratives) -> list[int]:
    """Narrative of each post by majority overlap with the narrative token sets."""
    index: dict[str, list[int]] = defaultdict(list)
    for nar in narratives:
        for t in nar["tokens"]:
            index[t].append(nar["id"])
    out = []
    for post in posts:
        votes: Counter[int] = Counter()
        for tok in clean_text(post.text).split():
            for nid in index.get(tok, ()):
                votes[nid] += 1
        if not votes:
            out.append(-1)
            continue
        nid, n = max(votes.items(), key=lambda kv: (kv[1], -kv[0]))
        out.append(nid if n * 2 > len(narratives[nid]["tokens"]) else -1)
    return out


@dataclass
class VerifyReport:
    mismatches: list[str] = field(default_factory=list)
    volumes: dict[str, int] = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return not self.mismatches


def verify(posts: list[Post], truth: dict[str, Any]) -> VerifyReport:
    """Recount adoptions, migration lags and per-platform volumes from the corpus."""
    narratives = truth["narratives"]
    owner = _attribute(posts, narratives)
    report = VerifyReport()
    report.volumes = dict(Counter(p.platform for p in posts))
    counts: Counter[tuple[str, int]] = Counter()
    first_day: dict[tuple[str, int], int] = {}
    start_day = truth["start_ts"] // SECONDS_PER_DAY
    for post, nid in zip(posts, owner):
        if nid < 0:
            report.mismatches.append(f"post {post.post_id}: no narrative attribution")
            continue
        key = (str(post.author), nid)
        counts[key] += 1
        d = post.day - start_day
        first_day[key] = min(first_day.get(key, d), d)
    expected = {(a["user"], a["narrative"]): a for a in truth["adoptions"]}
    for key in sorted(set(expected) | set(counts), key=lambda k: (k[1], k[0])):
        a = expected.get(key)
        got = counts.get(key, 0)
        if a is None:
            report.mismatches.append(f"adoption {key[0]} narrative {key[1]}: {got} posts not in truth")
        elif got != a["n_posts"]:
            report.mismatches.append(f"adoption {key[0]} narrative {key[1]}: expected {a['n_posts']} posts, found {got}")
        elif first_day[key] != a["day"]:
            report.mismatches.append(f"adoption {key[0]} narrative {key[1]}: expected day {a['day']}, found {first_day[key]}")
    first_ts: dict[tuple[int, str], int] = {}
    for post, nid in zip(posts, owner):
        if nid >= 0:
            k = (nid, post.platform)
            first_ts[k] = min(first_ts.get(k, post.timestamp), post.timestamp)
    for nar in narratives:
        if not nar["migratory"]:
            continue
        s = first_ts.get((nar["id"], nar["source"]))
        t = first_ts.get((nar["id"], nar["target"]))
        if s is not None and t is not None and t < s + nar["lag_days"] * SECONDS_PER_DAY:
            report.mismatches.append(f"narrative {nar['id']}: target post before planted lag")
    # volume drift is implied by the adoption recount; report it only when unexplained
    if not report.mismatches:
        for plat, n in truth["volumes"].items():
            if report.volumes.get(plat, 0) != n:
                report.mismatches.append(f"platform {plat}: expected {n} posts, found {report.volumes.get(plat, 0)}")
    return report


def adoption_rows(result: SynthResult, period_days: int = 7) -> AdoptionRows:
    """Logged adoption decisions as logit rows with the generator's own ``R``.

    Users are keyed by (platform, index); periods are ``period_days`` blocks.
    """
    dec = result.decisions
    if dec is None:
        raise SynthError("generate with log_decisions=True to get adoption rows")
    n_users = result.truth["config"]["n_users"]
    return AdoptionRows(
        user=dec["platform"].astype(np.int64) * n_users + dec["user"].astype(np.int64),
        platform=dec["platform"].astype(np.int64),
        period=dec["day"].astype(np.int64) // period_days,
        R=dec["R"],
        posts=dec["prior_posts"],
        adopted=dec["adopted"],
    )


def load_truth(path: str | Path) -> dict[str, Any]:
    return json.loads(Path(path).read_text())
