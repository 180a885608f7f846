"""Corpus ingestion: MIND-style TSV logs, a canonical JSONL interchange
format, and seeded synthetic datasets with planted click rules.

Parsers are record-level fault tolerant: a malformed line is reported with
its line number and parsing continues. Totals therefore always satisfy
``len(records) + len(errors) == non-blank input lines``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from datetime import datetime, timezone
from typing import Iterable, Iterator

import numpy as np


class DataFormatError(ValueError):
    """Raised for unrecoverable dataset-level problems (not per-record ones)."""


@dataclass
class Article:
    article_id: str
    title: str
    body: str = ""
    summary: str | None = None
    attributes: dict[str, str] = field(default_factory=dict)

    @property
    def category(self) -> str | None:
        return self.attributes.get("category")

    def body_text(self, use_summary: bool) -> str:
        """The body slice the encoder should see."""
        if use_summary and self.summary is not None:
            return self.summary
        return self.body


@dataclass
class Impression:
    impression_id: str
    user_id: str
    timestamp: int
    history: list[str]                 # article ids, oldest first
    candidates: list[tuple[str, int]]  # (article id, 0/1 label)

    @property
    def labels(self) -> list[int]:
        return [label for _, label in self.candidates]


@dataclass
class ParseError:
    line_no: int
    message: str

    def __str__(self) -> str:
        return f"line {self.line_no}: {self.message}"


@dataclass
class ParseResult:
    articles: list[Article] = field(default_factory=list)
    impressions: list[Impression] = field(default_factory=list)
    errors: list[ParseError] = field(default_factory=list)


# ---------------------------------------------------------------------------
# MIND TSV parsers
# ---------------------------------------------------------------------------

_MIND_TIME_FORMATS = ("%m/%d/%Y %I:%M:%S %p", "%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M:%S")


def _parse_timestamp(raw: str) -> int:
    raw = raw.strip()
    if raw.isdigit() or (raw[:1] == "-" and raw[1:].isdigit()):
        return int(raw)
    for fmt in _MIND_TIME_FORMATS:
        try:
            return int(datetime.strptime(raw, fmt).replace(tzinfo=timezone.utc).timestamp())
        except ValueError:
            continue
    raise ValueError(f"unrecognized timestamp {raw!r}")


def parse_mind_news(lines: Iterable[str]) -> ParseResult:
    """Parse news TSV lines: id, category, subcategory, title, abstract, ...

    The abstract column is kept as the article body; url and entity columns
    are ignored. Duplicate ids are rejected per record, first one wins.
    """
    out = ParseResult()
    seen: set[str] = set()
    for line_no, line in enumerate(lines, start=1):
        line = line.rstrip("\n")
        if not line.strip():
            continue
        fields = line.split("\t")
        if len(fields) < 5:
            out.errors.append(ParseError(line_no, f"expected >= 5 tab-separated fields, got {len(fields)}"))
            continue
        article_id, category, subcategory, title, abstract = fields[:5]
        if not article_id:
            out.errors.append(ParseError(line_no, "empty article id"))
            continue
        if article_id in seen:
            out.errors.append(ParseError(line_no, f"duplicate article id {article_id!r}"))
            continue
        if not title:
            out.errors.append(ParseError(line_no, f"article {article_id!r} has an empty title"))
            continue
        seen.add(article_id)
        out.articles.append(
            Article(
                article_id=article_id,
                title=title,
                body=abstract,
                attributes={"category": category, "subcategory": subcategory},
            )
        )
    return out


def parse_mind_behaviors(lines: Iterable[str]) -> ParseResult:
    """Parse behavior TSV lines: id, user, time, history, labeled candidates.

    History is consumed as given (oldest first). Candidate tokens must end
    in ``-0`` or ``-1``.
    """
    out = ParseResult()
    for line_no, line in enumerate(lines, start=1):
        line = line.rstrip("\n")
        if not line.strip():
            continue
        fields = line.split("\t")
        if len(fields) < 5:
            out.errors.append(ParseError(line_no, f"expected 5 tab-separated fields, got {len(fields)}"))
            continue
        imp_id, user_id, raw_time, raw_history, raw_candidates = fields[:5]
        try:
            timestamp = _parse_timestamp(raw_time)
        except ValueError as exc:
            out.errors.append(ParseError(line_no, str(exc)))
            continue
        history = raw_history.split() if raw_history.strip() else []
        candidates: list[tuple[str, int]] = []
        bad = None
        for token in raw_candidates.split():
            art_id, dash, label = token.rpartition("-")
            if not dash or label not in ("0", "1") or not art_id:
                bad = f"candidate token {token!r} must look like '<id>-0' or '<id>-1'"
                break
            candidates.append((art_id, int(label)))
        if bad:
            out.errors.append(ParseError(line_no, bad))
            continue
        if not candidates:
            out.errors.append(ParseError(line_no, "impression has no candidates"))
            continue
        out.impressions.append(Impression(imp_id, user_id, timestamp, history, candidates))
    return out


# ---------------------------------------------------------------------------
# Canonical JSONL interchange format
# ---------------------------------------------------------------------------

def parse_jsonl(lines: Iterable[str]) -> ParseResult:
    """Parse the canonical one-object-per-line format.

    Records carry ``kind: "article"`` or ``kind: "impression"``; anything
    else is a record-level error.
    """
    out = ParseResult()
    seen: set[str] = set()
    for line_no, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            out.errors.append(ParseError(line_no, f"invalid JSON: {exc.msg}"))
            continue
        kind = rec.get("kind")
        try:
            if kind == "article":
                if rec["id"] in seen:
                    raise ValueError(f"duplicate article id {rec['id']!r}")
                seen.add(rec["id"])
                out.articles.append(
                    Article(
                        article_id=str(rec["id"]),
                        title=str(rec["title"]),
                        body=str(rec.get("body", "")),
                        summary=rec.get("summary"),
                        attributes={str(k): str(v) for k, v in rec.get("attributes", {}).items()},
                    )
                )
            elif kind == "impression":
                candidates = [(str(a), int(y)) for a, y in rec["candidates"]]
                if any(y not in (0, 1) for _, y in candidates):
                    raise ValueError("labels must be 0 or 1")
                out.impressions.append(
                    Impression(
                        impression_id=str(rec["id"]),
                        user_id=str(rec["user"]),
                        timestamp=int(rec.get("timestamp", 0)),
                        history=[str(h) for h in rec.get("history", [])],
                        candidates=candidates,
                    )
                )
            else:
                raise ValueError(f"unknown kind {kind!r}")
        except (KeyError, ValueError, TypeError) as exc:
            msg = f"missing field {exc}" if isinstance(exc, KeyError) else str(exc)
            out.errors.append(ParseError(line_no, msg))
    return out


def article_to_json(article: Article) -> str:
    rec: dict = {
        "kind": "article",
        "id": article.article_id,
        "title": article.title,
        "body": article.body,
    }
    if article.summary is not None:
        rec["summary"] = article.summary
    rec["attributes"] = dict(sorted(article.attributes.items()))
    return json.dumps(rec, ensure_ascii=False)


def impression_to_json(impression: Impression) -> str:
    rec = {
        "kind": "impression",
        "id": impression.impression_id,
        "user": impression.user_id,
        "timestamp": impression.timestamp,
        "history": impression.history,
        "candidates": [[a, y] for a, y in impression.candidates],
    }
    return json.dumps(rec, ensure_ascii=False)


def serialize_jsonl(articles: Iterable[Article], impressions: Iterable[Impression]) -> Iterator[str]:
    for article in articles:
        yield article_to_json(article)
    for impression in impressions:
        yield impression_to_json(impression)


def write_jsonl(path, articles: Iterable[Article], impressions: Iterable[Impression]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for line in serialize_jsonl(articles, impressions):
            fh.write(line + "\n")


def read_jsonl(path) -> ParseResult:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_jsonl(fh)


# ---------------------------------------------------------------------------
# Corpus utilities
# ---------------------------------------------------------------------------

def build_corpus(articles: Iterable[Article]) -> dict[str, Article]:
    corpus: dict[str, Article] = {}
    for article in articles:
        if article.article_id in corpus:
            raise DataFormatError(f"duplicate article id {article.article_id!r}")
        corpus[article.article_id] = article
    return corpus


def unresolved_ids(corpus: dict[str, Article], impressions: Iterable[Impression]) -> set[str]:
    """Ids referenced by impressions that the corpus does not contain."""
    missing: set[str] = set()
    for imp in impressions:
        for art_id in imp.history:
            if art_id not in corpus:
                missing.add(art_id)
        for art_id, _ in imp.candidates:
            if art_id not in corpus:
                missing.add(art_id)
    return missing


def subsample_users(impressions: list[Impression], n_users: int, seed: int) -> list[Impression]:
    """Keep the impressions of a seeded random subset of users.

    Users are drawn without replacement from the sorted unique user list so
    the subsample is stable across platforms.
    """
    users = sorted({imp.user_id for imp in impressions})
    if n_users >= len(users):
        return list(impressions)
    rng = np.random.default_rng(seed)
    keep = set(rng.choice(np.array(users, dtype=object), size=n_users, replace=False).tolist())
    return [imp for imp in impressions if imp.user_id in keep]


def split_by_time(impressions: list[Impression], holdout_fraction: float = 0.05) -> tuple[list[Impression], list[Impression]]:
    """Last-by-timestamp holdout split (ties broken by impression id)."""
    if not 0.0 < holdout_fraction < 1.0:
        raise DataFormatError("holdout_fraction must be in (0, 1)")
    ordered = sorted(impressions, key=lambda i: (i.timestamp, i.impression_id))
    n_holdout = max(1, int(round(len(ordered) * holdout_fraction))) if ordered else 0
    cut = len(ordered) - n_holdout
    return ordered[:cut], ordered[cut:]


# ---------------------------------------------------------------------------
# Synthetic datasets with planted preferences
# ---------------------------------------------------------------------------

CLICK_RULES = ("planted-bilinear", "topic-affinity", "flow-mix")


@dataclass
class SyntheticSpec:
    n_users: int = 50
    n_articles: int = 200
    n_impressions: int = 2000
    embed_dim: int = 16
    topic_count: int = 8
    seed: int = 7
    click_rule: str = "planted-bilinear"
    history_length: int = 12
    candidates_per_impression: int = 6

    def validate(self) -> None:
        counts = {
            "n_users": self.n_users,
            "n_articles": self.n_articles,
            "n_impressions": self.n_impressions,
            "embed_dim": self.embed_dim,
            "topic_count": self.topic_count,
            "history_length": self.history_length,
            "candidates_per_impression": self.candidates_per_impression,
        }
        for name, value in counts.items():
            if value < 1:
                raise DataFormatError(f"{name} must be >= 1, got {value}")
        if self.click_rule not in CLICK_RULES:
            raise DataFormatError(f"click_rule must be one of {CLICK_RULES}, got {self.click_rule!r}")


@dataclass
class SyntheticDataset:
    articles: list[Article]
    impressions: list[Impression]
    truth: dict

    @property
    def corpus(self) -> dict[str, Article]:
        return build_corpus(self.articles)


def _topic_token(z: int) -> str:
    return f"topic{z}"


def _make_articles(rng: np.random.Generator, spec: SyntheticSpec) -> tuple[list[Article], np.ndarray, np.ndarray]:
    """Articles whose text and attributes express a planted topic plus a
    planted engagement level (visible only through attributes)."""
    topics = rng.integers(0, spec.topic_count, size=spec.n_articles)
    engagement = rng.integers(0, 2, size=spec.n_articles)  # 0 = low, 1 = high
    articles = []
    for j in range(spec.n_articles):
        z = int(topics[j])
        tok = _topic_token(z)
        flavor = f"t{z}w{int(rng.integers(0, 5))}"
        title = f"{tok} piece{j}"
        body = f"{tok} {tok} {flavor} coverage of {tok} for readers. More on {flavor} and {tok}."
        articles.append(
            Article(
                article_id=f"a{j}",
                title=title,
                body=body,
                attributes={
                    "category": tok,
                    "engagement": "high" if engagement[j] else "low",
                },
            )
        )
    return articles, topics, engagement


def _pick_history(rng, spec, topics, stable_topics) -> list[int]:
    """Indices of history articles: mostly from the stable topics, plus a
    little uniform noise."""
    by_topic: dict[int, np.ndarray] = {}

    def sample_from(topic: int) -> int:
        if topic not in by_topic:
            by_topic[topic] = np.flatnonzero(topics == topic)
        pool = by_topic[topic]
        if len(pool) == 0:
            return int(rng.integers(0, len(topics)))
        return int(pool[rng.integers(0, len(pool))])

    n_total = spec.history_length
    picks: list[int] = []
    n_stable = max(0, n_total - max(1, n_total // 6))
    for k in range(n_stable):
        picks.append(sample_from(int(stable_topics[k % len(stable_topics)])))
    while len(picks) < n_total:
        picks.append(int(rng.integers(0, len(topics))))
    rng.shuffle(picks)
    return picks


def generate_synthetic(spec: SyntheticSpec) -> SyntheticDataset:
    """Deterministically generate a corpus plus labeled impressions.

    Click rules:
      * ``topic-affinity``: P(click) is ``p_hi`` when the candidate topic is
        one of the user's preferred topics, else ``p_lo``.
      * ``planted-bilinear``: label = 1 iff ``sigmoid(u . M . v)`` exceeds a
        uniform draw, with per-user topic-preference vectors ``u``, per-topic
        article vectors ``v`` and a planted mixing matrix ``M``.
      * ``flow-mix``: the click logit adds a stable-preference term (candidate
        topic among the user's two dominant topics) and a history-conditioned
        term (mean planted engagement of same-topic history articles). The
        two terms are recoverable by different model components which makes
        this rule suitable for ablation experiments.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    articles, topics, engagement = _make_articles(rng, spec)

    n_pref = min(2, spec.topic_count)
    user_prefs = np.stack(
        [rng.choice(spec.topic_count, size=n_pref, replace=False) for _ in range(spec.n_users)]
    )

    truth: dict = {
        "click_rule": spec.click_rule,
        "article_topics": topics.tolist(),
        "article_engagement": engagement.tolist(),
        "user_preferred_topics": user_prefs.tolist(),
        "candidate_probs": [],
    }

    if spec.click_rule == "flow-mix":
        # The stable-preference signal is planted on a user attribute
        # (position -> favorite topic, via a seeded permutation) so that it
        # is only observable through the profile text, never through the
        # click history; the history-conditioned signal is planted on the
        # articles' engagement attribute, which titles never mention.
        position_topic = rng.permutation(spec.topic_count)
        user_position = rng.integers(0, spec.topic_count, size=spec.n_users)
        user_attrs = {
            f"u{k}": {
                "position": f"position{int(user_position[k])}",
                "organization": f"org{int(user_position[k]) % 3}",
                "skill": f"skill{int(user_position[k])}",
            }
            for k in range(spec.n_users)
        }
        truth["position_topic"] = position_topic.tolist()
        truth["user_position"] = user_position.tolist()
        truth["user_attrs"] = user_attrs

    if spec.click_rule == "planted-bilinear":
        centroids = rng.normal(size=(spec.topic_count, spec.embed_dim))
        centroids /= np.linalg.norm(centroids, axis=1, keepdims=True)
        mixing = np.eye(spec.embed_dim) + 0.1 * rng.normal(size=(spec.embed_dim, spec.embed_dim)) / math.sqrt(spec.embed_dim)
        user_vecs = centroids[user_prefs].sum(axis=1)
        article_vecs = centroids[topics]
        raw = user_vecs @ mixing @ article_vecs.T  # (n_users, n_articles)
        matched = np.array([[t in set(p) for t in topics] for p in user_prefs.tolist()])
        hi = raw[matched].mean() if matched.any() else 1.0
        lo = raw[~matched].mean() if not matched.all() else hi - 1.0
        scale = 8.0 / max(hi - lo, 1e-9)  # affinity gap of ~8 logits
        shift = -(hi + lo) / 2.0
        logits = scale * (raw + shift)
        truth["user_vectors"] = user_vecs.tolist()
        truth["mixing_matrix"] = mixing.tolist()
        truth["logit_scale"] = float(scale)
        truth["logit_shift"] = float(shift)

    p_hi, p_lo = 0.95, 0.05
    truth["p_hi"], truth["p_lo"] = p_hi, p_lo
    beta_profile, beta_instant, bias = 2.6, 2.9, -1.3
    if spec.click_rule == "flow-mix":
        truth["flow_mix_params"] = {
            "beta_profile": beta_profile,
            "beta_instant": beta_instant,
            "bias": bias,
        }

    def pick_from_topic(z: int, taken: set[int]) -> int:
        pool = np.flatnonzero(topics == z)
        for _ in range(4):  # prefer a candidate not already in this impression
            j = int(pool[rng.integers(0, len(pool))]) if len(pool) else int(rng.integers(0, spec.n_articles))
            if j not in taken:
                return j
        return j

    def pick_any(taken: set[int]) -> int:
        for _ in range(4):
            j = int(rng.integers(0, spec.n_articles))
            if j not in taken:
                return j
        return j

    impressions: list[Impression] = []
    for t in range(spec.n_impressions):
        user = int(rng.integers(0, spec.n_users))
        prefs = user_prefs[user]
        pref_set = set(int(z) for z in prefs)
        hist_idx = _pick_history(rng, spec, topics, prefs)

        n_cand = spec.candidates_per_impression
        cand_idx: list[int] = []
        taken: set[int] = set()
        if spec.click_rule == "flow-mix":
            fav = int(position_topic[user_position[user]])
            hist_topics = sorted({int(topics[i]) for i in hist_idx})
            for k in range(n_cand):
                if k < max(1, n_cand // 3):
                    j = pick_from_topic(fav, taken)
                elif k < max(2, 2 * n_cand // 3):
                    j = pick_from_topic(int(hist_topics[int(rng.integers(0, len(hist_topics)))]), taken)
                else:
                    j = pick_any(taken)
                cand_idx.append(j)
                taken.add(j)
        else:
            for k in range(n_cand):
                if k < n_cand // 2:
                    j = pick_from_topic(int(prefs[k % len(prefs)]), taken)
                else:
                    j = pick_any(taken)
                cand_idx.append(j)
                taken.add(j)

        candidates: list[tuple[str, int]] = []
        probs: list[float] = []
        for j in cand_idx:
            z = int(topics[j])
            if spec.click_rule == "topic-affinity":
                p = p_hi if z in pref_set else p_lo
            elif spec.click_rule == "planted-bilinear":
                p = float(1.0 / (1.0 + math.exp(-logits[user, j])))
            else:  # flow-mix
                same_topic = [i for i in hist_idx if int(topics[i]) == z]
                logit = bias + beta_profile * (z == int(position_topic[user_position[user]]))
                if same_topic:
                    mean_eng = float(np.mean([engagement[i] for i in same_topic]))
                    logit += beta_instant * (2.0 * mean_eng - 1.0)
                p = float(1.0 / (1.0 + math.exp(-logit)))
            label = int(rng.random() < p)
            candidates.append((articles[j].article_id, label))
            probs.append(p)

        truth["candidate_probs"].append(probs)
        impressions.append(
            Impression(
                impression_id=f"i{t}",
                user_id=f"u{user}",
                timestamp=t,
                history=[articles[i].article_id for i in hist_idx],
                candidates=candidates,
            )
        )

    return SyntheticDataset(articles=articles, impressions=impressions, truth=truth)
