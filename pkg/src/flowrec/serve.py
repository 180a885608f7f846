"""Offline precompute plus an online rerank service.

``precompute`` walks the corpus and user list once with a checkpoint and
snapshots every article representation, profile text and frozen profile
embedding into a :class:`RepStore`. ``rank`` then scores candidate lists
through exactly the same arithmetic as offline evaluation, so serving
probabilities are bit-identical to evaluation ones for the same inputs.

The HTTP layer is a small JSON-over-HTTP server: ``POST /rank`` and
``GET /health``. Store and parameters are immutable after load; request
handling is stateless and thread-safe.
"""

from __future__ import annotations

import json
import threading
import time
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np

from .checkpoint import ensure_version_tag, read_tensor_file, write_tensor_file
from .data import Article
from .encode import CachingEmbedder, encode_article
from .errors import ConfigError
from .model import ModelParams, score_candidates


@dataclass
class UserRecord:
    user_id: str
    history: list[str]
    attrs: dict[str, str] = field(default_factory=dict)


@dataclass
class UserEntry:
    history: list[str]
    profile_text: str
    profile_emb: np.ndarray


@dataclass
class RepStore:
    version_tag: str
    article_dim: int
    embed_dim: int
    article_reps: dict[str, np.ndarray] = field(default_factory=dict)
    users: dict[str, UserEntry] = field(default_factory=dict)
    partial: bool = False
    errors: list[str] = field(default_factory=list)


def users_from_impressions(impressions) -> list[UserRecord]:
    """One record per user, carrying the history of their latest impression."""
    latest: dict[str, tuple[int, list[str]]] = {}
    for imp in impressions:
        seen = latest.get(imp.user_id)
        if seen is None or imp.timestamp >= seen[0]:
            latest[imp.user_id] = (imp.timestamp, imp.history)
    return [UserRecord(uid, history) for uid, (_, history) in sorted(latest.items())]


def precompute(params: ModelParams, embedder, corpus: dict[str, Article],
               users: list[UserRecord], profile_provider=None,
               allow_partial: bool = False) -> RepStore:
    """Offline inference pass: encode every article and user in scope.

    Articles missing a required summary become per-item errors; with
    ``allow_partial`` the store is still produced (flagged) without them,
    otherwise the error list is raised as one failure.
    """
    params.validate_shapes()
    cfg = params.config
    embedder = embedder if isinstance(embedder, CachingEmbedder) else CachingEmbedder(embedder)
    store = RepStore(
        version_tag=ensure_version_tag(params),
        article_dim=cfg.article_dim,
        embed_dim=cfg.embed_dim,
    )
    for article_id in corpus:
        article = corpus[article_id]
        if cfg.use_summaries and article.body and article.summary is None:
            store.errors.append(f"article {article_id}: summary required but missing")
            continue
        store.article_reps[article_id] = encode_article(params, embedder, article).full

    for user in users:
        history = [a for a in user.history if a in store.article_reps]
        if profile_provider is not None and history:
            text = profile_provider.profile_text(user.user_id, history)
        else:
            text = ""
        emb = embedder.embed(text) if text else np.zeros(cfg.embed_dim)
        store.users[user.user_id] = UserEntry(history, text, emb)

    if store.errors:
        if not allow_partial:
            raise ConfigError(
                f"precompute failed for {len(store.errors)} items "
                f"(first: {store.errors[0]}); pass allow_partial to keep going"
            )
        store.partial = True
    return store


def save_store(path, store: RepStore) -> None:
    article_ids = list(store.article_reps)
    user_ids = list(store.users)
    header = {
        "kind": "repstore",
        "format_version": 1,
        "version_tag": store.version_tag,
        "article_dim": store.article_dim,
        "embed_dim": store.embed_dim,
        "article_ids": article_ids,
        "users": {
            uid: {"history": e.history, "profile_text": e.profile_text}
            for uid, e in store.users.items()
        },
        "partial": store.partial,
        "errors": store.errors,
    }
    tensors = {}
    if article_ids:
        tensors["article_reps"] = np.stack([store.article_reps[a] for a in article_ids])
    if user_ids:
        tensors["profile_embs"] = np.stack([store.users[u].profile_emb for u in user_ids])
    write_tensor_file(path, header, tensors)


def load_store(path) -> RepStore:
    header, tensors = read_tensor_file(path)
    if header.get("kind") != "repstore":
        raise ConfigError(f"{path} is not a rep store")
    store = RepStore(
        version_tag=header["version_tag"],
        article_dim=int(header["article_dim"]),
        embed_dim=int(header["embed_dim"]),
        partial=bool(header.get("partial", False)),
        errors=list(header.get("errors", [])),
    )
    ids = header["article_ids"]
    if ids:
        reps = tensors["article_reps"]
        store.article_reps = {a: reps[i] for i, a in enumerate(ids)}
    user_meta = header["users"]
    if user_meta:
        embs = tensors["profile_embs"]
        for i, (uid, meta) in enumerate(user_meta.items()):
            store.users[uid] = UserEntry(list(meta["history"]), meta["profile_text"], embs[i])
    return store


# ---------------------------------------------------------------------------
# Reranking
# ---------------------------------------------------------------------------

@dataclass
class RankRequest:
    user_id: str
    candidate_ids: list[str]
    top_k: int | None = None


@dataclass
class RankResponse:
    results: list[tuple[str, float]]  # ordered by probability, descending
    model_version: str
    latency_ms: float

    def to_dict(self) -> dict:
        return {
            "results": [{"article_id": a, "probability": p} for a, p in self.results],
            "model_version": self.model_version,
            "latency_ms": self.latency_ms,
        }


def rank(request: RankRequest, store: RepStore, params: ModelParams) -> RankResponse:
    """Score and order a candidate list for one user.

    Unknown users fall back to a cold start (empty history, zero profile);
    unknown candidate ids are a request-level error. The store must carry
    the version tag of the loaded checkpoint.
    """
    started = time.perf_counter()
    if store.version_tag != ensure_version_tag(params):
        raise ConfigError(
            f"rep store version {store.version_tag[:12]} does not match "
            f"checkpoint version {params.version_tag[:12]}"
        )
    if not request.candidate_ids:
        raise ValueError("rank request has no candidates")
    missing = [a for a in request.candidate_ids if a not in store.article_reps]
    if missing:
        raise KeyError(f"unknown candidate id(s): {', '.join(missing)}")

    entry = store.users.get(request.user_id)
    if entry is None:
        hist = np.zeros((0, store.article_dim))
        profile = np.zeros(store.embed_dim)
    else:
        hist_ids = [a for a in entry.history if a in store.article_reps]
        hist = np.stack([store.article_reps[a] for a in hist_ids]) if hist_ids else np.zeros((0, store.article_dim))
        profile = entry.profile_emb

    scored = score_candidates(
        params, request.candidate_ids,
        [store.article_reps[a] for a in request.candidate_ids], hist, profile,
    )
    order = sorted(range(len(scored)), key=lambda i: (-scored[i].probability, i))
    if request.top_k is not None:
        order = order[: max(request.top_k, 0)]
    results = [(scored[i].article_id, scored[i].probability) for i in order]
    latency = (time.perf_counter() - started) * 1000.0
    return RankResponse(results=results, model_version=store.version_tag, latency_ms=latency)


# ---------------------------------------------------------------------------
# HTTP layer
# ---------------------------------------------------------------------------

class RankService:
    """Immutable bundle of store + params behind the HTTP handler."""

    def __init__(self, store: RepStore, params: ModelParams):
        if store.version_tag != ensure_version_tag(params):
            raise ConfigError("rep store was built from a different checkpoint version")
        self.store = store
        self.params = params

    def handle_rank(self, payload: dict) -> dict:
        request = RankRequest(
            user_id=str(payload.get("user_id", "")),
            candidate_ids=[str(a) for a in payload.get("candidates", [])],
            top_k=payload.get("top_k"),
        )
        return rank(request, self.store, self.params).to_dict()

    def handle_health(self) -> dict:
        return {"status": "ok", "model_version": self.store.version_tag}


class _Handler(BaseHTTPRequestHandler):
    service: RankService  # injected by create_server

    def _reply(self, status: int, payload: dict) -> None:
        raw = json.dumps(payload).encode("utf-8")
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(raw)))
        self.end_headers()
        self.wfile.write(raw)

    def do_GET(self):  # noqa: N802 (http.server API)
        if self.path == "/health":
            self._reply(200, self.service.handle_health())
        else:
            self._reply(404, {"error": f"unknown path {self.path}"})

    def do_POST(self):  # noqa: N802
        if self.path != "/rank":
            self._reply(404, {"error": f"unknown path {self.path}"})
            return
        try:
            length = int(self.headers.get("Content-Length", "0"))
            payload = json.loads(self.rfile.read(length).decode("utf-8"))
            self._reply(200, self.service.handle_rank(payload))
        except (KeyError, ValueError) as exc:
            self._reply(400, {"error": str(exc)})
        except Exception as exc:  # pragma: no cover - defensive
            self._reply(500, {"error": f"internal error: {exc}"})

    def log_message(self, fmt, *args):  # silence default stderr chatter
        pass


def create_server(store: RepStore, params: ModelParams, host: str = "127.0.0.1",
                  port: int = 8080) -> ThreadingHTTPServer:
    service = RankService(store, params)
    handler = type("BoundHandler", (_Handler,), {"service": service})
    return ThreadingHTTPServer((host, port), handler)


def serve_in_thread(store: RepStore, params: ModelParams, host: str = "127.0.0.1",
                    port: int = 0) -> tuple[ThreadingHTTPServer, threading.Thread]:
    """Start the service on a background thread (port 0 picks a free port)."""
    server = create_server(store, params, host, port)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    return server, thread
